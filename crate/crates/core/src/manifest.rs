//! Dataset manifest (JSON) and embedding blob (`PGEM`) I/O.
//!
//! A dataset directory holds `manifest.json` and the binary blob it names.
//! Ground-truth annotations share the manifest but are only readable through
//! [`EvaluationView`].

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::types::{BoundingBox, Indicator, IndicatorId, NoiseClass};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

pub const BLOB_MAGIC: [u8; 4] = *b"PGEM";
pub const BLOB_VERSION: u32 = 1;
const BLOB_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dim: usize,
    pub embedding_blob_ref: String,
    /// Reminiscence scenes; every box becomes an unlabeled node.
    pub scenes: Vec<Scene>,
    /// Captures from introducing and inspecting personal objects.
    pub interaction_scenes: Vec<Scene>,
    pub personal_objects: Vec<PersonalObject>,
    pub test: TestSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub image_ref: String,
    pub boxes: Vec<SceneBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub node_id: String,
    pub bbox: BoundingBox,
    pub embedding_offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_label: Option<IndicatorId>,
    #[serde(default)]
    noise_class: NoiseClass,
}

impl SceneBox {
    pub fn new(node_id: impl Into<String>, bbox: BoundingBox, embedding_offset: usize) -> Self {
        Self {
            node_id: node_id.into(),
            bbox,
            embedding_offset,
            gt_label: None,
            noise_class: NoiseClass::Clean,
        }
    }

    pub fn annotated(
        node_id: impl Into<String>,
        bbox: BoundingBox,
        embedding_offset: usize,
        gt_label: Option<IndicatorId>,
        noise_class: NoiseClass,
    ) -> Self {
        Self {
            gt_label,
            noise_class,
            ..Self::new(node_id, bbox, embedding_offset)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalObject {
    pub indicator: Indicator,
    pub seed_node_id: String,
    #[serde(default)]
    pub view_node_ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSection {
    pub scenes: Vec<Scene>,
    pub splits: Vec<TestSplit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSplit {
    pub name: String,
    pub queries: Vec<TestQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestQuery {
    pub scene_id: String,
    pub indicator: IndicatorId,
    pub gt_box: BoundingBox,
}

/// Read-only access to ground-truth annotations. Only evaluation and the
/// supervised baseline go through here.
#[derive(Debug)]
pub struct EvaluationView<'a> {
    by_node: HashMap<&'a str, &'a SceneBox>,
}

impl<'a> EvaluationView<'a> {
    pub fn gt_label(&self, node_id: &str) -> Option<&'a IndicatorId> {
        self.by_node.get(node_id).and_then(|b| b.gt_label.as_ref())
    }

    pub fn noise_class(&self, node_id: &str) -> Option<NoiseClass> {
        self.by_node.get(node_id).map(|b| b.noise_class)
    }
}

impl DatasetManifest {
    pub fn new(dim: usize, embedding_blob_ref: impl Into<String>) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            dim,
            embedding_blob_ref: embedding_blob_ref.into(),
            scenes: Vec::new(),
            interaction_scenes: Vec::new(),
            personal_objects: Vec::new(),
            test: TestSection::default(),
        }
    }

    /// Parses a manifest. In strict mode unknown keys are an error; otherwise
    /// they are logged and ignored.
    pub fn from_json(text: &str, strict: bool) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: Self = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
        if !unknown.is_empty() {
            if strict {
                return Err(Error::InvalidManifest(format!(
                    "unknown keys: {}",
                    unknown.join(", ")
                )));
            }
            for key in &unknown {
                log::warn!("ignoring unknown manifest key `{key}`");
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    /// Canonical serialization: pretty JSON, fixed key order, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    fn all_scenes(&self) -> impl Iterator<Item = &Scene> {
        self.scenes
            .iter()
            .chain(&self.interaction_scenes)
            .chain(&self.test.scenes)
    }

    pub fn all_boxes(&self) -> impl Iterator<Item = (&Scene, &SceneBox)> {
        self.all_scenes()
            .flat_map(|s| s.boxes.iter().map(move |b| (s, b)))
    }

    pub fn node_count(&self) -> usize {
        self.all_scenes().map(|s| s.boxes.len()).sum()
    }

    pub fn reminiscence_node_count(&self) -> usize {
        self.scenes.iter().map(|s| s.boxes.len()).sum()
    }

    /// Structural checks that do not need the blob.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidManifest(msg));
        if self.format_version != MANIFEST_VERSION {
            return bad(format!(
                "unsupported format_version {}",
                self.format_version
            ));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }

        let mut scene_ids = HashSet::new();
        for scene in self.all_scenes() {
            if !scene_ids.insert(scene.scene_id.as_str()) {
                return bad(format!("duplicate scene id `{}`", scene.scene_id));
            }
        }
        let mut node_ids = HashSet::new();
        for (_, b) in self.all_boxes() {
            if !node_ids.insert(b.node_id.as_str()) {
                return Err(Error::DuplicateNode(b.node_id.clone()));
            }
            b.bbox.validate()?;
        }

        let interaction: HashSet<&str> = self
            .interaction_scenes
            .iter()
            .flat_map(|s| s.boxes.iter().map(|b| b.node_id.as_str()))
            .collect();
        let mut indicators = HashSet::new();
        for po in &self.personal_objects {
            po.indicator.validate()?;
            if !indicators.insert(&po.indicator.id) {
                return Err(Error::DuplicateIndicator(po.indicator.id.to_string()));
            }
            for id in std::iter::once(&po.seed_node_id).chain(&po.view_node_ids) {
                if !interaction.contains(id.as_str()) {
                    return bad(format!(
                        "personal object `{}` references `{id}`, which is not an interaction box",
                        po.indicator.id
                    ));
                }
            }
        }

        let test_scenes: HashSet<&str> = self
            .test
            .scenes
            .iter()
            .map(|s| s.scene_id.as_str())
            .collect();
        let mut split_names = HashSet::new();
        for split in &self.test.splits {
            if !split_names.insert(split.name.as_str()) {
                return bad(format!("duplicate split `{}`", split.name));
            }
            for q in &split.queries {
                if !test_scenes.contains(q.scene_id.as_str()) {
                    return Err(Error::UnknownScene(q.scene_id.clone()));
                }
                q.gt_box.validate()?;
            }
        }
        Ok(())
    }

    /// Checks every embedding offset against the blob.
    pub fn validate_offsets(&self, blob: &EmbeddingBlob) -> Result<()> {
        if blob.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: blob.dim(),
            });
        }
        for (_, b) in self.all_boxes() {
            if b.embedding_offset >= blob.count() {
                return Err(Error::MissingEmbedding {
                    offset: b.embedding_offset,
                    count: blob.count(),
                });
            }
        }
        Ok(())
    }

    pub fn evaluation_view(&self) -> EvaluationView<'_> {
        EvaluationView {
            by_node: self
                .all_boxes()
                .map(|(_, b)| (b.node_id.as_str(), b))
                .collect(),
        }
    }

    pub fn test_scene(&self, scene_id: &str) -> Option<&Scene> {
        self.test.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn split(&self, name: &str) -> Option<&TestSplit> {
        self.test.splits.iter().find(|s| s.name == name)
    }
}

/// Row-major `f32` embeddings addressed by manifest offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBlob {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingBlob {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidBlob(format!(
                "{} values do not form rows of dim {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    /// Appends a row, returning its offset.
    pub fn push(&mut self, row: &[f32]) -> Result<usize> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(self.count() - 1)
    }

    pub fn row(&self, offset: usize) -> Result<&[f32]> {
        if offset >= self.count() {
            return Err(Error::MissingEmbedding {
                offset,
                count: self.count(),
            });
        }
        Ok(&self.data[offset * self.dim..(offset + 1) * self.dim])
    }

    pub fn vector(&self, offset: usize) -> Result<EmbeddingVector> {
        EmbeddingVector::new(self.row(offset)?.to_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BLOB_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < BLOB_HEADER_LEN {
            return Err(Error::InvalidBlob("truncated header".into()));
        }
        if bytes[..4] != BLOB_MAGIC {
            return Err(Error::InvalidBlob("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != BLOB_VERSION {
            return Err(Error::InvalidBlob(format!("unsupported version {version}")));
        }
        let count = word(8) as usize;
        let dim = word(12) as usize;
        if dim == 0 {
            return Err(Error::InvalidBlob("dim is zero".into()));
        }
        let payload = &bytes[BLOB_HEADER_LEN..];
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::InvalidBlob("size overflow".into()))?;
        if payload.len() != expected {
            return Err(Error::InvalidBlob(format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dim, data })
    }
}

/// A manifest with its blob, as stored in a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub blob: EmbeddingBlob,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, blob: EmbeddingBlob) -> Result<Self> {
        manifest.validate()?;
        manifest.validate_offsets(&blob)?;
        Ok(Self { manifest, blob })
    }

    pub fn load(dir: &Path, strict: bool) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = DatasetManifest::from_json(&text, strict)?;
        let blob_path = dir.join(&manifest.embedding_blob_ref);
        let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let blob = EmbeddingBlob::from_bytes(&bytes)?;
        Self::new(manifest, blob)
    }

    /// Writes `manifest.json` and the blob into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        write_file(&manifest_path, self.manifest.to_canonical_json().as_bytes())?;
        let blob_path = dir.join(&self.manifest.embedding_blob_ref);
        write_file(&blob_path, &self.blob.to_bytes())?;
        Ok(vec![manifest_path, blob_path])
    }

    pub fn embedding(&self, b: &SceneBox) -> Result<EmbeddingVector> {
        self.blob.vector(b.embedding_offset)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
