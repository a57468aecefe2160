//! Seed ingestion, simulated multi-view capture, and the method table.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::manifest::{Dataset, SceneBox};
use crate::store::NodeStore;
use crate::types::{LabelKind, ObjectNode, Origin};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewSimulationParams {
    pub views_per_object: usize,
    /// Noise norm relative to the seed norm.
    pub perturbation_sigma: f64,
    /// Dimension of the random subspace rotated per view; below 2 disables rotation.
    pub rotation_subspace_dim: usize,
    pub rng_seed: u64,
}

impl Default for ViewSimulationParams {
    fn default() -> Self {
        Self {
            views_per_object: 4,
            perturbation_sigma: 0.05,
            rotation_subspace_dim: 0,
            rng_seed: 0,
        }
    }
}

#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    Hash,
    PartialOrd,
    Ord,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Seeds only.
    Direct,
    /// Seeds plus propagation.
    Passive,
    /// Seeds, views, and propagation.
    Pga,
    /// Seeds plus ground-truth reminiscence labels.
    Supervised,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Direct,
        Method::Passive,
        Method::Pga,
        Method::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::Passive => "passive",
            Method::Pga => "pga",
            Method::Supervised => "supervised",
        }
    }

    pub fn config(self) -> MethodConfig {
        let (use_views, use_propagation, use_gt_reminiscence_labels) = match self {
            Method::Direct => (false, false, false),
            Method::Passive => (false, true, false),
            Method::Pga => (true, true, false),
            Method::Supervised => (false, false, true),
        };
        MethodConfig {
            name: self,
            use_views,
            use_propagation,
            use_gt_reminiscence_labels,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub name: Method,
    pub use_views: bool,
    pub use_propagation: bool,
    pub use_gt_reminiscence_labels: bool,
}

pub fn build_method_config(name: &str) -> Result<MethodConfig> {
    name.parse::<Method>().map(Method::config)
}

/// Loads one fixed seed per personal object and every reminiscence box
/// (restricted to `scenes` when given) as an unlabeled node.
pub fn ingest_seeds_in(dataset: &Dataset, scenes: Option<&HashSet<String>>) -> Result<NodeStore> {
    let m = &dataset.manifest;
    let interaction = interaction_boxes(dataset);
    let mut store = NodeStore::new(m.dim);
    for po in &m.personal_objects {
        store.register_indicator(po.indicator.clone())?;
    }
    for po in &m.personal_objects {
        let (scene_id, b) = lookup(&interaction, &po.seed_node_id)?;
        store.insert(ObjectNode::seed(
            b.node_id.clone(),
            dataset.embedding(b)?,
            scene_id,
            b.bbox,
            Origin::SeedHuman,
            po.indicator.id.clone(),
        ))?;
    }
    for scene in &m.scenes {
        if scenes.is_some_and(|keep| !keep.contains(&scene.scene_id)) {
            continue;
        }
        for b in &scene.boxes {
            store.insert(ObjectNode::reminiscence(
                b.node_id.clone(),
                dataset.embedding(b)?,
                scene.scene_id.clone(),
                b.bbox,
            ))?;
        }
    }
    Ok(store)
}

pub fn ingest_seeds(dataset: &Dataset) -> Result<NodeStore> {
    ingest_seeds_in(dataset, None)
}

fn interaction_boxes(dataset: &Dataset) -> HashMap<&str, (&str, &SceneBox)> {
    dataset
        .manifest
        .interaction_scenes
        .iter()
        .flat_map(|s| {
            s.boxes
                .iter()
                .map(move |b| (b.node_id.as_str(), (s.scene_id.as_str(), b)))
        })
        .collect()
}

fn lookup<'a>(
    boxes: &HashMap<&str, (&'a str, &'a SceneBox)>,
    node_id: &str,
) -> Result<(&'a str, &'a SceneBox)> {
    boxes
        .get(node_id)
        .copied()
        .ok_or_else(|| Error::UnknownNode(node_id.to_owned()))
}

/// Adds view nodes for every personal object: the captured views listed in
/// the manifest, or simulated ones when an object has none. Returns how many
/// were added.
pub fn add_views(
    store: &mut NodeStore,
    dataset: &Dataset,
    params: &ViewSimulationParams,
) -> Result<usize> {
    let interaction = interaction_boxes(dataset);
    let mut added = 0;
    for po in &dataset.manifest.personal_objects {
        let views = if po.view_node_ids.is_empty() {
            let seed_idx = store
                .index_of(&po.seed_node_id)
                .ok_or_else(|| Error::UnknownNode(po.seed_node_id.clone()))?;
            simulate_views(&store.node(seed_idx), params)?
        } else {
            po.view_node_ids
                .iter()
                .map(|id| {
                    let (scene_id, b) = lookup(&interaction, id)?;
                    Ok(ObjectNode::seed(
                        id.clone(),
                        dataset.embedding(b)?,
                        scene_id,
                        b.bbox,
                        Origin::SeedView,
                        po.indicator.id.clone(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        };
        for v in views {
            store.insert(v)?;
            added += 1;
        }
    }
    Ok(added)
}

/// Copies every reminiscence node's ground-truth indicator into the store.
pub fn apply_ground_truth(store: &mut NodeStore, dataset: &Dataset) -> Result<usize> {
    let view = dataset.manifest.evaluation_view();
    let mut applied = 0;
    for idx in store.reminiscence().to_vec() {
        let node_id = &store.record(idx).node_id;
        if let Some(gt) = view.gt_label(node_id) {
            if store.has_indicator(gt) {
                store.set_label(idx, gt, LabelKind::Annotated)?;
                applied += 1;
            }
        }
    }
    Ok(applied)
}

fn stream_id(s: &str) -> u64 {
    // FNV-1a, stable across platforms and runs.
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Orthonormalizes `vs` in place (modified Gram-Schmidt); drops degenerate vectors.
fn orthonormalize(vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for mut v in vs {
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Rotates the component of `v` lying in a random `k`-dim subspace by a
/// Haar-random orthogonal matrix.
fn rotate_in_subspace(v: &mut [f64], k: usize, rng: &mut ChaCha8Rng) {
    let dim = v.len();
    let basis = orthonormalize((0..k.min(dim)).map(|_| gaussian(rng, dim)).collect());
    let k = basis.len();
    let rotation = orthonormalize((0..k).map(|_| gaussian(rng, k)).collect());
    let coeffs: Vec<f64> = basis
        .iter()
        .map(|b| b.iter().zip(v.iter()).map(|(x, y)| x * y).sum())
        .collect();
    for (c, b) in coeffs.iter().zip(&basis) {
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
    }
    for (row, b) in rotation.iter().zip(&basis) {
        let c: f64 = row.iter().zip(&coeffs).map(|(r, c)| r * c).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
    }
}

/// Simulates `views_per_object` extra views of a seed by perturbing its
/// embedding. Deterministic in `params.rng_seed` and the seed's node id.
pub fn simulate_views(seed: &ObjectNode, params: &ViewSimulationParams) -> Result<Vec<ObjectNode>> {
    let label = match (&seed.label, seed.label_kind) {
        (Some(l), LabelKind::Fixed) => l.clone(),
        _ => {
            return Err(Error::InvalidNode {
                node_id: seed.node_id.clone(),
                reason: "views need a seed with a fixed label".into(),
            })
        }
    };
    if !(params.perturbation_sigma >= 0.0 && params.perturbation_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "perturbation_sigma {} must be finite and >= 0",
            params.perturbation_sigma
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    rng.set_stream(stream_id(&seed.node_id));

    let dim = seed.embedding.dim();
    let norm = seed.embedding.norm();
    let perturb = params.perturbation_sigma > 0.0 || params.rotation_subspace_dim >= 2;
    let mut views = Vec::with_capacity(params.views_per_object);
    for a in 0..params.views_per_object {
        let embedding = if perturb {
            let mut v: Vec<f64> = seed
                .embedding
                .iter()
                .map(|&x| f64::from(x) / norm)
                .collect();
            let scale = params.perturbation_sigma / (dim as f64).sqrt();
            for (x, n) in v.iter_mut().zip(gaussian(&mut rng, dim)) {
                *x += scale * n;
            }
            if params.rotation_subspace_dim >= 2 {
                rotate_in_subspace(&mut v, params.rotation_subspace_dim, &mut rng);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNormEmbedding);
            }
            let values: Vec<f32> = v.iter().map(|x| (x / n * norm) as f32).collect();
            let e = EmbeddingVector::new(values)?;
            if e.norm() == 0.0 {
                return Err(Error::ZeroNormEmbedding);
            }
            e
        } else {
            seed.embedding.clone()
        };
        views.push(ObjectNode::seed(
            format!("{}-sim{a}", seed.node_id),
            embedding,
            format!("{}-sim{a}", seed.scene_id),
            seed.bbox,
            Origin::SeedView,
            label.clone(),
        ));
    }
    Ok(views)
}
