//! Clustered synthetic datasets with controllable noise.
//!
//! One unit-norm center per indicator; clean nodes sit within a cosine cone
//! around their center, ambiguous nodes are mixtures of two centers and
//! invalid nodes are pushed away from every center.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::cosine_similarity;
use crate::error::{Error, Result};
use crate::manifest::{
    Dataset, DatasetManifest, EmbeddingBlob, PersonalObject, Scene, SceneBox, TestQuery, TestSplit,
};
use crate::types::{BoundingBox, Indicator, IndicatorId, NoiseClass};

pub const SPLIT_HETEROGENEOUS: &str = "heterogeneous";
pub const SPLIT_HOMOGENEOUS: &str = "homogeneous";
pub const SPLIT_CLUTTERED: &str = "cluttered";

const IMAGE_W: f64 = 640.0;
const IMAGE_H: f64 = 480.0;
const GRID_COLS: usize = 4;
const GRID_ROWS: usize = 3;
const CELL: f64 = 160.0;
/// Slack for f32 storage when checking generated cosines.
const COS_TOLERANCE: f64 = 1e-5;
const BLOB_REF: &str = "embeddings.bin";
const INVALID_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_indicators: usize,
    /// Clean reminiscence nodes per indicator.
    pub nodes_per_indicator: usize,
    pub n_scenes: usize,
    pub dim: usize,
    pub intra_cluster_cos_min: f64,
    pub inter_cluster_cos_max: f64,
    pub n_ambiguous: usize,
    pub n_invalid: usize,
    pub rng_seed: u64,
    /// Cosine between a seed and its center, drawn uniformly from this range.
    pub seed_cos_range: [f64; 2],
    /// Weight of the nearest other center in a seed's off-center residual,
    /// in [0, 1]. Non-zero values make seeds resemble a similar object.
    pub seed_confusion: f64,
    /// Captured views per object written to the manifest.
    pub views_per_object: usize,
    pub view_cos_range: [f64; 2],
    /// Test scenes per indicator in each split.
    pub test_scenes_per_indicator: usize,
    pub distractors_per_scene: usize,
    /// Adds a box loosely enclosing the target (IoU 0.55 to 0.74 with it).
    pub loose_candidates: bool,
    pub invalid_cos_max: f64,
    pub center_retry_budget: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::paper_mirroring()
    }
}

impl SyntheticSpec {
    /// 96 personal objects over 400 scenes with 393 ambiguous and 870
    /// invalid boxes.
    pub fn paper_mirroring() -> Self {
        Self {
            n_indicators: 96,
            nodes_per_indicator: 12,
            n_scenes: 400,
            dim: 48,
            intra_cluster_cos_min: 0.8,
            inter_cluster_cos_max: 0.5,
            n_ambiguous: 393,
            n_invalid: 870,
            rng_seed: 0,
            seed_cos_range: [0.5, 0.95],
            seed_confusion: 0.6,
            views_per_object: 4,
            view_cos_range: [0.85, 0.95],
            test_scenes_per_indicator: 2,
            distractors_per_scene: 5,
            loose_candidates: true,
            invalid_cos_max: 0.2,
            center_retry_budget: 200_000,
        }
    }

    /// Well separated clusters: inter-center cosine at most 0.3, members
    /// within 0.9 of their center.
    pub fn separable() -> Self {
        Self {
            n_indicators: 12,
            nodes_per_indicator: 20,
            n_scenes: 60,
            dim: 64,
            intra_cluster_cos_min: 0.9,
            inter_cluster_cos_max: 0.3,
            n_ambiguous: 60,
            n_invalid: 60,
            rng_seed: 0,
            seed_cos_range: [0.9, 1.0],
            seed_confusion: 0.0,
            views_per_object: 4,
            view_cos_range: [0.75, 0.9],
            test_scenes_per_indicator: 2,
            distractors_per_scene: 4,
            loose_candidates: false,
            invalid_cos_max: 0.2,
            center_retry_budget: 200_000,
        }
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim < 2 {
            return bad(format!("dim {} must be >= 2", self.dim));
        }
        if self.n_indicators == 0 {
            return bad("n_indicators must be >= 1".into());
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.intra_cluster_cos_min > self.inter_cluster_cos_max) {
            return bad(format!(
                "intra_cluster_cos_min {} must exceed inter_cluster_cos_max {}",
                self.intra_cluster_cos_min, self.inter_cluster_cos_max
            ));
        }
        let cos_ok = |v: f64| (-1.0..=1.0).contains(&v);
        for (name, v) in [
            ("intra_cluster_cos_min", self.intra_cluster_cos_min),
            ("inter_cluster_cos_max", self.inter_cluster_cos_max),
            ("invalid_cos_max", self.invalid_cos_max),
        ] {
            if !cos_ok(v) {
                return bad(format!("{name} {v} outside [-1, 1]"));
            }
        }
        for (name, [lo, hi]) in [
            ("seed_cos_range", self.seed_cos_range),
            ("view_cos_range", self.view_cos_range),
        ] {
            if !(cos_ok(lo) && cos_ok(hi) && lo <= hi && lo > 0.0) {
                return bad(format!(
                    "{name} [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1"
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.seed_confusion) {
            return bad(format!(
                "seed_confusion {} outside [0, 1]",
                self.seed_confusion
            ));
        }
        let reminiscence =
            self.n_indicators * self.nodes_per_indicator + self.n_ambiguous + self.n_invalid;
        if reminiscence > 0 && self.n_scenes == 0 {
            return bad("n_scenes must be >= 1 when there are reminiscence nodes".into());
        }
        if self.n_ambiguous > 0 && self.n_indicators < 2 {
            return bad("ambiguous nodes need at least two indicators".into());
        }
        if self.clutter_candidates() + 1 > GRID_COLS * GRID_ROWS {
            return bad(format!(
                "distractors_per_scene {} does not fit a {}x{} grid",
                self.distractors_per_scene, GRID_COLS, GRID_ROWS
            ));
        }
        Ok(())
    }

    fn clutter_candidates(&self) -> usize {
        2 * self.distractors_per_scene
    }
}

struct Gen {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Gen {
    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim)
            .map(|_| self.rng.sample(StandardNormal))
            .collect()
    }

    fn unit(&mut self) -> Vec<f64> {
        loop {
            let v = self.gaussian();
            if let Some(u) = normalized(&v) {
                return u;
            }
        }
    }

    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi > lo {
            self.rng.random_range(lo..=hi)
        } else {
            lo
        }
    }

    /// Unit vector at cosine `t` from unit `center`.
    fn around(&mut self, center: &[f64], t: f64) -> Vec<f64> {
        self.around_toward(center, t, None, 0.0)
    }

    /// Like [`around`](Self::around), with weight `kappa` of the residual
    /// pointing at `toward` (taken orthogonal to `center`).
    fn around_toward(
        &mut self,
        center: &[f64],
        t: f64,
        toward: Option<&[f64]>,
        kappa: f64,
    ) -> Vec<f64> {
        if t >= 1.0 {
            return center.to_vec();
        }
        let p = loop {
            let mut p = self.gaussian();
            remove_component(&mut p, center);
            if let Some(u) = normalized(&p) {
                break u;
            }
        };
        let p = match toward.filter(|_| kappa > 0.0) {
            Some(dir) => {
                let mut e = dir.to_vec();
                remove_component(&mut e, center);
                match normalized(&e) {
                    Some(e) => {
                        let w = (1.0 - kappa * kappa).sqrt();
                        let mix: Vec<f64> =
                            e.iter().zip(&p).map(|(a, b)| kappa * a + w * b).collect();
                        normalized(&mix).unwrap_or(p)
                    }
                    None => p,
                }
            }
            None => p,
        };
        let s = (1.0 - t * t).sqrt();
        center.iter().zip(&p).map(|(c, q)| t * c + s * q).collect()
    }
}

fn dotf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn remove_component(v: &mut [f64], unit: &[f64]) {
    let proj = dotf(v, unit);
    v.iter_mut().zip(unit).for_each(|(x, c)| *x -= proj * c);
}

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = dotf(v, v).sqrt();
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn sample_centers(g: &mut Gen, spec: &SyntheticSpec) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(spec.n_indicators);
    let mut attempts = 0usize;
    while centers.len() < spec.n_indicators {
        if attempts >= spec.center_retry_budget {
            return Err(Error::InfeasibleSpec(format!(
                "placed {} of {} centers with pairwise cosine <= {} in {} dims after {} attempts",
                centers.len(),
                spec.n_indicators,
                spec.inter_cluster_cos_max,
                spec.dim,
                attempts
            )));
        }
        attempts += 1;
        let c = g.unit();
        if centers
            .iter()
            .all(|o| dotf(o, &c) <= spec.inter_cluster_cos_max)
        {
            centers.push(c);
        }
    }
    Ok(centers)
}

/// Gaussian direction with the component along any too-close center removed
/// (Gram-Schmidt) until the cosine to every center is at most `max_cos`.
fn invalid_vector(
    g: &mut Gen,
    centers: &[Vec<f64>],
    max_cos: f64,
    budget: usize,
) -> Result<Vec<f64>> {
    for _ in 0..budget.max(1) {
        let mut v = g.unit();
        for _ in 0..4 * centers.len() + 4 {
            let worst = centers
                .iter()
                .map(|c| (dotf(&v, c), c))
                .max_by(|a, b| a.0.total_cmp(&b.0));
            match worst {
                Some((cos, c)) if cos > max_cos - COS_TOLERANCE => {
                    v.iter_mut().zip(c).for_each(|(x, y)| *x -= cos * y);
                    match normalized(&v) {
                        Some(u) => v = u,
                        None => break,
                    }
                }
                _ => return Ok(v),
            }
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "no direction within cosine {max_cos} of all {} centers in {} dims",
        centers.len(),
        g.dim
    )))
}

fn mixture(g: &mut Gen, centers: &[Vec<f64>]) -> Vec<f64> {
    let i = g.rng.random_range(0..centers.len());
    let mut j = g.rng.random_range(0..centers.len() - 1);
    if j >= i {
        j += 1;
    }
    let w = g.uniform(0.35, 0.65);
    let v: Vec<f64> = centers[i]
        .iter()
        .zip(&centers[j])
        .map(|(a, b)| w * a + (1.0 - w) * b)
        .collect();
    normalized(&v).unwrap_or_else(|| centers[i].clone())
}

fn indicator_text(i: usize) -> String {
    const COLORS: [&str; 8] = [
        "red", "blue", "green", "black", "white", "yellow", "grey", "striped",
    ];
    const THINGS: [&str; 12] = [
        "mug",
        "water bottle",
        "pill case",
        "wallet",
        "glasses case",
        "notebook",
        "phone",
        "keys",
        "scarf",
        "headphones",
        "remote",
        "tumbler",
    ];
    let base = format!(
        "my {} {}",
        COLORS[i % COLORS.len()],
        THINGS[(i / COLORS.len()) % THINGS.len()]
    );
    let round = i / (COLORS.len() * THINGS.len());
    if round == 0 {
        base
    } else {
        format!("{base} {}", round + 1)
    }
}

fn random_box(g: &mut Gen) -> BoundingBox {
    let w = g.uniform(40.0, 200.0);
    let h = g.uniform(40.0, 200.0);
    let x1 = g.uniform(0.0, IMAGE_W - w);
    let y1 = g.uniform(0.0, IMAGE_H - h);
    BoundingBox::new(x1, y1, x1 + w, y1 + h).expect("inside the image")
}

fn cell_box(g: &mut Gen, cell: usize) -> BoundingBox {
    let cx = (cell % GRID_COLS) as f64 * CELL + CELL / 2.0 + g.uniform(-10.0, 10.0);
    let cy = (cell / GRID_COLS) as f64 * CELL + CELL / 2.0 + g.uniform(-10.0, 10.0);
    let (w, h) = (g.uniform(60.0, 100.0), g.uniform(60.0, 100.0));
    BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
        .expect("inside the cell")
}

/// Same center, area scaled by `1 / iou`, so it contains `b` with exactly that IoU.
fn loose_box(b: &BoundingBox, iou: f64) -> BoundingBox {
    let s = 1.0 / iou.sqrt();
    let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
    let (hw, hh) = (b.width() * s / 2.0, b.height() * s / 2.0);
    BoundingBox::new(cx - hw, cy - hh, cx + hw, cy + hh).expect("cells leave room for loose boxes")
}

struct Builder {
    manifest: DatasetManifest,
    blob: EmbeddingBlob,
}

impl Builder {
    fn push(&mut self, v: &[f64]) -> Result<usize> {
        self.blob.push(&to_f32(v))
    }
}

/// Builds one clean node of cluster `u`.
fn member(g: &mut Gen, centers: &[Vec<f64>], spec: &SyntheticSpec, u: usize) -> Vec<f64> {
    let lo = (spec.intra_cluster_cos_min + 1e-3).min(1.0);
    let t = g.uniform(lo, 1.0);
    g.around(&centers[u], t)
}

/// Clusters ordered by decreasing center cosine to `u`.
fn nearest_clusters(centers: &[Vec<f64>], u: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..centers.len()).filter(|&j| j != u).collect();
    others.sort_by(|&a, &b| {
        dotf(&centers[b], &centers[u])
            .total_cmp(&dotf(&centers[a], &centers[u]))
            .then(a.cmp(&b))
    });
    others
}

fn other_cluster(g: &mut Gen, n: usize, u: usize) -> usize {
    let j = g.rng.random_range(0..n - 1);
    if j >= u {
        j + 1
    } else {
        j
    }
}

type PoolItem = (Vec<f64>, Option<usize>, NoiseClass);

pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(spec.rng_seed),
        dim: spec.dim,
    };
    let centers = sample_centers(&mut g, spec)?;
    let mut b = Builder {
        manifest: DatasetManifest::new(spec.dim, BLOB_REF),
        blob: EmbeddingBlob::new(spec.dim),
    };
    let ids: Vec<IndicatorId> = (0..spec.n_indicators)
        .map(|i| IndicatorId::new(format!("u{:03}", i + 1)))
        .collect();

    for (u, id) in ids.iter().enumerate() {
        let scene_id = format!("interaction-{id}");
        let mut boxes = Vec::new();
        let s = g.uniform(spec.seed_cos_range[0], spec.seed_cos_range[1]);
        let confuser = nearest_clusters(&centers, u)
            .first()
            .map(|&j| centers[j].clone());
        let seed = g.around_toward(&centers[u], s, confuser.as_deref(), spec.seed_confusion);
        let seed_id = format!("{id}-seed");
        boxes.push(SceneBox::new(
            seed_id.clone(),
            random_box(&mut g),
            b.push(&seed)?,
        ));
        let mut view_ids = Vec::new();
        for a in 0..spec.views_per_object {
            let t = g.uniform(spec.view_cos_range[0], spec.view_cos_range[1]);
            let v = g.around(&centers[u], t);
            let vid = format!("{id}-view{a}");
            boxes.push(SceneBox::new(vid.clone(), random_box(&mut g), b.push(&v)?));
            view_ids.push(vid);
        }
        b.manifest.interaction_scenes.push(Scene {
            image_ref: format!("{scene_id}.jpg"),
            scene_id,
            boxes,
        });
        b.manifest.personal_objects.push(PersonalObject {
            indicator: Indicator::new(id.as_str(), indicator_text(u))?,
            seed_node_id: seed_id,
            view_node_ids: view_ids,
        });
    }

    // Reminiscence: (embedding, gt label, noise class), shuffled across scenes.
    let mut pool: Vec<PoolItem> = Vec::new();
    for u in 0..spec.n_indicators {
        for _ in 0..spec.nodes_per_indicator {
            pool.push((
                member(&mut g, &centers, spec, u),
                Some(u),
                NoiseClass::Clean,
            ));
        }
    }
    for _ in 0..spec.n_ambiguous {
        pool.push((mixture(&mut g, &centers), None, NoiseClass::Ambiguous));
    }
    for _ in 0..spec.n_invalid {
        pool.push((
            invalid_vector(&mut g, &centers, spec.invalid_cos_max, INVALID_RETRIES)?,
            None,
            NoiseClass::Invalid,
        ));
    }
    pool.shuffle(&mut g.rng);
    let mut scenes: Vec<Vec<PoolItem>> = vec![Vec::new(); spec.n_scenes];
    for (i, item) in pool.into_iter().enumerate() {
        scenes[i % spec.n_scenes.max(1)].push(item);
    }
    let mut next_node = 0usize;
    for (si, nodes) in scenes.into_iter().enumerate() {
        let scene_id = format!("scene-{:04}", si + 1);
        let mut boxes = Vec::with_capacity(nodes.len());
        for (v, gt, class) in nodes {
            next_node += 1;
            let offset = b.push(&v)?;
            boxes.push(SceneBox::annotated(
                format!("r{next_node:05}"),
                random_box(&mut g),
                offset,
                gt.map(|u| ids[u].clone()),
                class,
            ));
        }
        b.manifest.scenes.push(Scene {
            image_ref: format!("{scene_id}.jpg"),
            scene_id,
            boxes,
        });
    }

    let mut next_test = 0usize;
    for (split, tag) in [
        (SPLIT_HETEROGENEOUS, "het"),
        (SPLIT_HOMOGENEOUS, "hom"),
        (SPLIT_CLUTTERED, "clu"),
    ] {
        let mut queries = Vec::new();
        for rep in 0..spec.test_scenes_per_indicator {
            for (u, id) in ids.iter().enumerate() {
                let scene_id = format!("test-{tag}-{:04}", rep * spec.n_indicators + u + 1);
                let mut cands: Vec<Vec<f64>> = vec![member(&mut g, &centers, spec, u)];
                let n_other = spec.n_indicators - 1;
                match split {
                    SPLIT_HOMOGENEOUS => {
                        let near = nearest_clusters(&centers, u);
                        for &c in near.iter().take(spec.distractors_per_scene.min(n_other)) {
                            cands.push(member(&mut g, &centers, spec, c));
                        }
                    }
                    SPLIT_CLUTTERED => {
                        let n = spec.clutter_candidates();
                        for k in 0..n {
                            let embedding = if k % 2 == 1 || n_other == 0 {
                                invalid_vector(
                                    &mut g,
                                    &centers,
                                    spec.invalid_cos_max,
                                    INVALID_RETRIES,
                                )?
                            } else {
                                let j = other_cluster(&mut g, spec.n_indicators, u);
                                member(&mut g, &centers, spec, j)
                            };
                            cands.push(embedding);
                        }
                    }
                    _ => {
                        if n_other > 0 {
                            for _ in 0..spec.distractors_per_scene {
                                let j = other_cluster(&mut g, spec.n_indicators, u);
                                cands.push(member(&mut g, &centers, spec, j));
                            }
                        }
                    }
                }
                let mut cells: Vec<usize> = (0..GRID_COLS * GRID_ROWS).collect();
                cells.shuffle(&mut g.rng);
                let mut boxes = Vec::new();
                let mut gt_box = None;
                for (k, c) in cands.iter().enumerate() {
                    next_test += 1;
                    let bx = cell_box(&mut g, cells[k]);
                    if k == 0 {
                        gt_box = Some(bx);
                    }
                    boxes.push(SceneBox::new(format!("t{next_test:05}"), bx, b.push(c)?));
                }
                let gt_box = gt_box.expect("target present");
                if spec.loose_candidates {
                    let iou = g.uniform(0.55, 0.74);
                    let w = g.uniform(0.5, 0.7);
                    let other = if cands.len() > 1 {
                        &cands[g.rng.random_range(1..cands.len())]
                    } else {
                        &cands[0]
                    };
                    let mix: Vec<f64> = cands[0]
                        .iter()
                        .zip(other)
                        .map(|(a, o)| w * a + (1.0 - w) * o)
                        .collect();
                    let mix = normalized(&mix).unwrap_or_else(|| cands[0].clone());
                    next_test += 1;
                    boxes.push(SceneBox::new(
                        format!("t{next_test:05}"),
                        loose_box(&gt_box, iou),
                        b.push(&mix)?,
                    ));
                }
                boxes.sort_by(|a, c| a.node_id.cmp(&c.node_id));
                b.manifest.test.scenes.push(Scene {
                    image_ref: format!("{scene_id}.jpg"),
                    scene_id: scene_id.clone(),
                    boxes,
                });
                queries.push(TestQuery {
                    scene_id,
                    indicator: id.clone(),
                    gt_box,
                });
            }
        }
        b.manifest.test.splits.push(TestSplit {
            name: split.to_owned(),
            queries,
        });
    }

    let dataset = Dataset::new(b.manifest, b.blob)?;
    check_guarantees(&dataset, spec, &centers)?;
    Ok(dataset)
}

/// Re-measures the stored (f32) embeddings against the bounds in `spec`.
fn check_guarantees(dataset: &Dataset, spec: &SyntheticSpec, centers: &[Vec<f64>]) -> Result<()> {
    for (i, a) in centers.iter().enumerate() {
        for c in &centers[i + 1..] {
            if dotf(a, c) > spec.inter_cluster_cos_max {
                return Err(Error::InfeasibleSpec("center separation violated".into()));
            }
        }
    }
    let centers32: Vec<Vec<f32>> = centers.iter().map(|c| to_f32(c)).collect();
    let view = dataset.manifest.evaluation_view();
    let index_of = |id: &IndicatorId| id.as_str()[1..].parse::<usize>().ok().map(|n| n - 1);
    for scene in &dataset.manifest.scenes {
        for bx in &scene.boxes {
            let e = dataset.embedding(bx)?;
            match view.noise_class(&bx.node_id) {
                Some(NoiseClass::Clean) => {
                    let u = view
                        .gt_label(&bx.node_id)
                        .and_then(index_of)
                        .ok_or_else(|| {
                            Error::InfeasibleSpec(format!("clean node {} has no label", bx.node_id))
                        })?;
                    let cos = cosine_similarity(&e, &centers32[u])?;
                    if cos < spec.intra_cluster_cos_min - COS_TOLERANCE {
                        return Err(Error::InfeasibleSpec(format!(
                            "node {} at cosine {cos} from its center",
                            bx.node_id
                        )));
                    }
                }
                Some(NoiseClass::Invalid) => {
                    for c in &centers32 {
                        let cos = cosine_similarity(&e, c)?;
                        if cos > spec.invalid_cos_max + COS_TOLERANCE {
                            return Err(Error::InfeasibleSpec(format!(
                                "invalid node {} at cosine {cos} to a center",
                                bx.node_id
                            )));
                        }
                    }
                }
                _ => {}
            }
        }
    }
    Ok(())
}
