//! Nearest-prototype grounding and the IoU evaluation protocol.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_from_parts, dot, sq_norm};
use crate::error::{Error, Result};
use crate::manifest::{Dataset, TestSplit};
use crate::store::NodeStore;
use crate::types::{BoundingBox, IndicatorId, ObjectNode};

/// Hit threshold at the loose level. Hits are strict: `iou > 0.5`.
pub const IOU_LOOSE: f64 = 0.5;
/// Hit threshold at grasp precision.
pub const IOU_STRICT: f64 = 0.8;

/// Splits whose 0.5 column is reported but not meant to be read as a score.
pub const ADVISORY_IOU50_SPLITS: &[&str] = &["cluttered"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub scene_id: String,
    pub indicator: IndicatorId,
    pub chosen_box: BoundingBox,
    pub chosen_node_id: String,
    pub score: f64,
    /// `score` minus the second best score; `None` for a single candidate.
    pub runner_up_margin: Option<f64>,
}

/// Anything that can pick a box for an indicator in a scene.
pub trait Grounder: Sync {
    fn ground(
        &self,
        scene_nodes: &[ObjectNode],
        indicator: &IndicatorId,
        labeled: &NodeStore,
    ) -> Result<GroundingPrediction>;
}

/// Picks the candidate with the highest mean cosine to the indicator's
/// labeled nodes.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrototypeGrounder;

impl Grounder for PrototypeGrounder {
    fn ground(
        &self,
        scene_nodes: &[ObjectNode],
        indicator: &IndicatorId,
        labeled: &NodeStore,
    ) -> Result<GroundingPrediction> {
        ground(scene_nodes, indicator, labeled)
    }
}

/// Mean cosine between `query` and each labeled row in `members`.
fn mean_affinity(query: &[f32], members: &[usize], labeled: &NodeStore) -> Result<f64> {
    if query.len() != labeled.dim() {
        return Err(Error::DimensionMismatch {
            expected: labeled.dim(),
            actual: query.len(),
        });
    }
    let q = sq_norm(query);
    if q == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    let mut sum = 0.0;
    for &row in members {
        sum += cosine_from_parts(dot(query, labeled.embedding(row)), q, labeled.sq_norm(row));
    }
    Ok(sum / members.len() as f64)
}

pub fn ground(
    scene_nodes: &[ObjectNode],
    indicator: &IndicatorId,
    labeled: &NodeStore,
) -> Result<GroundingPrediction> {
    let first = scene_nodes.first().ok_or(Error::EmptyScene)?;
    let members = labeled.members_of(indicator);
    if members.is_empty() {
        return Err(Error::UnknownIndicator(indicator.to_string()));
    }
    let mut scored = scene_nodes
        .iter()
        .map(|n| Ok((mean_affinity(&n.embedding, &members, labeled)?, n)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|(sa, a), (sb, b)| sb.total_cmp(sa).then_with(|| a.node_id.cmp(&b.node_id)));
    let (score, best) = scored[0];
    Ok(GroundingPrediction {
        scene_id: first.scene_id.clone(),
        indicator: indicator.clone(),
        chosen_box: best.bbox,
        chosen_node_id: best.node_id.clone(),
        score,
        runner_up_margin: scored.get(1).map(|(s, _)| score - s),
    })
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub scene_id: String,
    pub indicator: IndicatorId,
    pub chosen_node_id: Option<String>,
    pub score: Option<f64>,
    pub iou: f64,
    pub hit50: bool,
    pub hit80: bool,
    /// Why the query produced no prediction.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split_name: String,
    pub n_queries: usize,
    pub iou_at_50: f64,
    pub iou_at_80: f64,
    /// Set when the 0.5 column of this split is advisory only.
    pub iou50_advisory: bool,
    pub per_query: Vec<QueryOutcome>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    split: &'a str,
    row: &'a str,
    scene_id: &'a str,
    indicator: &'a str,
    chosen_node_id: &'a str,
    iou: Option<f64>,
    hit50: Option<bool>,
    hit80: Option<bool>,
    error: &'a str,
    n_queries: Option<usize>,
    iou_at_50: Option<f64>,
    iou_at_80: Option<f64>,
}

impl EvalReport {
    pub fn from_outcomes(split_name: &str, per_query: Vec<QueryOutcome>) -> Self {
        let n = per_query.len();
        let rate = |hits: usize| {
            if n == 0 {
                0.0
            } else {
                100.0 * hits as f64 / n as f64
            }
        };
        let h50 = per_query.iter().filter(|q| q.hit50).count();
        let h80 = per_query.iter().filter(|q| q.hit80).count();
        Self {
            split_name: split_name.to_owned(),
            n_queries: n,
            iou_at_50: rate(h50),
            iou_at_80: rate(h80),
            iou50_advisory: ADVISORY_IOU50_SPLITS.contains(&split_name),
            per_query,
        }
    }

    /// One row per query followed by a summary row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for q in &self.per_query {
            w.serialize(CsvRow {
                split: &self.split_name,
                row: "query",
                scene_id: &q.scene_id,
                indicator: q.indicator.as_str(),
                chosen_node_id: q.chosen_node_id.as_deref().unwrap_or(""),
                iou: Some(q.iou),
                hit50: Some(q.hit50),
                hit80: Some(q.hit80),
                error: q.error.as_deref().unwrap_or(""),
                n_queries: None,
                iou_at_50: None,
                iou_at_80: None,
            })?;
        }
        w.serialize(CsvRow {
            split: &self.split_name,
            row: "summary",
            scene_id: "",
            indicator: "",
            chosen_node_id: "",
            iou: None,
            hit50: None,
            hit80: None,
            error: "",
            n_queries: Some(self.n_queries),
            iou_at_50: Some(self.iou_at_50),
            iou_at_80: Some(self.iou_at_80),
        })?;
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        crate::manifest::write_file(path, self.to_csv()?.as_bytes())
    }
}

/// Candidate nodes of every test scene, keyed by scene id.
pub type TestScenes = BTreeMap<String, Vec<ObjectNode>>;

pub fn load_test_scenes(dataset: &Dataset) -> Result<TestScenes> {
    dataset
        .manifest
        .test
        .scenes
        .iter()
        .map(|s| {
            let nodes = s
                .boxes
                .iter()
                .map(|b| {
                    Ok(ObjectNode::reminiscence(
                        b.node_id.clone(),
                        dataset.embedding(b)?,
                        s.scene_id.clone(),
                        b.bbox,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((s.scene_id.clone(), nodes))
        })
        .collect()
}

fn run_query(
    scene_id: &str,
    indicator: &IndicatorId,
    gt_box: &BoundingBox,
    scenes: &TestScenes,
    grounder: &dyn Grounder,
    labeled: &NodeStore,
) -> QueryOutcome {
    let prediction = gt_box.validate().and_then(|_| {
        let nodes = scenes
            .get(scene_id)
            .ok_or_else(|| Error::UnknownScene(scene_id.to_owned()))?;
        grounder.ground(nodes, indicator, labeled)
    });
    match prediction {
        Ok(p) => {
            let v = iou(&p.chosen_box, gt_box);
            QueryOutcome {
                scene_id: scene_id.to_owned(),
                indicator: indicator.clone(),
                chosen_node_id: Some(p.chosen_node_id),
                score: Some(p.score),
                iou: v,
                hit50: v > IOU_LOOSE,
                hit80: v > IOU_STRICT,
                error: None,
            }
        }
        Err(e) => QueryOutcome {
            scene_id: scene_id.to_owned(),
            indicator: indicator.clone(),
            chosen_node_id: None,
            score: None,
            iou: 0.0,
            hit50: false,
            hit80: false,
            error: Some(e.to_string()),
        },
    }
}

/// Grounds every query of `split`. Failed queries count as misses.
pub fn evaluate_split(
    split: &TestSplit,
    scenes: &TestScenes,
    grounder: &dyn Grounder,
    labeled: &NodeStore,
) -> EvalReport {
    let per_query = split
        .queries
        .par_iter()
        .map(|q| {
            run_query(
                &q.scene_id,
                &q.indicator,
                &q.gt_box,
                scenes,
                grounder,
                labeled,
            )
        })
        .collect();
    EvalReport::from_outcomes(&split.name, per_query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::manifest::TestQuery;
    use crate::types::{Indicator, Origin};

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn emb(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn cand(id: &str, v: &[f32], b: BoundingBox) -> ObjectNode {
        ObjectNode::reminiscence(id, emb(v), "t0", b)
    }

    fn store_with(seeds: &[(&str, &str, &[f32])]) -> NodeStore {
        let mut s = NodeStore::new(seeds[0].2.len());
        for (_, ind, _) in seeds {
            if !s.has_indicator(&IndicatorId::from(*ind)) {
                s.register_indicator(Indicator::new(*ind, "my thing").unwrap())
                    .unwrap();
            }
        }
        for (id, ind, v) in seeds {
            s.insert(ObjectNode::seed(
                *id,
                emb(v),
                "i0",
                bx(0.0, 0.0, 1.0, 1.0),
                Origin::SeedHuman,
                IndicatorId::from(*ind),
            ))
            .unwrap();
        }
        s
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &bx(10.0, 0.0, 20.0, 10.0)), 0.0);
        let v = iou(&a, &bx(5.0, 0.0, 15.0, 10.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn identical_candidate_scores_one() {
        let labeled = store_with(&[("s", "u1", &[0.3, 0.4, 0.1])]);
        let scene = vec![
            cand("a", &[1.0, 0.0, 0.0], bx(0.0, 0.0, 5.0, 5.0)),
            cand("b", &[0.3, 0.4, 0.1], bx(5.0, 5.0, 9.0, 9.0)),
        ];
        let p = ground(&scene, &IndicatorId::from("u1"), &labeled).unwrap();
        assert_eq!(p.chosen_node_id, "b");
        assert_eq!(p.score, 1.0);
        assert_eq!(p.chosen_box, bx(5.0, 5.0, 9.0, 9.0));
        assert_eq!(p.scene_id, "t0");
        assert!(p.runner_up_margin.unwrap() > 0.0);
    }

    #[test]
    fn picks_the_highest_mean_affinity() {
        // Candidates at cosine 0.3, 0.9 and 0.5 to the single labeled node.
        let labeled = store_with(&[("s", "u1", &[1.0, 0.0])]);
        let at = |c: f32| [c, (1.0 - c * c).sqrt()];
        let scene = vec![
            cand("c1", &at(0.3), bx(0.0, 0.0, 1.0, 1.0)),
            cand("c2", &at(0.9), bx(1.0, 0.0, 2.0, 1.0)),
            cand("c3", &at(0.5), bx(2.0, 0.0, 3.0, 1.0)),
        ];
        let p = ground(&scene, &IndicatorId::from("u1"), &labeled).unwrap();
        assert_eq!(p.chosen_node_id, "c2");
        assert!((p.score - 0.9).abs() < 1e-6);
        assert!((p.runner_up_margin.unwrap() - 0.4).abs() < 1e-6);
    }

    #[test]
    fn ties_go_to_the_smaller_node_id() {
        let labeled = store_with(&[("s", "u1", &[1.0, 0.0])]);
        let scene = vec![
            cand("zz", &[1.0, 1.0], bx(0.0, 0.0, 1.0, 1.0)),
            cand("aa", &[1.0, -1.0], bx(1.0, 0.0, 2.0, 1.0)),
        ];
        let p = ground(&scene, &IndicatorId::from("u1"), &labeled).unwrap();
        assert_eq!(p.chosen_node_id, "aa");
        assert_eq!(p.runner_up_margin, Some(0.0));
    }

    #[test]
    fn grounding_errors() {
        let labeled = store_with(&[("s", "u1", &[1.0, 0.0])]);
        assert!(matches!(
            ground(&[], &IndicatorId::from("u1"), &labeled),
            Err(Error::EmptyScene)
        ));
        let scene = vec![cand("a", &[1.0, 0.0], bx(0.0, 0.0, 1.0, 1.0))];
        assert!(matches!(
            ground(&scene, &IndicatorId::from("u9"), &labeled),
            Err(Error::UnknownIndicator(_))
        ));
        let zero = vec![cand("z", &[0.0, 0.0], bx(0.0, 0.0, 1.0, 1.0))];
        assert!(matches!(
            ground(&zero, &IndicatorId::from("u1"), &labeled),
            Err(Error::ZeroNormEmbedding)
        ));
    }

    #[test]
    fn grounding_ignores_uniform_scaling() {
        let labeled = store_with(&[
            ("s1", "u1", &[1.0, 0.2, 0.1]),
            ("s2", "u1", &[0.8, 0.3, 0.0]),
        ]);
        let scene = vec![
            cand("a", &[0.9, 0.25, 0.05], bx(0.0, 0.0, 1.0, 1.0)),
            cand("b", &[0.1, 1.0, 0.3], bx(1.0, 0.0, 2.0, 1.0)),
        ];
        let scaled_scene: Vec<_> = scene
            .iter()
            .map(|n| {
                let v: Vec<f32> = n.embedding.iter().map(|x| x * 7.3).collect();
                cand(&n.node_id, &v, n.bbox)
            })
            .collect();
        let id = IndicatorId::from("u1");
        let p = ground(&scene, &id, &labeled).unwrap();
        let q = ground(&scaled_scene, &id, &labeled.scaled(7.3).unwrap()).unwrap();
        assert_eq!(p.chosen_node_id, q.chosen_node_id);
        assert!((p.score - q.score).abs() < 1e-9);
    }

    struct FixedIou(BTreeMap<String, BoundingBox>);

    impl Grounder for FixedIou {
        fn ground(
            &self,
            nodes: &[ObjectNode],
            ind: &IndicatorId,
            _: &NodeStore,
        ) -> Result<GroundingPrediction> {
            let b = self.0[&nodes[0].scene_id];
            Ok(GroundingPrediction {
                scene_id: nodes[0].scene_id.clone(),
                indicator: ind.clone(),
                chosen_box: b,
                chosen_node_id: "x".into(),
                score: 1.0,
                runner_up_margin: None,
            })
        }
    }

    fn split_with_ious(ious: &[f64]) -> (TestSplit, TestScenes, FixedIou) {
        let gt = bx(0.0, 0.0, 100.0, 10.0);
        let mut scenes = TestScenes::new();
        let mut boxes = BTreeMap::new();
        let mut queries = Vec::new();
        for (i, &v) in ious.iter().enumerate() {
            let sid = format!("t{i}");
            // Same height, shifted right: iou = (100 - d) / (100 + d).
            let d = 100.0 * (1.0 - v) / (1.0 + v);
            boxes.insert(sid.clone(), bx(d, 0.0, 100.0 + d, 10.0));
            scenes.insert(
                sid.clone(),
                vec![ObjectNode::reminiscence("x", emb(&[1.0]), sid.clone(), gt)],
            );
            queries.push(TestQuery {
                scene_id: sid,
                indicator: IndicatorId::from("u1"),
                gt_box: gt,
            });
        }
        let split = TestSplit {
            name: "heterogeneous".into(),
            queries,
        };
        (split, scenes, FixedIou(boxes))
    }

    #[test]
    fn hand_built_ious_give_expected_rates() {
        let (split, scenes, g) = split_with_ious(&[1.0, 0.9, 0.6, 0.2]);
        let labeled = NodeStore::new(1);
        let r = evaluate_split(&split, &scenes, &g, &labeled);
        let got: Vec<f64> = r.per_query.iter().map(|q| q.iou).collect();
        for (a, b) in got.iter().zip([1.0, 0.9, 0.6, 0.2]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(r.n_queries, 4);
        assert_eq!(r.iou_at_50, 75.0);
        assert_eq!(r.iou_at_80, 50.0);
        assert!(!r.iou50_advisory);
    }

    #[test]
    fn perfect_grounder_scores_full_marks() {
        let (split, scenes, g) = split_with_ious(&[1.0, 1.0, 1.0]);
        let r = evaluate_split(&split, &scenes, &g, &NodeStore::new(1));
        assert_eq!((r.iou_at_50, r.iou_at_80), (100.0, 100.0));
    }

    #[test]
    fn failed_queries_are_misses_with_a_reason() {
        let labeled = store_with(&[("s", "u1", &[1.0, 0.0])]);
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        let mut scenes = TestScenes::new();
        scenes.insert("t0".into(), vec![cand("a", &[1.0, 0.0], gt)]);
        let q = |scene: &str, ind: &str| TestQuery {
            scene_id: scene.into(),
            indicator: IndicatorId::from(ind),
            gt_box: gt,
        };
        let split = TestSplit {
            name: "cluttered".into(),
            queries: vec![q("t0", "u1"), q("missing", "u1"), q("t0", "u7")],
        };
        let r = evaluate_split(&split, &scenes, &PrototypeGrounder, &labeled);
        assert_eq!(r.n_queries, 3);
        assert!(r.per_query[0].hit80 && r.per_query[0].error.is_none());
        assert!(r.per_query[1].error.as_deref().unwrap().contains("missing"));
        assert!(r.per_query[2].error.is_some() && !r.per_query[2].hit50);
        assert!((r.iou_at_50 - 100.0 / 3.0).abs() < 1e-9);
        assert!(r.iou50_advisory);
    }

    #[test]
    fn csv_has_a_row_per_query_and_a_summary() {
        let (split, scenes, g) = split_with_ious(&[1.0, 0.2]);
        let r = evaluate_split(&split, &scenes, &g, &NodeStore::new(1));
        let text = r.to_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("split,row,scene_id"));
        assert!(lines[3].starts_with("heterogeneous,summary,"));
        assert!(lines[3].ends_with(",2,50.0,50.0"));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["iou_at_50"], 50.0);
        assert_eq!(json["per_query"].as_array().unwrap().len(), 2);
    }

    proptest::proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..50.0, 0.1f64..50.0),
            b in (0.0f64..50.0, 0.0f64..50.0, 0.1f64..50.0, 0.1f64..50.0),
        ) {
            let a = bx(a.0, a.1, a.0 + a.2, a.1 + a.3);
            let b = bx(b.0, b.1, b.0 + b.2, b.1 + b.3);
            proptest::prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            proptest::prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
            proptest::prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn perfect_query_never_lowers_hit_counts(ious in proptest::collection::vec(0.0f64..1.0, 1..12)) {
            let (split, scenes, g) = split_with_ious(&ious);
            let before = evaluate_split(&split, &scenes, &g, &NodeStore::new(1));
            let mut more = ious.clone();
            more.push(1.0);
            let (split, scenes, g) = split_with_ious(&more);
            let after = evaluate_split(&split, &scenes, &g, &NodeStore::new(1));
            let count = |r: &EvalReport, f: fn(&QueryOutcome) -> bool| r.per_query.iter().filter(|q| f(q)).count();
            proptest::prop_assert!(count(&after, |q| q.hit50) >= count(&before, |q| q.hit50));
            proptest::prop_assert!(count(&after, |q| q.hit80) >= count(&before, |q| q.hit80));
            proptest::prop_assert!(after.iou_at_80 <= after.iou_at_50);
        }
    }
}
