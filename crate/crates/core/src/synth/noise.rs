//! How much of the noisy reminiscence a propagation run ended up labeling.

use serde::{Deserialize, Serialize};

use crate::manifest::DatasetManifest;
use crate::propagation::PropagationResult;
use crate::types::NoiseClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBreakdown {
    pub class: NoiseClass,
    /// Reminiscence nodes of this class in the store.
    pub total: usize,
    pub labeled: usize,
    pub labeled_rate: f64,
    /// Set when `total` is zero; the rate is then reported as 0.
    pub zero_denominator: bool,
    /// Labeled nodes whose label matches the annotation (clean nodes only).
    pub correct: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub ambiguous_labeled_rate: f64,
    pub invalid_labeled_rate: f64,
    /// Percentage of clean nodes labeled with their annotated indicator.
    pub clean_correct_rate: f64,
    pub per_class: Vec<ClassBreakdown>,
}

impl NoiseReport {
    pub fn class(&self, class: NoiseClass) -> &ClassBreakdown {
        self.per_class
            .iter()
            .find(|c| c.class == class)
            .expect("every class is reported")
    }
}

fn percent(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

pub fn propagation_noise_report(
    result: &PropagationResult,
    manifest: &DatasetManifest,
) -> NoiseReport {
    let store = &result.final_store;
    let view = manifest.evaluation_view();
    let classes = [
        NoiseClass::Clean,
        NoiseClass::Ambiguous,
        NoiseClass::Invalid,
    ];
    let mut total = [0usize; 3];
    let mut labeled = [0usize; 3];
    let mut correct = 0usize;
    for &idx in store.reminiscence() {
        let record = store.record(idx);
        let class = view.noise_class(&record.node_id).unwrap_or_default();
        let k = classes
            .iter()
            .position(|&c| c == class)
            .expect("known class");
        total[k] += 1;
        if let Some(label) = &record.label {
            labeled[k] += 1;
            if class == NoiseClass::Clean && view.gt_label(&record.node_id) == Some(label) {
                correct += 1;
            }
        }
    }
    let per_class: Vec<ClassBreakdown> = classes
        .iter()
        .enumerate()
        .map(|(k, &class)| ClassBreakdown {
            class,
            total: total[k],
            labeled: labeled[k],
            labeled_rate: percent(labeled[k], total[k]),
            zero_denominator: total[k] == 0,
            correct: (class == NoiseClass::Clean).then_some(correct),
        })
        .collect();
    NoiseReport {
        ambiguous_labeled_rate: per_class[1].labeled_rate,
        invalid_labeled_rate: per_class[2].labeled_rate,
        clean_correct_rate: percent(correct, total[0]),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::manifest::{Scene, SceneBox};
    use crate::store::NodeStore;
    use crate::types::{BoundingBox, Indicator, IndicatorId, LabelKind, ObjectNode, Origin};

    fn bbox() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    /// Two clean nodes of u1, four ambiguous and one invalid; `labeled` lists
    /// the reminiscence nodes to tag with u1.
    fn fixture(labeled: &[&str]) -> (PropagationResult, DatasetManifest) {
        let u1 = IndicatorId::from("u1");
        let nodes = [
            ("c1", NoiseClass::Clean),
            ("c2", NoiseClass::Clean),
            ("a1", NoiseClass::Ambiguous),
            ("a2", NoiseClass::Ambiguous),
            ("a3", NoiseClass::Ambiguous),
            ("a4", NoiseClass::Ambiguous),
            ("x1", NoiseClass::Invalid),
        ];
        let mut m = DatasetManifest::new(1, "e.bin");
        m.scenes.push(Scene {
            scene_id: "s".into(),
            image_ref: "s.jpg".into(),
            boxes: nodes
                .iter()
                .enumerate()
                .map(|(i, (id, c))| {
                    let gt = (*c == NoiseClass::Clean).then(|| u1.clone());
                    SceneBox::annotated(*id, bbox(), i, gt, *c)
                })
                .collect(),
        });
        let mut store = NodeStore::new(1);
        store
            .register_indicator(Indicator::new("u1", "my mug").unwrap())
            .unwrap();
        let e = || EmbeddingVector::new(vec![1.0]).unwrap();
        store
            .insert(ObjectNode::seed(
                "seed",
                e(),
                "i",
                bbox(),
                Origin::SeedHuman,
                u1.clone(),
            ))
            .unwrap();
        for (id, _) in nodes {
            store
                .insert(ObjectNode::reminiscence(id, e(), "s", bbox()))
                .unwrap();
        }
        for id in labeled {
            let idx = store.index_of(id).unwrap();
            store.set_label(idx, &u1, LabelKind::Pseudo).unwrap();
        }
        (PropagationResult::unpropagated(store), m)
    }

    #[test]
    fn nothing_noisy_labeled() {
        let (r, m) = fixture(&["c1"]);
        let n = propagation_noise_report(&r, &m);
        assert_eq!(n.ambiguous_labeled_rate, 0.0);
        assert_eq!(n.invalid_labeled_rate, 0.0);
        assert_eq!(n.clean_correct_rate, 50.0);
    }

    #[test]
    fn half_the_ambiguous_labeled() {
        let (r, m) = fixture(&["a1", "a3", "x1"]);
        let n = propagation_noise_report(&r, &m);
        assert_eq!(n.ambiguous_labeled_rate, 50.0);
        assert_eq!(n.invalid_labeled_rate, 100.0);
        let amb = n.class(NoiseClass::Ambiguous);
        assert_eq!(
            (amb.total, amb.labeled, amb.zero_denominator),
            (4, 2, false)
        );
        assert_eq!(n.class(NoiseClass::Clean).correct, Some(0));
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let (r, _) = fixture(&[]);
        let empty = DatasetManifest::new(1, "e.bin");
        let n = propagation_noise_report(&r, &empty);
        // Without annotations every node counts as clean.
        assert!(n.class(NoiseClass::Ambiguous).zero_denominator);
        assert!(n.class(NoiseClass::Invalid).zero_denominator);
        assert_eq!(n.ambiguous_labeled_rate, 0.0);
        assert_eq!(n.class(NoiseClass::Clean).total, 7);
    }
}
