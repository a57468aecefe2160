//! Reference propagation: recomputes every cosine from raw embeddings on
//! every visit, single-threaded, with no caches or indexes.

use std::collections::BTreeMap;

use rand::Rng;

use crate::embedding::{cosine_similarity, EmbeddingVector};
use crate::error::{Error, Result};
use crate::propagation::{
    DecisionAction, NodeDecision, NodeOrder, PassReport, PropagationConfig, PropagationResult,
    RatioBase, UpdateMode,
};
use crate::store::{LabelUpdate, NodeStore};
use crate::types::{BoundingBox, Indicator, IndicatorId, LabelKind, ObjectNode, Origin};

/// Recommended ceiling on similarity evaluations per pass.
pub const ORACLE_PASS_BUDGET: usize = 5_000;

fn labeled_set(store: &NodeStore) -> Vec<(usize, IndicatorId)> {
    store
        .known()
        .iter()
        .map(|&k| (k, store.label(k).cloned().expect("labeled")))
        .collect()
}

/// Indicator scores sorted best first, ties by indicator id.
fn ranked_scores(
    store: &NodeStore,
    row: usize,
    labeled: &[(usize, IndicatorId)],
) -> Result<Vec<(IndicatorId, f64)>> {
    let mut sums: BTreeMap<&IndicatorId, (f64, usize)> = BTreeMap::new();
    for (k, label) in labeled {
        if *k == row {
            continue;
        }
        let c = cosine_similarity(store.embedding(row), store.embedding(*k))?;
        let e = sums.entry(label).or_insert((0.0, 0));
        e.0 += c;
        e.1 += 1;
    }
    let mut scores: Vec<(IndicatorId, f64)> = sums
        .into_iter()
        .map(|(id, (sum, n))| (id.clone(), sum / n as f64))
        .collect();
    scores.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(scores)
}

fn decide(
    store: &mut NodeStore,
    row: usize,
    scores: &[(IndicatorId, f64)],
    threshold: f64,
) -> Result<NodeDecision> {
    let (best, max_score) = scores.first().cloned().ok_or(Error::EmptyLabeledSet)?;
    let previous = store.label(row).cloned();
    let action = if max_score > threshold {
        match store.set_label(row, &best, LabelKind::Pseudo)? {
            LabelUpdate::Unchanged => DecisionAction::Kept,
            LabelUpdate::Assigned => DecisionAction::Assigned,
            LabelUpdate::Relabeled { .. } => DecisionAction::Relabeled,
        }
    } else {
        DecisionAction::BelowThreshold
    };
    Ok(NodeDecision {
        node_id: store.record(row).node_id.clone(),
        chosen_indicator: if action == DecisionAction::BelowThreshold {
            None
        } else {
            Some(best.clone())
        },
        best_indicator: best,
        max_score,
        runner_up_score: scores.get(1).map(|s| s.1),
        previous_label: previous,
        action,
    })
}

fn visit(store: &NodeStore, order: NodeOrder) -> Vec<usize> {
    let mut rows: Vec<usize> = store.reminiscence().to_vec();
    if order == NodeOrder::NodeIdLexicographic {
        rows.sort_by_key(|&r| store.record(r).node_id.clone());
    }
    rows
}

fn changed_ratio(store: &NodeStore, changed: usize, base: RatioBase) -> f64 {
    let mut denom = 0usize;
    for &r in store.reminiscence() {
        if base == RatioBase::Reminiscence || store.label(r).is_some() {
            denom += 1;
        }
    }
    if denom == 0 {
        0.0
    } else {
        changed as f64 / denom as f64
    }
}

pub fn brute_force_propagate(
    store: &NodeStore,
    config: &PropagationConfig,
) -> Result<PropagationResult> {
    config.validate()?;
    if store.indicator_count() == 0 {
        return Err(Error::NoIndicators);
    }
    if store.known().is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    let mut store = store.clone();
    let mut passes: Vec<PassReport> = Vec::new();
    let mut converged = false;
    while passes.len() < config.max_iterations {
        let order = visit(&store, config.node_order);
        let mut decisions = Vec::with_capacity(order.len());
        match config.update_mode {
            UpdateMode::Sequential => {
                for row in order {
                    let scores = ranked_scores(&store, row, &labeled_set(&store))?;
                    decisions.push(decide(&mut store, row, &scores, config.threshold)?);
                }
            }
            UpdateMode::Batch => {
                let snapshot = labeled_set(&store);
                let mut all = Vec::with_capacity(order.len());
                for &row in &order {
                    all.push(ranked_scores(&store, row, &snapshot)?);
                }
                for (row, scores) in order.into_iter().zip(all) {
                    decisions.push(decide(&mut store, row, &scores, config.threshold)?);
                }
            }
        }
        let mut assigned = 0;
        let mut relabeled = 0;
        for d in &decisions {
            match d.action {
                DecisionAction::Assigned => assigned += 1,
                DecisionAction::Relabeled => relabeled += 1,
                _ => {}
            }
        }
        let ratio = changed_ratio(&store, assigned + relabeled, config.ratio_base);
        passes.push(PassReport {
            pass_index: passes.len(),
            labels_assigned: assigned,
            labels_relabeled: relabeled,
            labels_changed: assigned + relabeled,
            changed_ratio: ratio,
            labeled_count: store.labeled_count(),
            per_node_decisions: decisions,
        });
        if ratio < config.convergence_ratio {
            converged = true;
            break;
        }
    }
    Ok(PropagationResult {
        final_store: store,
        iterations_used: passes.len(),
        passes,
        converged,
    })
}

/// A small random propagation problem: loosely clustered embeddings,
/// between `k` and `k + 3` seeds and a random configuration.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_nodes: usize,
    max_indicators: usize,
) -> Result<(NodeStore, PropagationConfig)> {
    let k = rng.random_range(1..=max_indicators.max(1));
    let dim = rng.random_range(2..=8);
    let n = rng.random_range(k..=max_nodes.max(k + 1));
    let n_seeds = rng.random_range(k..=(k + 3).min(n));
    let spread: f32 = rng.random_range(0.05..1.5);
    let centers: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();
    let bbox = BoundingBox::new(0.0, 0.0, 1.0, 1.0)?;
    let mut store = NodeStore::new(dim);
    for i in 0..k {
        store.register_indicator(Indicator::new(format!("u{i}"), format!("my thing {i}"))?)?;
    }
    for i in 0..n {
        let c = rng.random_range(0..k);
        let mut v: Vec<f32> = centers[c]
            .iter()
            .map(|x| x + spread * rng.random_range(-1.0f32..1.0))
            .collect();
        if v.iter().all(|x| *x == 0.0) {
            v[0] = 1.0;
        }
        let e = EmbeddingVector::new(v)?;
        let node = if i < n_seeds {
            // The first k seeds cover every indicator once.
            let label = if i < k { i } else { c };
            ObjectNode::seed(
                format!("s{i:02}"),
                e,
                "i",
                bbox,
                Origin::SeedHuman,
                IndicatorId::new(format!("u{label}")),
            )
        } else {
            ObjectNode::reminiscence(
                format!("r{:02}", rng.random_range(0..1000)) + &format!("-{i}"),
                e,
                "r",
                bbox,
            )
        };
        store.insert(node)?;
    }
    let config = PropagationConfig {
        threshold: rng.random_range(-0.5..0.99),
        max_iterations: rng.random_range(1..=20),
        update_mode: if rng.random_bool(0.5) {
            UpdateMode::Sequential
        } else {
            UpdateMode::Batch
        },
        node_order: if rng.random_bool(0.5) {
            NodeOrder::ManifestOrder
        } else {
            NodeOrder::NodeIdLexicographic
        },
        ratio_base: if rng.random_bool(0.8) {
            RatioBase::Reminiscence
        } else {
            RatioBase::Labeled
        },
        ..PropagationConfig::default()
    };
    Ok((store, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::EmbeddingVector;
    use crate::propagation::propagate;
    use crate::types::{BoundingBox, Indicator, ObjectNode, Origin};

    fn bbox() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 1.0, 1.0).unwrap()
    }

    fn emb(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn one_seed_one_node(r: &[f32]) -> NodeStore {
        let mut s = NodeStore::new(2);
        s.register_indicator(Indicator::new("u1", "my mug").unwrap())
            .unwrap();
        s.insert(ObjectNode::seed(
            "s",
            emb(&[1.0, 0.0]),
            "i",
            bbox(),
            Origin::SeedHuman,
            "u1".into(),
        ))
        .unwrap();
        s.insert(ObjectNode::reminiscence("r", emb(r), "sc", bbox()))
            .unwrap();
        s
    }

    #[test]
    fn single_pair_matches_hand_computation() {
        // cos((1,0), (3,4)) = 3/5.
        let store = one_seed_one_node(&[3.0, 4.0]);
        let cfg = PropagationConfig::default().with_threshold(0.5);
        let r = brute_force_propagate(&store, &cfg).unwrap();
        let d = &r.passes[0].per_node_decisions[0];
        assert_eq!(d.max_score, 0.6);
        assert_eq!(d.action, DecisionAction::Assigned);
        assert_eq!(d.runner_up_score, None);
        assert_eq!(r, propagate(&store, &cfg).unwrap());

        let cfg = PropagationConfig::default().with_threshold(0.6);
        let r = brute_force_propagate(&store, &cfg).unwrap();
        assert_eq!(
            r.passes[0].per_node_decisions[0].action,
            DecisionAction::BelowThreshold
        );
        assert_eq!(r.passes[0].labels_changed, 0);
    }

    #[test]
    fn empty_reminiscence_is_a_fixpoint() {
        let mut s = NodeStore::new(2);
        s.register_indicator(Indicator::new("u1", "my mug").unwrap())
            .unwrap();
        s.insert(ObjectNode::seed(
            "s",
            emb(&[1.0, 0.0]),
            "i",
            bbox(),
            Origin::SeedHuman,
            "u1".into(),
        ))
        .unwrap();
        let r = brute_force_propagate(&s, &PropagationConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations_used, 1);
        assert_eq!(r.passes[0].labels_changed, 0);
        assert_eq!(r.final_store, s);
    }

    #[test]
    fn same_errors_as_the_engine() {
        let mut s = NodeStore::new(2);
        let cfg = PropagationConfig::default();
        assert!(matches!(
            brute_force_propagate(&s, &cfg),
            Err(Error::NoIndicators)
        ));
        s.register_indicator(Indicator::new("u1", "my mug").unwrap())
            .unwrap();
        assert!(matches!(
            brute_force_propagate(&s, &cfg),
            Err(Error::EmptyLabeledSet)
        ));
        let bad = PropagationConfig {
            max_iterations: 0,
            ..cfg
        };
        assert!(matches!(
            brute_force_propagate(&s, &bad),
            Err(Error::InvalidConfig(_))
        ));
    }
}
