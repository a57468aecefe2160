//! End-to-end runs: ingest, acquire, propagate, ground, evaluate.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::acquisition::{
    add_views, apply_ground_truth, ingest_seeds_in, Method, ViewSimulationParams,
};
use crate::error::Result;
use crate::grounding::{evaluate_split, EvalReport, PrototypeGrounder, TestScenes};
use crate::manifest::Dataset;
use crate::propagation::{propagate, PropagationConfig, PropagationResult};
use crate::store::NodeStore;

/// Everything needed to rebuild a method's labeled store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub propagation: PropagationConfig,
    pub views: ViewSimulationParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Pga,
            propagation: PropagationConfig::default(),
            views: ViewSimulationParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub method: Method,
    pub propagation: PropagationResult,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledScore {
    pub n_queries: usize,
    pub iou_at_50: f64,
    pub iou_at_80: f64,
}

/// Hit rates over the queries of every split whose 0.5 column is not advisory.
pub fn pooled_score(reports: &[EvalReport]) -> PooledScore {
    let queries: Vec<_> = reports
        .iter()
        .filter(|r| !r.iou50_advisory)
        .flat_map(|r| &r.per_query)
        .collect();
    let n = queries.len();
    let rate = |hits: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * hits as f64 / n as f64
        }
    };
    PooledScore {
        n_queries: n,
        iou_at_50: rate(queries.iter().filter(|q| q.hit50).count()),
        iou_at_80: rate(queries.iter().filter(|q| q.hit80).count()),
    }
}

impl MethodOutcome {
    pub fn pooled(&self) -> PooledScore {
        pooled_score(&self.reports)
    }

    pub fn store(&self) -> &NodeStore {
        &self.propagation.final_store
    }
}

/// Builds the labeled store `config.method` calls for. `scenes` restricts
/// the reminiscence to a subset of scene ids.
pub fn build_labeled_store(
    dataset: &Dataset,
    config: &RunConfig,
    scenes: Option<&HashSet<String>>,
) -> Result<PropagationResult> {
    let mc = config.method.config();
    let mut store = ingest_seeds_in(dataset, scenes)?;
    if mc.use_views {
        let n = add_views(&mut store, dataset, &config.views)?;
        log::debug!("added {n} view nodes");
    }
    if mc.use_gt_reminiscence_labels {
        let n = apply_ground_truth(&mut store, dataset)?;
        log::debug!("applied {n} ground-truth labels");
    }
    if mc.use_propagation {
        propagate(&store, &config.propagation)
    } else {
        Ok(PropagationResult::unpropagated(store))
    }
}

pub fn evaluate_all(
    dataset: &Dataset,
    scenes: &TestScenes,
    labeled: &NodeStore,
) -> Vec<EvalReport> {
    dataset
        .manifest
        .test
        .splits
        .iter()
        .map(|s| evaluate_split(s, scenes, &PrototypeGrounder, labeled))
        .collect()
}

pub fn run_method(
    dataset: &Dataset,
    test_scenes: &TestScenes,
    config: &RunConfig,
    scenes: Option<&HashSet<String>>,
) -> Result<MethodOutcome> {
    let propagation = build_labeled_store(dataset, config, scenes)?;
    let reports = evaluate_all(dataset, test_scenes, &propagation.final_store);
    Ok(MethodOutcome {
        method: config.method,
        propagation,
        reports,
    })
}
