//! Propagation of personal indicators through the reminiscence.
//!
//! For a node `r` and an indicator `u`, the affinity is the mean cosine
//! between `r` and every labeled node tagged `u` (a node is never compared
//! with itself). A pass visits every reminiscence node and, when the best
//! affinity clears the threshold, tags the node with the best indicator.
//! Passes repeat until the fraction of nodes whose label changed drops below
//! the convergence ratio.
//!
//! Labeled nodes are kept in per-indicator groups ordered by their position
//! in the store's labeled set, so each affinity is summed in exactly the
//! order a straight loop over the labeled set would use. Results are
//! therefore bit-identical to the reference implementation and independent
//! of the worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Serialize, Serializer};

use crate::embedding::{cosine_from_parts, dot, sq_norm};
use crate::error::{Error, Result};
use crate::store::{LabelAssignment, LabelUpdate, NodeStore};
use crate::types::{IndicatorId, LabelKind, ObjectNode};

pub const DEFAULT_THRESHOLD: f64 = 0.75;
pub const DEFAULT_MAX_ITERATIONS: usize = 100;
pub const DEFAULT_CONVERGENCE_RATIO: f64 = 0.10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum UpdateMode {
    /// A node labeled mid-pass influences later nodes in the same pass.
    #[default]
    Sequential,
    /// All decisions use the labeled set as it was at the start of the pass.
    Batch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum NodeOrder {
    #[default]
    ManifestOrder,
    NodeIdLexicographic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    IndicatorLexicographic,
}

/// Denominator of the changed ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum RatioBase {
    /// All reminiscence nodes.
    #[default]
    Reminiscence,
    /// Reminiscence nodes holding a label at the end of the pass.
    Labeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub threshold: f64,
    pub max_iterations: usize,
    pub convergence_ratio: f64,
    pub update_mode: UpdateMode,
    pub node_order: NodeOrder,
    pub tie_break: TieBreak,
    pub ratio_base: RatioBase,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            convergence_ratio: DEFAULT_CONVERGENCE_RATIO,
            update_mode: UpdateMode::default(),
            node_order: NodeOrder::default(),
            tie_break: TieBreak::default(),
            ratio_base: RatioBase::default(),
        }
    }
}

impl PropagationConfig {
    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn with_update_mode(mut self, mode: UpdateMode) -> Self {
        self.update_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {} outside (-1, 1]",
                self.threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        if !(self.convergence_ratio > 0.0 && self.convergence_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "convergence_ratio {} outside (0, 1]",
                self.convergence_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionAction {
    /// Previously unlabeled node received a label.
    Assigned,
    /// Node switched to a different indicator.
    Relabeled,
    /// Best indicator cleared the threshold and matched the current label.
    Kept,
    /// Nothing cleared the threshold; any existing label stays.
    BelowThreshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDecision {
    pub node_id: String,
    pub chosen_indicator: Option<IndicatorId>,
    pub best_indicator: IndicatorId,
    pub max_score: f64,
    pub runner_up_score: Option<f64>,
    pub previous_label: Option<IndicatorId>,
    pub action: DecisionAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass_index: usize,
    /// Nodes labeled for the first time.
    pub labels_assigned: usize,
    pub labels_relabeled: usize,
    /// `labels_assigned + labels_relabeled`.
    pub labels_changed: usize,
    pub changed_ratio: f64,
    /// Size of the labeled set (seeds included) after the pass.
    pub labeled_count: usize,
    pub per_node_decisions: Vec<NodeDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub final_store: NodeStore,
    pub passes: Vec<PassReport>,
    pub converged: bool,
    pub iterations_used: usize,
}

impl PropagationResult {
    /// Result for a store that was not propagated at all.
    pub fn unpropagated(store: NodeStore) -> Self {
        Self {
            final_store: store,
            passes: Vec::new(),
            converged: true,
            iterations_used: 0,
        }
    }

    pub fn final_labels(&self) -> Vec<LabelAssignment> {
        self.final_store.label_assignments()
    }
}

impl Serialize for PropagationResult {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("PropagationResult", 5)?;
        s.serialize_field("converged", &self.converged)?;
        s.serialize_field("iterations_used", &self.iterations_used)?;
        s.serialize_field("labeled_count", &self.final_store.labeled_count())?;
        s.serialize_field("passes", &self.passes)?;
        s.serialize_field("final_labels", &self.final_labels())?;
        s.end()
    }
}

/// Labeled nodes grouped by indicator. Groups follow indicator id order and
/// members follow labeled-set order: `(slot in known, store row)`.
#[derive(Debug, Clone)]
struct LabelIndex {
    ids: Vec<IndicatorId>,
    members: Vec<Vec<(usize, usize)>>,
}

impl LabelIndex {
    fn build(store: &NodeStore) -> Self {
        let ids: Vec<IndicatorId> = store.indicators().map(|i| i.id.clone()).collect();
        let mut members = vec![Vec::new(); ids.len()];
        for (slot, &row) in store.known().iter().enumerate() {
            let label = store.label(row).expect("known nodes are labeled");
            let g = ids.binary_search(label).expect("labels are registered");
            members[g].push((slot, row));
        }
        Self { ids, members }
    }

    fn group(&self, id: &IndicatorId) -> usize {
        self.ids.binary_search(id).expect("labels are registered")
    }

    fn insert(&mut self, g: usize, slot: usize, row: usize) {
        let m = &mut self.members[g];
        let at = m.partition_point(|&(s, _)| s < slot);
        m.insert(at, (slot, row));
    }

    fn remove(&mut self, g: usize, slot: usize) {
        let m = &mut self.members[g];
        let at = m.partition_point(|&(s, _)| s < slot);
        debug_assert_eq!(m[at].0, slot);
        m.remove(at);
    }

    /// Mean cosine against one group, skipping `exclude`. `None` when the
    /// group has no other member.
    fn group_score(
        &self,
        store: &NodeStore,
        g: usize,
        query: &[f32],
        query_sq_norm: f64,
        exclude: Option<usize>,
    ) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for &(_, row) in &self.members[g] {
            if Some(row) == exclude {
                continue;
            }
            sum += cosine_from_parts(
                dot(query, store.embedding(row)),
                query_sq_norm,
                store.sq_norm(row),
            );
            n += 1;
        }
        (n > 0).then(|| sum / n as f64)
    }

    fn scores(
        &self,
        store: &NodeStore,
        query: &[f32],
        query_sq_norm: f64,
        exclude: Option<usize>,
        parallel: bool,
    ) -> Vec<Option<f64>> {
        let groups = 0..self.ids.len();
        if parallel {
            groups
                .into_par_iter()
                .map(|g| self.group_score(store, g, query, query_sq_norm, exclude))
                .collect()
        } else {
            groups
                .map(|g| self.group_score(store, g, query, query_sq_norm, exclude))
                .collect()
        }
    }
}

/// Best group, its score, and the runner-up score. Equal scores keep the
/// earlier (lexicographically smaller) indicator.
fn rank(scores: &[Option<f64>]) -> Option<(usize, f64, Option<f64>)> {
    let mut best: Option<(usize, f64)> = None;
    let mut runner_up: Option<f64> = None;
    for (g, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        match best {
            Some((_, b)) if s <= b => {
                if runner_up.is_none_or(|r| s > r) {
                    runner_up = Some(s);
                }
            }
            _ => {
                runner_up = best.map(|(_, b)| b);
                best = Some((g, s));
            }
        }
    }
    best.map(|(g, s)| (g, s, runner_up))
}

/// Per-indicator mean cosine between `query` and the labeled nodes of `labeled`.
///
/// If the query is itself a labeled member of the store (matched by node id)
/// it is left out of its own average. Indicators without labeled nodes are
/// absent from the map.
pub fn affinity_scores(
    query: &ObjectNode,
    labeled: &NodeStore,
) -> Result<BTreeMap<IndicatorId, f64>> {
    if labeled.known().is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    if query.embedding.dim() != labeled.dim() {
        return Err(Error::DimensionMismatch {
            expected: labeled.dim(),
            actual: query.embedding.dim(),
        });
    }
    let norm = sq_norm(&query.embedding);
    if norm == 0.0 {
        return Err(Error::ZeroNormEmbedding);
    }
    let exclude = labeled
        .index_of(&query.node_id)
        .filter(|&i| labeled.known_slot(i).is_some());
    let index = LabelIndex::build(labeled);
    let scores = index.scores(labeled, &query.embedding, norm, exclude, false);
    let map: BTreeMap<_, _> = index
        .ids
        .iter()
        .zip(scores)
        .filter_map(|(id, s)| s.map(|s| (id.clone(), s)))
        .collect();
    if map.is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    Ok(map)
}

/// Reminiscence nodes in the visiting order `order` asks for.
pub fn visit_order(store: &NodeStore, order: NodeOrder) -> Vec<usize> {
    let mut rows = store.reminiscence().to_vec();
    if order == NodeOrder::NodeIdLexicographic {
        rows.sort_by(|&a, &b| store.record(a).node_id.cmp(&store.record(b).node_id));
    }
    rows
}

/// Fraction of changed nodes under `base`.
pub fn changed_ratio(store: &NodeStore, changed: usize, base: RatioBase) -> f64 {
    let denom = match base {
        RatioBase::Reminiscence => store.reminiscence().len(),
        RatioBase::Labeled => store
            .reminiscence()
            .iter()
            .filter(|&&i| store.label(i).is_some())
            .count(),
    };
    if denom == 0 {
        0.0
    } else {
        changed as f64 / denom as f64
    }
}

pub(crate) fn check_preconditions(store: &NodeStore, config: &PropagationConfig) -> Result<()> {
    config.validate()?;
    if store.indicator_count() == 0 {
        return Err(Error::NoIndicators);
    }
    if store.known().is_empty() {
        return Err(Error::EmptyLabeledSet);
    }
    Ok(())
}

struct Pending {
    row: usize,
    best: usize,
    score: f64,
    runner_up: Option<f64>,
}

fn evaluate(
    store: &NodeStore,
    index: &LabelIndex,
    row: usize,
    parallel_groups: bool,
) -> Result<Pending> {
    let scores = index.scores(
        store,
        store.embedding(row),
        store.sq_norm(row),
        Some(row),
        parallel_groups,
    );
    let (best, score, runner_up) = rank(&scores).ok_or(Error::EmptyLabeledSet)?;
    Ok(Pending {
        row,
        best,
        score,
        runner_up,
    })
}

fn commit(
    store: &mut NodeStore,
    index: &mut LabelIndex,
    pending: Pending,
    threshold: f64,
) -> Result<NodeDecision> {
    let row = pending.row;
    let previous = store.label(row).cloned();
    let best_id = index.ids[pending.best].clone();
    let action = if pending.score > threshold {
        match store.set_label(row, &best_id, LabelKind::Pseudo)? {
            LabelUpdate::Unchanged => DecisionAction::Kept,
            LabelUpdate::Assigned => {
                let slot = store.known_slot(row).expect("just labeled");
                index.insert(pending.best, slot, row);
                DecisionAction::Assigned
            }
            LabelUpdate::Relabeled { previous } => {
                let slot = store.known_slot(row).expect("already labeled");
                index.remove(index.group(&previous), slot);
                index.insert(pending.best, slot, row);
                DecisionAction::Relabeled
            }
        }
    } else {
        DecisionAction::BelowThreshold
    };
    Ok(NodeDecision {
        node_id: store.record(row).node_id.clone(),
        chosen_indicator: (action != DecisionAction::BelowThreshold).then_some(best_id.clone()),
        best_indicator: best_id,
        max_score: pending.score,
        runner_up_score: pending.runner_up,
        previous_label: previous,
        action,
    })
}

fn run_pass(
    store: &mut NodeStore,
    index: &mut LabelIndex,
    config: &PropagationConfig,
    pass_index: usize,
) -> Result<PassReport> {
    let order = visit_order(store, config.node_order);
    let parallel = rayon::current_num_threads() > 1;
    let mut decisions = Vec::with_capacity(order.len());
    match config.update_mode {
        UpdateMode::Sequential => {
            for row in order {
                let pending = evaluate(store, index, row, parallel)?;
                decisions.push(commit(store, index, pending, config.threshold)?);
            }
        }
        UpdateMode::Batch => {
            let pending: Vec<Pending> = {
                let (store, index) = (&*store, &*index);
                if parallel {
                    order
                        .par_iter()
                        .map(|&row| evaluate(store, index, row, false))
                        .collect::<Result<_>>()?
                } else {
                    order
                        .iter()
                        .map(|&row| evaluate(store, index, row, false))
                        .collect::<Result<_>>()?
                }
            };
            for p in pending {
                decisions.push(commit(store, index, p, config.threshold)?);
            }
        }
    }
    let count = |a: DecisionAction| decisions.iter().filter(|d| d.action == a).count();
    let labels_assigned = count(DecisionAction::Assigned);
    let labels_relabeled = count(DecisionAction::Relabeled);
    let labels_changed = labels_assigned + labels_relabeled;
    Ok(PassReport {
        pass_index,
        labels_assigned,
        labels_relabeled,
        labels_changed,
        changed_ratio: changed_ratio(store, labels_changed, config.ratio_base),
        labeled_count: store.labeled_count(),
        per_node_decisions: decisions,
    })
}

/// Runs a single pass over the reminiscence and returns the updated store.
pub fn propagate_pass(
    store: &NodeStore,
    config: &PropagationConfig,
) -> Result<(NodeStore, PassReport)> {
    check_preconditions(store, config)?;
    let mut store = store.clone();
    let mut index = LabelIndex::build(&store);
    let report = run_pass(&mut store, &mut index, config, 0)?;
    Ok((store, report))
}

/// Repeats passes until the changed ratio falls below
/// `config.convergence_ratio` or `config.max_iterations` passes have run.
pub fn propagate(store: &NodeStore, config: &PropagationConfig) -> Result<PropagationResult> {
    check_preconditions(store, config)?;
    let mut store = store.clone();
    let mut index = LabelIndex::build(&store);
    let mut passes = Vec::new();
    let mut converged = false;
    while passes.len() < config.max_iterations {
        let report = run_pass(&mut store, &mut index, config, passes.len())?;
        log::debug!(
            "pass {}: {} assigned, {} relabeled, ratio {:.4}",
            report.pass_index,
            report.labels_assigned,
            report.labels_relabeled,
            report.changed_ratio
        );
        let done = report.changed_ratio < config.convergence_ratio;
        passes.push(report);
        if done {
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
