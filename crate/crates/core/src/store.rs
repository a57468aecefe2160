//! The evolving labeled set and the unlabeled node pool.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingMatrix, EmbeddingVector};
use crate::error::{Error, Result};
use crate::types::{BoundingBox, Indicator, IndicatorId, LabelKind, ObjectNode, Origin};

/// Node metadata; the embedding lives in the store's matrix at the same index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub scene_id: String,
    pub bbox: BoundingBox,
    pub origin: Origin,
    pub label: Option<IndicatorId>,
    pub label_kind: LabelKind,
}

/// Outcome of [`NodeStore::set_label`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelUpdate {
    Unchanged,
    Assigned,
    Relabeled { previous: IndicatorId },
}

/// One row of a store's label dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub node_id: String,
    pub origin: Origin,
    pub label: Option<IndicatorId>,
    pub label_kind: LabelKind,
}

/// Labeled nodes (`known`, insertion ordered) plus the reminiscence pool.
///
/// A node joins `known` once, the first time it gets a label. Relabeling
/// keeps its position.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStore {
    records: Vec<NodeRecord>,
    rows: EmbeddingMatrix,
    by_id: HashMap<String, usize>,
    indicators: BTreeMap<IndicatorId, Indicator>,
    known: Vec<usize>,
    known_slot: Vec<Option<usize>>,
    reminiscence: Vec<usize>,
}

impl NodeStore {
    pub fn new(dim: usize) -> Self {
        Self {
            records: Vec::new(),
            rows: EmbeddingMatrix::new(dim),
            by_id: HashMap::new(),
            indicators: BTreeMap::new(),
            known: Vec::new(),
            known_slot: Vec::new(),
            reminiscence: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.rows.dim()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn register_indicator(&mut self, indicator: Indicator) -> Result<()> {
        indicator.validate()?;
        if self.indicators.contains_key(&indicator.id) {
            return Err(Error::DuplicateIndicator(indicator.id.to_string()));
        }
        self.indicators.insert(indicator.id.clone(), indicator);
        Ok(())
    }

    /// Registered indicators in lexicographic id order.
    pub fn indicators(&self) -> impl Iterator<Item = &Indicator> {
        self.indicators.values()
    }

    pub fn indicator_count(&self) -> usize {
        self.indicators.len()
    }

    pub fn has_indicator(&self, id: &IndicatorId) -> bool {
        self.indicators.contains_key(id)
    }

    pub fn insert(&mut self, node: ObjectNode) -> Result<usize> {
        node.validate()?;
        if self.by_id.contains_key(&node.node_id) {
            return Err(Error::DuplicateNode(node.node_id));
        }
        if let Some(label) = &node.label {
            if !self.indicators.contains_key(label) {
                return Err(Error::UnknownIndicator(label.to_string()));
            }
        }
        let idx = self.rows.push(&node.embedding)?;
        debug_assert_eq!(idx, self.records.len());
        self.by_id.insert(node.node_id.clone(), idx);
        let labeled = node.label.is_some();
        if node.origin == Origin::Reminiscence {
            self.reminiscence.push(idx);
        }
        self.records.push(NodeRecord {
            node_id: node.node_id,
            scene_id: node.scene_id,
            bbox: node.bbox,
            origin: node.origin,
            label: node.label,
            label_kind: node.label_kind,
        });
        self.known_slot.push(None);
        if labeled {
            self.push_known(idx);
        }
        Ok(idx)
    }

    fn push_known(&mut self, idx: usize) {
        self.known_slot[idx] = Some(self.known.len());
        self.known.push(idx);
    }

    /// Labels a reminiscence node. Unlabeled nodes are appended to the labeled
    /// set; labeled ones are relabeled in place.
    pub fn set_label(
        &mut self,
        idx: usize,
        indicator: &IndicatorId,
        kind: LabelKind,
    ) -> Result<LabelUpdate> {
        if !matches!(kind, LabelKind::Pseudo | LabelKind::Annotated) {
            return Err(Error::InvalidConfig(format!(
                "cannot assign a label of kind {kind:?}"
            )));
        }
        if !self.indicators.contains_key(indicator) {
            return Err(Error::UnknownIndicator(indicator.to_string()));
        }
        let record = &mut self.records[idx];
        if record.label_kind == LabelKind::Fixed || record.origin.is_seed() {
            return Err(Error::FixedLabel(record.node_id.clone()));
        }
        let update = match record.label.replace(indicator.clone()) {
            None => LabelUpdate::Assigned,
            Some(prev) if &prev == indicator => LabelUpdate::Unchanged,
            Some(prev) => LabelUpdate::Relabeled { previous: prev },
        };
        record.label_kind = kind;
        if update == LabelUpdate::Assigned {
            self.push_known(idx);
        }
        Ok(update)
    }

    pub fn record(&self, idx: usize) -> &NodeRecord {
        &self.records[idx]
    }

    pub fn records(&self) -> &[NodeRecord] {
        &self.records
    }

    pub fn embedding(&self, idx: usize) -> &[f32] {
        self.rows.row(idx)
    }

    pub fn norm(&self, idx: usize) -> f64 {
        self.rows.norm(idx)
    }

    pub fn sq_norm(&self, idx: usize) -> f64 {
        self.rows.sq_norm(idx)
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.rows
    }

    pub fn index_of(&self, node_id: &str) -> Option<usize> {
        self.by_id.get(node_id).copied()
    }

    pub fn label(&self, idx: usize) -> Option<&IndicatorId> {
        self.records[idx].label.as_ref()
    }

    /// Labeled nodes in the order they joined the labeled set.
    pub fn known(&self) -> &[usize] {
        &self.known
    }

    /// Position of a node within [`known`](Self::known).
    pub fn known_slot(&self, idx: usize) -> Option<usize> {
        self.known_slot[idx]
    }

    /// Reminiscence nodes in load order.
    pub fn reminiscence(&self) -> &[usize] {
        &self.reminiscence
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = usize> + '_ {
        self.reminiscence
            .iter()
            .copied()
            .filter(|&i| self.records[i].label.is_none())
    }

    pub fn labeled_count(&self) -> usize {
        self.known.len()
    }

    /// Labeled nodes tagged with `indicator`, in labeled-set order.
    pub fn members_of(&self, indicator: &IndicatorId) -> Vec<usize> {
        self.known
            .iter()
            .copied()
            .filter(|&i| self.records[i].label.as_ref() == Some(indicator))
            .collect()
    }

    /// Rebuilds the full node (embedding included) at `idx`.
    pub fn node(&self, idx: usize) -> ObjectNode {
        let r = &self.records[idx];
        ObjectNode {
            node_id: r.node_id.clone(),
            embedding: EmbeddingVector::new(self.embedding(idx).to_vec())
                .expect("stored rows are validated"),
            scene_id: r.scene_id.clone(),
            bbox: r.bbox,
            origin: r.origin,
            label: r.label.clone(),
            label_kind: r.label_kind,
        }
    }

    pub fn label_assignments(&self) -> Vec<LabelAssignment> {
        self.records
            .iter()
            .map(|r| LabelAssignment {
                node_id: r.node_id.clone(),
                origin: r.origin,
                label: r.label.clone(),
                label_kind: r.label_kind,
            })
            .collect()
    }

    /// Copy of the store with every embedding multiplied by `alpha`.
    pub fn scaled(&self, alpha: f32) -> Result<NodeStore> {
        let mut rows = EmbeddingMatrix::with_capacity(self.dim(), self.len());
        for i in 0..self.len() {
            let row: Vec<f32> = self.embedding(i).iter().map(|v| v * alpha).collect();
            rows.push(&row)?;
        }
        Ok(NodeStore {
            rows,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 4.0, 4.0).unwrap()
    }

    fn store() -> NodeStore {
        let mut s = NodeStore::new(2);
        s.register_indicator(Indicator::new("u1", "my cup").unwrap())
            .unwrap();
        s.register_indicator(Indicator::new("u2", "my pen").unwrap())
            .unwrap();
        s.insert(ObjectNode::seed(
            "s1",
            emb(&[1.0, 0.0]),
            "i1",
            bbox(),
            Origin::SeedHuman,
            "u1".into(),
        ))
        .unwrap();
        s.insert(ObjectNode::reminiscence(
            "r1",
            emb(&[1.0, 0.1]),
            "a",
            bbox(),
        ))
        .unwrap();
        s.insert(ObjectNode::reminiscence(
            "r2",
            emb(&[0.0, 1.0]),
            "a",
            bbox(),
        ))
        .unwrap();
        s
    }

    #[test]
    fn duplicate_node_rejected() {
        let mut s = store();
        let err = s
            .insert(ObjectNode::reminiscence(
                "r1",
                emb(&[1.0, 1.0]),
                "b",
                bbox(),
            ))
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateNode(id) if id == "r1"));
    }

    #[test]
    fn duplicate_indicator_rejected() {
        let mut s = store();
        assert!(matches!(
            s.register_indicator(Indicator::new("u1", "again").unwrap()),
            Err(Error::DuplicateIndicator(_))
        ));
    }

    #[test]
    fn unknown_label_rejected() {
        let mut s = store();
        let node = ObjectNode::seed(
            "s9",
            emb(&[1.0, 0.0]),
            "i",
            bbox(),
            Origin::SeedView,
            "nope".into(),
        );
        assert!(matches!(s.insert(node), Err(Error::UnknownIndicator(_))));
    }

    #[test]
    fn relabel_replaces_in_place() {
        let mut s = store();
        let r1 = s.index_of("r1").unwrap();
        let r2 = s.index_of("r2").unwrap();
        assert_eq!(s.unlabeled().count(), 2);
        assert_eq!(
            s.set_label(r2, &"u1".into(), LabelKind::Pseudo).unwrap(),
            LabelUpdate::Assigned
        );
        assert_eq!(
            s.set_label(r1, &"u1".into(), LabelKind::Pseudo).unwrap(),
            LabelUpdate::Assigned
        );
        assert_eq!(s.known(), &[0, r2, r1]);
        assert_eq!(
            s.set_label(r2, &"u2".into(), LabelKind::Pseudo).unwrap(),
            LabelUpdate::Relabeled {
                previous: "u1".into()
            }
        );
        assert_eq!(s.known(), &[0, r2, r1]);
        assert_eq!(s.known_slot(r2), Some(1));
        assert_eq!(s.members_of(&"u1".into()), vec![0, r1]);
        assert_eq!(s.members_of(&"u2".into()), vec![r2]);
        assert_eq!(
            s.set_label(r2, &"u2".into(), LabelKind::Pseudo).unwrap(),
            LabelUpdate::Unchanged
        );
        assert_eq!(s.unlabeled().count(), 0);
    }

    #[test]
    fn seeds_cannot_be_relabeled() {
        let mut s = store();
        assert!(matches!(
            s.set_label(0, &"u2".into(), LabelKind::Pseudo),
            Err(Error::FixedLabel(_))
        ));
    }

    #[test]
    fn scaled_keeps_labels_and_scales_norms() {
        let s = store();
        let t = s.scaled(2.0).unwrap();
        assert_eq!(t.records(), s.records());
        assert_eq!(t.known(), s.known());
        assert_eq!(t.norm(0), 2.0 * s.norm(0));
    }
}
