use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

/// Identifier of a personal indicator. Ordering is lexicographic on the
/// underlying string, which is also the tie-break order for argmax.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndicatorId(String);

impl IndicatorId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for IndicatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for IndicatorId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// A personal indicator, e.g. `("u007", "my sleeping pills")`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub id: IndicatorId,
    pub text: String,
}

impl Indicator {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        if id.is_empty() {
            return Err(Error::InvalidManifest("indicator id is empty".into()));
        }
        if text.trim().is_empty() {
            return Err(Error::InvalidManifest(format!(
                "indicator `{id}` has empty text"
            )));
        }
        Ok(Self {
            id: IndicatorId(id),
            text,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.id.0.clone(), self.text.clone()).map(|_| ())
    }
}

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`, all non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { x1, y1, x2, y2 } = *self;
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 < 0.0 || y1 < 0.0 || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Where a node came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    /// The one-time introduction of a personal object.
    SeedHuman,
    /// An extra view captured while inspecting the object.
    SeedView,
    /// A detection from the unlabeled image collection.
    Reminiscence,
}

impl Origin {
    pub fn is_seed(self) -> bool {
        matches!(self, Origin::SeedHuman | Origin::SeedView)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Given by the user; never reassigned.
    Fixed,
    /// Assigned by propagation.
    Pseudo,
    /// Copied from ground-truth annotations (supervised baseline only).
    Annotated,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseClass {
    #[default]
    Clean,
    /// Covers part of an object or several objects.
    Ambiguous,
    /// Contains no real object.
    Invalid,
}

/// A detected object crop with its provenance and label state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectNode {
    pub node_id: String,
    pub embedding: EmbeddingVector,
    pub scene_id: String,
    pub bbox: BoundingBox,
    pub origin: Origin,
    pub label: Option<IndicatorId>,
    pub label_kind: LabelKind,
}

impl ObjectNode {
    pub fn seed(
        node_id: impl Into<String>,
        embedding: EmbeddingVector,
        scene_id: impl Into<String>,
        bbox: BoundingBox,
        origin: Origin,
        indicator: IndicatorId,
    ) -> Self {
        Self {
            node_id: node_id.into(),
            embedding,
            scene_id: scene_id.into(),
            bbox,
            origin,
            label: Some(indicator),
            label_kind: LabelKind::Fixed,
        }
    }

    pub fn reminiscence(
        node_id: impl Into<String>,
        embedding: EmbeddingVector,
        scene_id: impl Into<String>,
        bbox: BoundingBox,
    ) -> Self {
        Self {
            node_id: node_id.into(),
            embedding,
            scene_id: scene_id.into(),
            bbox,
            origin: Origin::Reminiscence,
            label: None,
            label_kind: LabelKind::None,
        }
    }

    /// Checks the origin/label invariants and the box.
    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: &str| Error::InvalidNode {
            node_id: self.node_id.clone(),
            reason: reason.to_owned(),
        };
        if self.node_id.is_empty() {
            return Err(invalid("empty node id"));
        }
        self.bbox.validate()?;
        match (self.origin.is_seed(), &self.label, self.label_kind) {
            (true, Some(_), LabelKind::Fixed) => {}
            (true, _, _) => return Err(invalid("seed nodes need a fixed label")),
            (false, _, LabelKind::Fixed) => {
                return Err(invalid("reminiscence nodes cannot carry a fixed label"))
            }
            (false, None, LabelKind::None) => {}
            (false, Some(_), LabelKind::Pseudo | LabelKind::Annotated) => {}
            (false, _, _) => return Err(invalid("label and label kind disagree")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb() -> EmbeddingVector {
        EmbeddingVector::new(vec![1.0, 0.0]).unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
    }

    #[test]
    fn box_validation() {
        assert!(BoundingBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 2.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(-1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn indicator_validation() {
        assert!(Indicator::new("u1", "my mug").is_ok());
        assert!(Indicator::new("u1", "  ").is_err());
        assert!(Indicator::new("", "my mug").is_err());
    }

    #[test]
    fn node_label_invariants() {
        let seed = ObjectNode::seed("s", emb(), "i", bbox(), Origin::SeedHuman, "u".into());
        assert!(seed.validate().is_ok());

        let mut bad = seed.clone();
        bad.label_kind = LabelKind::Pseudo;
        assert!(bad.validate().is_err());

        let mut unlabeled_seed = seed.clone();
        unlabeled_seed.label = None;
        assert!(unlabeled_seed.validate().is_err());

        let r = ObjectNode::reminiscence("r", emb(), "scene", bbox());
        assert!(r.validate().is_ok());

        let mut fixed_r = r.clone();
        fixed_r.label = Some("u".into());
        fixed_r.label_kind = LabelKind::Fixed;
        assert!(fixed_r.validate().is_err());

        let mut pseudo_r = r;
        pseudo_r.label = Some("u".into());
        pseudo_r.label_kind = LabelKind::Pseudo;
        assert!(pseudo_r.validate().is_ok());
    }
}
