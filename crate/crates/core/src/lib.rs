//! Label propagation through an unlabeled object store ("reminiscence") for
//! personalized object grounding.
//!
//! A handful of user-labeled seed embeddings tag the rest of the store by
//! mean cosine affinity; a nearest-prototype grounder then picks the box in a
//! scene that best matches a personal indicator.

pub mod acquisition;
pub mod cli;
pub mod embedding;
pub mod error;
pub mod grounding;
pub mod manifest;
pub mod pipeline;
pub mod propagation;
pub mod store;
pub mod synth;
pub mod types;

pub use acquisition::{ingest_seeds, Method, MethodConfig, ViewSimulationParams};
pub use embedding::{cosine_similarity, l2_norm, EmbeddingVector};
pub use error::{Error, Result};
pub use grounding::{
    evaluate_split, ground, iou, EvalReport, Grounder, GroundingPrediction, PrototypeGrounder,
};
pub use manifest::{Dataset, DatasetManifest};
pub use pipeline::{run_method, RunConfig};
pub use propagation::{
    affinity_scores, propagate, propagate_pass, PropagationConfig, PropagationResult, UpdateMode,
};
pub use store::NodeStore;
pub use synth::{brute_force_propagate, generate_synthetic_dataset, SyntheticSpec};
pub use types::{BoundingBox, Indicator, IndicatorId, LabelKind, NoiseClass, ObjectNode, Origin};
