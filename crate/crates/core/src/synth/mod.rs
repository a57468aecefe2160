//! Synthetic data, the reference propagation oracle, and the analyses run
//! on top of them.

pub mod ablation;
pub mod generator;
pub mod noise;
pub mod oracle;

pub use ablation::{reminiscence_ablation, AblationReport, AblationRow, SizeMean};
pub use generator::{generate_synthetic_dataset, SyntheticSpec};
pub use noise::{propagation_noise_report, NoiseReport};
pub use oracle::brute_force_propagate;
