//! Grounding accuracy as a function of reminiscence size.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Method;
use crate::error::{Error, Result};
use crate::grounding::TestScenes;
use crate::manifest::Dataset;
use crate::pipeline::{run_method, MethodOutcome, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub size: usize,
    pub trial: usize,
    pub iou50: f64,
    pub iou80: f64,
    pub labeled_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeMean {
    pub size: usize,
    pub trials: usize,
    pub iou50: f64,
    pub iou80: f64,
    pub labeled_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub method: Method,
    pub rows: Vec<AblationRow>,
    pub means: Vec<SizeMean>,
}

#[derive(Serialize)]
struct CsvLine {
    size: usize,
    trial: String,
    iou50: f64,
    iou80: f64,
    labeled_count: String,
}

impl AblationReport {
    pub fn mean_for(&self, size: usize) -> Option<&SizeMean> {
        self.means.iter().find(|m| m.size == size)
    }

    /// Per-trial rows followed by one `mean` row per size.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(CsvLine {
                size: r.size,
                trial: r.trial.to_string(),
                iou50: r.iou50,
                iou80: r.iou80,
                labeled_count: r.labeled_count.to_string(),
            })?;
        }
        for m in &self.means {
            w.serialize(CsvLine {
                size: m.size,
                trial: "mean".into(),
                iou50: m.iou50,
                iou80: m.iou80,
                labeled_count: m.labeled_count.to_string(),
            })?;
        }
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

/// Scene ids kept for one (size, trial) cell. Each cell has its own stream
/// of the `rng_seed` generator.
pub fn subsample_scenes(
    dataset: &Dataset,
    size: usize,
    trial: usize,
    rng_seed: u64,
) -> HashSet<String> {
    let scenes = &dataset.manifest.scenes;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    rng.set_stream(((size as u64) << 32) | trial as u64);
    rand::seq::index::sample(&mut rng, scenes.len(), size)
        .into_iter()
        .map(|i| scenes[i].scene_id.clone())
        .collect()
}

/// One ablation cell. Size 0 is the seeds-only (direct) method.
pub fn ablation_run(
    dataset: &Dataset,
    test_scenes: &TestScenes,
    config: &RunConfig,
    size: usize,
    trial: usize,
    rng_seed: u64,
) -> Result<MethodOutcome> {
    let max = dataset.manifest.scenes.len();
    if size > max {
        return Err(Error::SizeOutOfRange { size, max });
    }
    if size == 0 {
        let direct = RunConfig {
            method: Method::Direct,
            ..config.clone()
        };
        return run_method(dataset, test_scenes, &direct, None);
    }
    let keep = subsample_scenes(dataset, size, trial, rng_seed);
    run_method(dataset, test_scenes, config, Some(&keep))
}

pub fn reminiscence_ablation(
    dataset: &Dataset,
    test_scenes: &TestScenes,
    sizes: &[usize],
    trials: usize,
    config: &RunConfig,
    rng_seed: u64,
) -> Result<AblationReport> {
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    let max = dataset.manifest.scenes.len();
    if let Some(&size) = sizes.iter().find(|&&s| s > max) {
        return Err(Error::SizeOutOfRange { size, max });
    }
    let cells: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&s| (0..trials).map(move |t| (s, t)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(size, trial)| {
            let out = ablation_run(dataset, test_scenes, config, size, trial, rng_seed)?;
            let pooled = out.pooled();
            Ok(AblationRow {
                size,
                trial,
                iou50: pooled.iou_at_50,
                iou80: pooled.iou_at_80,
                labeled_count: out.store().labeled_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = sizes
        .iter()
        .map(|&size| {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.size == size).collect();
            let n = cell.len() as f64;
            SizeMean {
                size,
                trials: cell.len(),
                iou50: cell.iter().map(|r| r.iou50).sum::<f64>() / n,
                iou80: cell.iter().map(|r| r.iou80).sum::<f64>() / n,
                labeled_count: cell.iter().map(|r| r.labeled_count as f64).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(AblationReport {
        method: config.method,
        rows,
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounding::load_test_scenes;
    use crate::synth::generator::{generate_synthetic_dataset, SyntheticSpec};

    fn data() -> Dataset {
        generate_synthetic_dataset(&SyntheticSpec {
            n_indicators: 4,
            nodes_per_indicator: 6,
            n_scenes: 8,
            dim: 16,
            n_ambiguous: 4,
            n_invalid: 4,
            test_scenes_per_indicator: 1,
            distractors_per_scene: 2,
            ..SyntheticSpec::separable()
        })
        .unwrap()
    }

    #[test]
    fn rows_and_means() {
        let d = data();
        let scenes = load_test_scenes(&d).unwrap();
        let r =
            reminiscence_ablation(&d, &scenes, &[0, 2, 8], 3, &RunConfig::default(), 5).unwrap();
        assert_eq!(r.rows.len(), 9);
        assert_eq!(r.means.len(), 3);
        assert_eq!(r.mean_for(2).unwrap().trials, 3);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("size,trial,iou50,iou80,labeled_count\n"));
        assert_eq!(csv.lines().count(), 1 + 9 + 3);
        let again =
            reminiscence_ablation(&d, &scenes, &[0, 2, 8], 3, &RunConfig::default(), 5).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn size_zero_is_direct() {
        let d = data();
        let scenes = load_test_scenes(&d).unwrap();
        let zero = ablation_run(&d, &scenes, &RunConfig::default(), 0, 0, 1).unwrap();
        let direct = RunConfig {
            method: Method::Direct,
            ..RunConfig::default()
        };
        let direct = run_method(&d, &scenes, &direct, None).unwrap();
        assert_eq!(zero.method, Method::Direct);
        assert_eq!(
            serde_json::to_string(&zero.reports).unwrap(),
            serde_json::to_string(&direct.reports).unwrap()
        );
    }

    #[test]
    fn bad_sizes_and_trials() {
        let d = data();
        let scenes = load_test_scenes(&d).unwrap();
        let cfg = RunConfig::default();
        assert!(matches!(
            reminiscence_ablation(&d, &scenes, &[9], 1, &cfg, 0),
            Err(Error::SizeOutOfRange { size: 9, max: 8 })
        ));
        assert!(matches!(
            reminiscence_ablation(&d, &scenes, &[1], 0, &cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn subsamples_are_seeded_per_cell() {
        let d = data();
        let a = subsample_scenes(&d, 4, 0, 3);
        assert_eq!(a.len(), 4);
        assert_eq!(a, subsample_scenes(&d, 4, 0, 3));
        assert_eq!(subsample_scenes(&d, 8, 1, 3).len(), 8);
    }
}
