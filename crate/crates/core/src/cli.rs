//! The `remprop` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acquisition::Method;
use crate::error::{Error, Result};
use crate::grounding::load_test_scenes;
use crate::manifest::{write_file, Dataset};
use crate::pipeline::{build_labeled_store, pooled_score, run_method, RunConfig};
use crate::propagation::{propagate, NodeOrder, RatioBase, TieBreak, UpdateMode};
use crate::synth::oracle::random_instance;
use crate::synth::{
    brute_force_propagate, generate_synthetic_dataset, propagation_noise_report,
    reminiscence_ablation, SyntheticSpec,
};

pub const LOG_ENV: &str = "REMPROP_LOG";
pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "remprop",
    version,
    about = "Propagate personal object labels through an unlabeled object store"
)]
pub struct Cli {
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Ignore unknown keys in dataset manifests instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    Generate(GenerateArgs),
    /// Build a method's labeled store and dump the propagation trace.
    Propagate(RunArgs),
    /// Ground every test query and report IoU hit rates.
    Evaluate(RunArgs),
    /// Grounding accuracy against reminiscence size.
    Ablate(AblateArgs),
    /// Share of ambiguous and invalid boxes that propagation labeled.
    NoiseReport(RunArgs),
    /// Compare the propagation engine against the reference implementation.
    OracleCheck(OracleArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Spec JSON; missing fields take the chosen profile's values.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Profile::PaperMirroring)]
    pub profile: Profile,
    #[arg(long)]
    pub rng_seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Profile {
    PaperMirroring,
    Separable,
}

/// Flags named after the fields of the run configuration.
#[derive(Debug, Args, Default)]
pub struct ConfigFlags {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub convergence_ratio: Option<f64>,
    #[arg(long, value_enum)]
    pub update_mode: Option<UpdateMode>,
    #[arg(long, value_enum)]
    pub node_order: Option<NodeOrder>,
    #[arg(long, value_enum)]
    pub tie_break: Option<TieBreak>,
    #[arg(long, value_enum)]
    pub ratio_base: Option<RatioBase>,
    #[arg(long)]
    pub views_per_object: Option<usize>,
    #[arg(long)]
    pub perturbation_sigma: Option<f64>,
    #[arg(long)]
    pub rotation_subspace_dim: Option<usize>,
    /// Seed for simulated views (`views.rng_seed` in the config file).
    #[arg(long)]
    pub view_rng_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated reminiscence sizes (scene counts).
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 25, 100, 400])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Seed for scene subsampling.
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    #[arg(long, default_value_t = 50)]
    pub max_nodes: usize,
    #[arg(long, default_value_t = 5)]
    pub max_indicators: usize,
    #[arg(long, default_value_t = 0)]
    pub rng_seed: u64,
}

impl ConfigFlags {
    /// File values (or defaults) overridden by any flag that was given.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c: RunConfig = match &self.config {
            Some(path) => serde_json::from_str(&read_text(path)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?,
            None => RunConfig::default(),
        };
        let p = &mut c.propagation;
        let v = &mut c.views;
        if let Some(x) = self.method {
            c.method = x;
        }
        set(&mut p.threshold, self.threshold);
        set(&mut p.max_iterations, self.max_iterations);
        set(&mut p.convergence_ratio, self.convergence_ratio);
        set(&mut p.update_mode, self.update_mode);
        set(&mut p.node_order, self.node_order);
        set(&mut p.tie_break, self.tie_break);
        set(&mut p.ratio_base, self.ratio_base);
        set(&mut v.views_per_object, self.views_per_object);
        set(&mut v.perturbation_sigma, self.perturbation_sigma);
        set(&mut v.rotation_subspace_dim, self.rotation_subspace_dim);
        set(&mut v.rng_seed, self.view_rng_seed);
        c.propagation.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    pub threads: usize,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub rng_seeds: Value,
    pub timings_ms: Value,
}

struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    rng_seeds: Value,
    timings_ms: Value,
    summary: Value,
    out_dir: PathBuf,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn load(data: &Path, lenient: bool) -> Result<Dataset> {
    Dataset::load(data, !lenient)
}

fn cmd_generate(a: &GenerateArgs) -> Result<Outcome> {
    let t0 = Instant::now();
    let base = match a.profile {
        Profile::PaperMirroring => SyntheticSpec::paper_mirroring(),
        Profile::Separable => SyntheticSpec::separable(),
    };
    let mut spec = match &a.spec {
        Some(path) => {
            let mut value = serde_json::to_value(&base)?;
            let patch: Value = serde_json::from_str(&read_text(path)?)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            let Value::Object(fields) = patch else {
                return Err(Error::InvalidConfig("spec must be a JSON object".into()));
            };
            for (k, v) in fields {
                value[k] = v;
            }
            serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?
        }
        None => base,
    };
    set(&mut spec.rng_seed, a.rng_seed);
    let dataset = generate_synthetic_dataset(&spec)?;
    create_dir(&a.out)?;
    let outputs = dataset.save(&a.out)?;
    let m = &dataset.manifest;
    Ok(Outcome {
        config: serde_json::to_value(&spec)?,
        inputs: a.spec.iter().cloned().collect(),
        outputs,
        rng_seeds: json!({ "generator": spec.rng_seed }),
        timings_ms: json!({ "total": ms(t0) }),
        summary: json!({
            "indicators": m.personal_objects.len(),
            "scenes": m.scenes.len(),
            "reminiscence_nodes": m.reminiscence_node_count(),
            "test_queries": m.test.splits.iter().map(|s| s.queries.len()).sum::<usize>(),
        }),
        out_dir: a.out.clone(),
    })
}

fn cmd_propagate(a: &RunArgs, lenient: bool) -> Result<Outcome> {
    let t0 = Instant::now();
    let config = a.flags.resolve()?;
    let dataset = load(&a.data, lenient)?;
    let t_load = ms(t0);
    let t1 = Instant::now();
    let result = build_labeled_store(&dataset, &config, None)?;
    let t_prop = ms(t1);
    create_dir(&a.out)?;
    let path = a.out.join("propagation.json");
    write_json(&path, &result)?;
    Ok(Outcome {
        config: serde_json::to_value(&config)?,
        inputs: vec![a.data.clone()],
        outputs: vec![path],
        rng_seeds: json!({ "views": config.views.rng_seed }),
        timings_ms: json!({ "load": t_load, "propagate": t_prop, "total": ms(t0) }),
        summary: json!({
            "method": config.method,
            "converged": result.converged,
            "iterations_used": result.iterations_used,
            "labeled_count": result.final_store.labeled_count(),
        }),
        out_dir: a.out.clone(),
    })
}

fn cmd_evaluate(a: &RunArgs, lenient: bool) -> Result<Outcome> {
    let t0 = Instant::now();
    let config = a.flags.resolve()?;
    let dataset = load(&a.data, lenient)?;
    let scenes = load_test_scenes(&dataset)?;
    let t_load = ms(t0);
    let t1 = Instant::now();
    let out = run_method(&dataset, &scenes, &config, None)?;
    let t_run = ms(t1);
    create_dir(&a.out)?;
    let pooled = pooled_score(&out.reports);
    let json_path = a.out.join("eval.json");
    write_json(
        &json_path,
        &json!({ "method": config.method, "pooled": pooled, "splits": out.reports }),
    )?;
    let mut outputs = vec![json_path];
    for r in &out.reports {
        let p = a.out.join(format!("eval_{}.csv", r.split_name));
        r.save_csv(&p)?;
        outputs.push(p);
    }
    let splits: Vec<Value> = out
        .reports
        .iter()
        .map(|r| {
            json!({
                "split": r.split_name,
                "n_queries": r.n_queries,
                "iou_at_50": r.iou_at_50,
                "iou_at_80": r.iou_at_80,
                "iou50_advisory": r.iou50_advisory,
            })
        })
        .collect();
    Ok(Outcome {
        config: serde_json::to_value(&config)?,
        inputs: vec![a.data.clone()],
        outputs,
        rng_seeds: json!({ "views": config.views.rng_seed }),
        timings_ms: json!({ "load": t_load, "run": t_run, "total": ms(t0) }),
        summary: json!({ "method": config.method, "pooled": pooled, "splits": splits }),
        out_dir: a.out.clone(),
    })
}

fn cmd_ablate(a: &AblateArgs, lenient: bool) -> Result<Outcome> {
    let t0 = Instant::now();
    let config = a.flags.resolve()?;
    let dataset = load(&a.data, lenient)?;
    let scenes = load_test_scenes(&dataset)?;
    let report = reminiscence_ablation(&dataset, &scenes, &a.sizes, a.trials, &config, a.rng_seed)?;
    create_dir(&a.out)?;
    let csv_path = a.out.join("ablation.csv");
    report.save_csv(&csv_path)?;
    let json_path = a.out.join("ablation.json");
    write_json(&json_path, &report)?;
    Ok(Outcome {
        config: json!({ "run": config, "sizes": a.sizes, "trials": a.trials }),
        inputs: vec![a.data.clone()],
        outputs: vec![csv_path, json_path],
        rng_seeds: json!({ "subsample": a.rng_seed, "views": config.views.rng_seed }),
        timings_ms: json!({ "total": ms(t0) }),
        summary: json!({ "method": report.method, "means": report.means }),
        out_dir: a.out.clone(),
    })
}

fn cmd_noise_report(a: &RunArgs, lenient: bool) -> Result<Outcome> {
    let t0 = Instant::now();
    let config = a.flags.resolve()?;
    let dataset = load(&a.data, lenient)?;
    let result = build_labeled_store(&dataset, &config, None)?;
    let report = propagation_noise_report(&result, &dataset.manifest);
    create_dir(&a.out)?;
    let path = a.out.join("noise_report.json");
    write_json(&path, &json!({ "method": config.method, "report": report }))?;
    Ok(Outcome {
        config: serde_json::to_value(&config)?,
        inputs: vec![a.data.clone()],
        outputs: vec![path],
        rng_seeds: json!({ "views": config.views.rng_seed }),
        timings_ms: json!({ "total": ms(t0) }),
        summary: json!({
            "method": config.method,
            "ambiguous_labeled_rate": report.ambiguous_labeled_rate,
            "invalid_labeled_rate": report.invalid_labeled_rate,
            "clean_correct_rate": report.clean_correct_rate,
        }),
        out_dir: a.out.clone(),
    })
}

fn cmd_oracle_check(a: &OracleArgs) -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(a.rng_seed);
    let mut mismatches = Vec::new();
    for i in 0..a.instances {
        let (store, cfg) = random_instance(&mut rng, a.max_nodes, a.max_indicators)?;
        let fast = propagate(&store, &cfg)?;
        let slow = brute_force_propagate(&store, &cfg)?;
        if fast != slow {
            mismatches.push(i);
        }
    }
    create_dir(&a.out)?;
    let summary = json!({
        "instances": a.instances,
        "mismatches": mismatches,
        "elapsed_ms": ms(t0),
    });
    let path = a.out.join("oracle_check.json");
    write_json(&path, &summary)?;
    let outcome = Outcome {
        config: json!({ "instances": a.instances, "max_nodes": a.max_nodes, "max_indicators": a.max_indicators }),
        inputs: vec![],
        outputs: vec![path],
        rng_seeds: json!({ "instances": a.rng_seed }),
        timings_ms: json!({ "total": ms(t0) }),
        summary,
        out_dir: a.out.clone(),
    };
    if !mismatches.is_empty() {
        write_run_manifest("oracle-check", &[], &outcome)?;
        return Err(Error::InvalidConfig(format!(
            "engine and reference disagree on {} of {} instances",
            mismatches.len(),
            a.instances
        )));
    }
    Ok(outcome)
}

fn write_run_manifest(command: &str, argv: &[String], o: &Outcome) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_owned(),
        argv: argv.to_vec(),
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        threads: rayon::current_num_threads(),
        config: o.config.clone(),
        inputs: o.inputs.clone(),
        outputs: o.outputs.clone(),
        rng_seeds: o.rng_seeds.clone(),
        timings_ms: o.timings_ms.clone(),
    };
    write_json(&o.out_dir.join(RUN_MANIFEST), &manifest)
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let (name, outcome) = match &cli.command {
        Command::Generate(a) => ("generate", cmd_generate(a)?),
        Command::Propagate(a) => ("propagate", cmd_propagate(a, cli.lenient)?),
        Command::Evaluate(a) => ("evaluate", cmd_evaluate(a, cli.lenient)?),
        Command::Ablate(a) => ("ablate", cmd_ablate(a, cli.lenient)?),
        Command::NoiseReport(a) => ("noise-report", cmd_noise_report(a, cli.lenient)?),
        Command::OracleCheck(a) => ("oracle-check", cmd_oracle_check(a)?),
    };
    write_run_manifest(name, argv, &outcome)?;
    println!("{}", serde_json::to_string(&outcome.summary)?);
    Ok(())
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 for usage or validation errors, 2 for
/// I/O errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            eprintln!("\n{}", Cli::command().render_usage());
            return 1;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::InvalidConfig("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidConfig(e.to_string()))
            .and_then(|pool| pool.install(|| execute(&cli, &argv))),
        None => execute(&cli, &argv),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}
