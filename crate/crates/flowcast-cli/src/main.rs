//! Command-line driver: simulate benchmark data, train forecasters, draw
//! forecast samples, and score checkpoints. Every run writes a
//! `run_manifest.json` (command, config echo, seed, SHA-256 of inputs and
//! outputs) so results can be traced back to their exact inputs.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flowcast_core::cells::CellKind;
use flowcast_core::checkpoint::Checkpoint;
use flowcast_core::config::{JointKind, RunConfig};
use flowcast_core::eval;
use flowcast_core::flow::CovKind;
use flowcast_core::gbm::{self, GbmConfig};
use flowcast_core::series::{file_sha256_hex, Dataset, Regularity};
use flowcast_core::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "flowcast", version, about = "Probabilistic forecasting of irregular multivariate time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a correlated geometric-Brownian-motion benchmark dataset.
    Simulate(SimulateArgs),
    /// Train a forecaster; writes checkpoint.json and loss.csv.
    Train(TrainArgs),
    /// Draw forecast samples for one instance at one event.
    Sample(SampleArgs),
    /// Score one or more checkpoints on a dataset split.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CellArg {
    Gruode,
    #[value(name = "gru-d", alias = "grud")]
    GruD,
    Odernn,
    Odelstm,
}

impl From<CellArg> for CellKind {
    fn from(c: CellArg) -> CellKind {
        match c {
            CellArg::Gruode => CellKind::GruOde,
            CellArg::GruD => CellKind::GruD,
            CellArg::Odernn => CellKind::OdeRnn,
            CellArg::Odelstm => CellKind::OdeLstm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum JointArg {
    Cnf,
    Gaussian,
}

impl From<JointArg> for JointKind {
    fn from(j: JointArg) -> JointKind {
        match j {
            JointArg::Cnf => JointKind::Cnf,
            JointArg::Gaussian => JointKind::Gaussian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Syn,
    Asyn,
}

impl From<ModeArg> for Regularity {
    fn from(m: ModeArg) -> Regularity {
        match m {
            ModeArg::Syn => Regularity::Syn,
            ModeArg::Asyn => Regularity::Asyn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CovArg {
    Full,
    Diagonal,
}

impl From<CovArg> for CovKind {
    fn from(c: CovArg) -> CovKind {
        match c {
            CovArg::Full => CovKind::Full,
            CovArg::Diagonal => CovKind::Diagonal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    /// Fraction of grid points kept per instance (syn) or per variable (asyn).
    #[arg(long, default_value_t = 0.5)]
    keep: f64,
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 101)]
    grid_points: usize,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Comma-separated correlated block sizes.
    #[arg(long, default_value = "2,3")]
    blocks: String,
    /// Comma-separated within-block correlations, one per block.
    #[arg(long, default_value = "0.8,0.6")]
    rho: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run-config JSON; individual flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "config")]
    cell: Option<CellArg>,
    #[arg(long, value_enum, required_unless_present = "config")]
    joint: Option<JointArg>,
    #[arg(long, value_enum, required_unless_present = "config")]
    mode: Option<ModeArg>,
    /// Dataset directory (data.csv + manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.json, loss.csv, run_manifest.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    flow_steps: Option<usize>,
    #[arg(long, value_enum)]
    covariance: Option<CovArg>,
    #[arg(long)]
    patience: Option<usize>,
    /// Train on raw values instead of train-split standardized ones.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Instance id to condition on.
    #[arg(long)]
    instance: String,
    /// Event index to forecast, conditioning on everything before it.
    #[arg(long, default_value_t = 0)]
    from_event: usize,
    /// Ensemble size (defaults to the checkpoint's evaluation setting).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep forecasting through the remaining events, feeding the ensemble
    /// mean back in as a fully observed pseudo-observation.
    #[arg(long)]
    rollout: bool,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint JSON; repeat to aggregate several runs.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Ensemble size (defaults to each checkpoint's setting).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Train(args) => run_train(args),
        Command::Sample(args) => run_sample(args),
        Command::Evaluate(args) => run_evaluate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// Manifests.

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    command: String,
    seed: u64,
    config: serde_json::Value,
    /// SHA-256 per input file.
    inputs: BTreeMap<String, String>,
    /// SHA-256 per produced file.
    outputs: BTreeMap<String, String>,
}

fn hash_files(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for p in paths {
        let digest = file_sha256_hex(p).with_context(|| format!("hashing {}", p.display()))?;
        map.insert(p.display().to_string(), digest);
    }
    Ok(map)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("run_manifest.json"), text + "\n")?;
    Ok(())
}

fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join("data.csv"), dir.join("manifest.json")]
}

// ---------------------------------------------------------------------------
// simulate

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let block_sizes: Vec<usize> = parse_list(&args.blocks)?;
    let block_rho: Vec<f64> = parse_list(&args.rho)?;
    let defaults = GbmConfig::default();
    // Alternate the default down/up drift ranges across however many blocks
    // were requested.
    let drift_ranges: Vec<(f64, f64)> = (0..block_sizes.len())
        .map(|i| defaults.drift_ranges[i % defaults.drift_ranges.len()])
        .collect();
    let gbm_cfg = GbmConfig {
        n_instances: args.instances,
        grid_points: args.grid_points,
        horizon: args.horizon,
        block_sizes,
        block_rho,
        drift_ranges,
        seed: args.seed,
        ..defaults
    };
    let (full, _draws) = gbm::simulate(&gbm_cfg)?;
    let data = match args.mode {
        ModeArg::Syn => gbm::subsample_syn(&full, args.keep, args.seed)?,
        ModeArg::Asyn => gbm::subsample_asyn(&full, args.keep, args.seed)?,
    };
    fs::create_dir_all(&args.out)?;
    data.save(&args.out)?;

    let mode: Regularity = args.mode.into();
    write_manifest(
        &args.out,
        &RunManifest {
            schema_version: 1,
            command: "simulate".into(),
            seed: args.seed,
            config: serde_json::json!({
                "gbm": gbm_cfg,
                "keep": args.keep,
                "mode": mode,
            }),
            inputs: BTreeMap::new(),
            outputs: hash_files(&dataset_files(&args.out))?,
        },
    )?;
    println!(
        "wrote {} instances ({} variables) to {}",
        data.instances.len(),
        data.dim,
        args.out.display()
    );
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<T>().map_err(|e| anyhow!("bad list entry `{p}`: {e}"))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train

fn build_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str::<RunConfig>(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => {
            let (cell, joint, mode) = (
                args.cell.expect("clap enforces cell without --config"),
                args.joint.expect("clap enforces joint without --config"),
                args.mode.expect("clap enforces mode without --config"),
            );
            RunConfig::new(cell.into(), joint.into(), mode.into())
        }
    };
    if let Some(c) = args.cell {
        cfg.cell = c.into();
    }
    if let Some(j) = args.joint {
        cfg.joint = j.into();
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(h) = args.hidden {
        cfg.hidden = h;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(fs) = args.flow_steps {
        cfg.flow_steps = fs;
    }
    if let Some(c) = args.covariance {
        cfg.covariance = Some(c.into());
    }
    if let Some(p) = args.patience {
        cfg.patience = p;
    }
    if args.no_standardize {
        cfg.standardize = false;
    }
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let (data, summary) =
        Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if summary.merged_rows > 0 {
        eprintln!("note: merged {} duplicate-time rows", summary.merged_rows);
    }
    if summary.zeroed_entries > 0 {
        eprintln!("note: zeroed {} unobserved nonzero entries", summary.zeroed_entries);
    }
    Ok(data)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let cfg = build_config(&args)?;
    let data = load_dataset(&args.data)?;
    let outcome = train::train(&cfg, &data, Some(&args.out))?;
    write_manifest(
        &args.out,
        &RunManifest {
            schema_version: 1,
            command: "train".into(),
            seed: cfg.seed,
            config: serde_json::to_value(&cfg)?,
            inputs: hash_files(&dataset_files(&args.data))?,
            outputs: hash_files(&[args.out.join("checkpoint.json"), args.out.join("loss.csv")])?,
        },
    )?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs{}; best validation loss {} at epoch {}",
        last.epoch,
        if outcome.stopped_early { " (stopped early)" } else { "" },
        outcome.checkpoint.validation_loss,
        outcome.checkpoint.epoch,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sample

/// De-standardize one sample row for output, when the model was trained on
/// standardized values.
fn to_data_scale(data: &Dataset, row: &mut [f64]) {
    if let Some(st) = &data.standardization {
        for (d, v) in row.iter_mut().enumerate() {
            *v = *v * st.std[d] + st.mean[d];
        }
    }
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = ckpt.to_model()?;
    let raw = load_dataset(&args.data)?;
    let data = train::prepare_dataset(&ckpt.config, &raw)?;
    let idx = data
        .instances
        .iter()
        .position(|i| i.id == args.instance)
        .ok_or_else(|| anyhow!("no instance with id `{}`", args.instance))?;
    let n = args.n.unwrap_or(ckpt.config.n_samples);
    let seed = args.seed.unwrap_or(ckpt.config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut inst = data.instances[idx].clone();
    if args.from_event >= inst.n_events() {
        bail!("--from-event {} out of range, instance has {} events", args.from_event, inst.n_events());
    }
    let last_event = if args.rollout { inst.n_events() - 1 } else { args.from_event };

    let mut csv = String::from("event,time");
    for d in 0..data.dim {
        write!(csv, ",x_{}", d + 1).expect("string writes cannot fail");
    }
    csv.push('\n');
    for k in args.from_event..=last_event {
        let samples = model.forecast(&inst, k, n, &mut rng)?;
        for i in 0..n {
            let mut row: Vec<f64> = samples.row(i).to_vec();
            to_data_scale(&data, &mut row);
            write!(csv, "{},{}", k, inst.times[k]).expect("string writes cannot fail");
            for v in &row {
                write!(csv, ",{v}").expect("string writes cannot fail");
            }
            csv.push('\n');
        }
        if args.rollout && k < last_event {
            // Feed the ensemble mean back at the event's observed slots so
            // the next step conditions on the model's own forecast.
            // Unobserved slots keep their stored zeros and stay masked,
            // exactly like a real event.
            for d in 0..data.dim {
                if inst.mask[(d, k)] == 1.0 {
                    inst.values[(d, k)] = samples.column(d).mean().expect("nonempty ensemble");
                }
            }
        }
    }
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&args.out, &csv)?;

    let manifest_dir = args.out.parent().unwrap_or(Path::new("."));
    let mut inputs = dataset_files(&args.data);
    inputs.push(args.ckpt.clone());
    write_manifest(
        manifest_dir,
        &RunManifest {
            schema_version: 1,
            command: "sample".into(),
            seed,
            config: serde_json::json!({
                "instance": args.instance,
                "from_event": args.from_event,
                "n": n,
                "rollout": args.rollout,
                "run_config": ckpt.config,
            }),
            inputs: hash_files(&inputs)?,
            outputs: hash_files(std::slice::from_ref(&args.out))?,
        },
    )?;
    println!("wrote {} samples per event to {}", n, args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Serialize)]
struct EvalOutput {
    schema_version: u32,
    split: String,
    runs: Vec<eval::Report>,
    summary: eval::Summary,
}

fn split_indices(data: &Dataset, split: SplitArg) -> Result<Vec<usize>> {
    Ok(match split {
        SplitArg::All => (0..data.instances.len()).collect(),
        s => {
            let idx = data.split_indices()?;
            match s {
                SplitArg::Train => idx.train,
                SplitArg::Valid => idx.valid,
                SplitArg::Test => idx.test,
                SplitArg::All => unreachable!(),
            }
        }
    })
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let raw = load_dataset(&args.data)?;
    let mut runs = Vec::new();
    for path in &args.ckpt {
        let ckpt = Checkpoint::load(path)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let model = ckpt.to_model()?;
        let data = train::prepare_dataset(&ckpt.config, &raw)?;
        let indices = split_indices(&data, args.split)?;
        let report = eval::evaluate(
            &model,
            &data,
            &indices,
            args.samples.unwrap_or(ckpt.config.n_samples),
            args.seed.unwrap_or(ckpt.config.seed),
            &ckpt.config.cs_levels,
        )?;
        for d in &report.excluded_dims {
            eprintln!("warning: variable {} never observed in this split; skipped by CS", d + 1);
        }
        runs.push(report);
    }
    let summary = eval::summarize(&runs)?;
    let split_name = match args.split {
        SplitArg::Train => "train",
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    };
    let output =
        EvalOutput { schema_version: 1, split: split_name.into(), runs, summary };
    let text = serde_json::to_string_pretty(&output)?;
    match &args.out {
        Some(path) => {
            if let Some(dir) = path.parent() {
                if !dir.as_os_str().is_empty() {
                    fs::create_dir_all(dir)?;
                }
            }
            fs::write(path, text.clone() + "\n")?;
            let manifest_dir = path.parent().unwrap_or(Path::new("."));
            let mut inputs = dataset_files(&args.data);
            inputs.extend(args.ckpt.iter().cloned());
            write_manifest(
                manifest_dir,
                &RunManifest {
                    schema_version: 1,
                    command: "evaluate".into(),
                    seed: args.seed.unwrap_or(0),
                    config: serde_json::json!({
                        "split": split_name,
                        "samples": args.samples,
                    }),
                    inputs: hash_files(&inputs)?,
                    outputs: hash_files(std::slice::from_ref(path))?,
                },
            )?;
            println!("wrote report to {}", path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}
