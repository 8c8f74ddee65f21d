//! `sldiff`: generate data, train, localize, evaluate, and sweep.
//!
//! Every command resolves its configuration (flags > config file >
//! defaults), writes a `run_manifest.json` next to its outputs, and is
//! bit-reproducible from that manifest (wall-clock timing, when requested,
//! is the one documented exception).
//!
//! Exit codes: 0 success, 2 usage, 3 data/configuration error, 4 numeric
//! failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sldiff_core::data::{gen_episodes, gen_graph, load_dataset, save_dataset, GenRecipe, Split};
use sldiff_core::diffusion::StageConfig;
use sldiff_core::error::Error;
use sldiff_core::eval::{
    compute_metrics, emit_results, evaluate_split, lpsi_baseline, run_ablations, sweep_ratio,
    ResultsReport, SweepResult,
};
use sldiff_core::pipeline::{
    load_trained, localize, save_trained, train_all, ExperimentConfig, LocalizeOptions, Variant,
};

#[derive(Parser)]
#[command(name = "sldiff", version, about = "Two-stage diffusion source localization on graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData(GenDataArgs),
    /// Train model components from a dataset.
    Train(TrainArgs),
    /// Localize the sources of one episode.
    Localize(LocalizeArgs),
    /// Evaluate a trained bundle on a dataset split.
    Evaluate(EvaluateArgs),
    /// Sweep the fine-to-coarse step ratio at a fixed total budget.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Reference,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimingMode {
    /// Record fine-stage wall times in the results.
    Wall,
    /// Omit timing: output bytes depend only on the manifest.
    None,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file (missing fields take defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration preset applied before the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Master seed; expands to per-component seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the number of generated episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Override the cascade activation probability.
    #[arg(long)]
    edge_prob: Option<f64>,
    /// Override the cascade round cap (0 removes the cap).
    #[arg(long)]
    max_rounds: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut config = match self.preset {
            Some(Preset::Reference) => ExperimentConfig::reference(),
            Some(Preset::Tiny) => ExperimentConfig::tiny(),
            None => ExperimentConfig::default(),
        };
        if let Some(path) = &self.config {
            let bytes = std::fs::read(resolve_path(path))?;
            config = serde_json::from_slice(&bytes)?;
        }
        if let Some(n) = self.episodes {
            config.episodes.count = n;
        }
        if let Some(p) = self.edge_prob {
            config.episodes.edge_prob = p;
        }
        if let Some(r) = self.max_rounds {
            config.episodes.max_rounds = if r == 0 { None } else { Some(r) };
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Coarse,
    Fine,
    Surrogate,
    Noise,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Input dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output bundle directory.
    #[arg(long)]
    out: PathBuf,
    /// Component to train; partial stages update an existing bundle.
    #[arg(long, value_enum, default_value = "all")]
    stage: TrainStage,
    /// Worker threads for parallel sections.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct LocalizeArgs {
    /// Trained bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    /// Dataset directory the episode comes from.
    #[arg(long)]
    data: PathBuf,
    /// Episode id to localize.
    #[arg(long)]
    episode: u32,
    /// Sampling seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluation seeds, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Also run the ablation table.
    #[arg(long)]
    ablations: bool,
    /// Add a baseline comparison row (supported: lpsi).
    #[arg(long)]
    baseline: Option<String>,
    /// Total diffusion steps for the ablation table.
    #[arg(long, default_value_t = 800)]
    total_steps: usize,
    #[arg(long, value_enum, default_value = "none")]
    timing: TimingMode,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fine-to-coarse ratios, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 800)]
    total_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "wall")]
    timing: TimingMode,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Relative paths resolve under `SLDIFF_DATA_DIR` when it is set.
fn resolve_path(p: &Path) -> PathBuf {
    if p.is_relative() {
        if let Ok(root) = std::env::var("SLDIFF_DATA_DIR") {
            return PathBuf::from(root).join(p);
        }
    }
    p.to_path_buf()
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    format_version: u32,
    command: String,
    master_seed: u64,
    seeds: Vec<u64>,
    config: Option<ExperimentConfig>,
    config_hash: Option<String>,
    inputs: BTreeMap<String, String>,
    timing: String,
    extra: BTreeMap<String, String>,
}

impl RunManifest {
    fn new(command: &str, master_seed: u64) -> Self {
        Self {
            format_version: sldiff_core::data::FORMAT_VERSION,
            command: command.to_string(),
            master_seed,
            seeds: vec![master_seed],
            config: None,
            config_hash: None,
            inputs: BTreeMap::new(),
            timing: "none".to_string(),
            extra: BTreeMap::new(),
        }
    }

    fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir)?;
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(dir.join("run_manifest.json"), bytes)?;
        Ok(())
    }
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::InvalidParam(format!("unknown split '{other}'"))),
    }
}

fn install_jobs(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_)
        | Error::Format(_)
        | Error::Checksum(_)
        | Error::Version { .. }
        | Error::Json(_)
        | Error::InvalidGraph(_)
        | Error::InvalidCascade(_)
        | Error::DegenerateCascade(_)
        | Error::EmptyDataset(_)
        | Error::InvalidParam(_) => 3,
        Error::DimMismatch(_)
        | Error::StepOutOfRange { .. }
        | Error::SigmaBelowFloor { .. }
        | Error::NonConvergence { .. } => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Localize(args) => cmd_localize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Sweep(args) => cmd_sweep(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let config = args.config.resolve()?;
    let out = resolve_path(&args.out);
    let recipe = GenRecipe {
        graph: config.graph.clone(),
        episodes: config.episodes.clone(),
        split: config.split,
        seed: args.config.seed,
    };
    let graph = gen_graph(&recipe.graph, recipe.seed)?;
    let bundle = gen_episodes(&graph, &recipe)?;
    save_dataset(&bundle, &out)?;
    let mut manifest = RunManifest::new("gen-data", args.config.seed);
    manifest.config = Some(config.clone());
    manifest.config_hash = Some(config.hash()?);
    manifest
        .extra
        .insert("episodes_generated".into(), bundle.episodes.len().to_string());
    manifest.extra.insert("episodes_skipped".into(), bundle.skipped.to_string());
    manifest.write(&out)?;
    println!("dataset written to {} ({} episodes, {} skipped)", out.display(), bundle.episodes.len(), bundle.skipped);
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    install_jobs(args.jobs);
    let config = args.config.resolve()?;
    let data_dir = resolve_path(&args.data);
    let out = resolve_path(&args.out);
    let dataset = load_dataset(&data_dir)?;

    let bundle = match args.stage {
        TrainStage::All => train_all(&dataset, &config, args.config.seed)?,
        partial => {
            // partial retraining updates an existing bundle in place
            let mut bundle = load_trained(&out)?;
            let full = train_all(&dataset, &bundle.config, bundle.master_seed)?;
            match partial {
                TrainStage::Coarse => {
                    bundle.coarse = full.coarse;
                    bundle.coarse_no_pos = full.coarse_no_pos;
                    bundle.embedding = full.embedding;
                    bundle.anchors = full.anchors;
                }
                TrainStage::Fine => bundle.fine = full.fine,
                TrainStage::Surrogate => bundle.surrogate = full.surrogate,
                TrainStage::Noise => bundle.noise = full.noise,
                TrainStage::All => unreachable!(),
            }
            bundle
        }
    };
    save_trained(&bundle, &out)?;
    let mut manifest = RunManifest::new("train", args.config.seed);
    manifest.config = Some(bundle.config.clone());
    manifest.config_hash = Some(bundle.config.hash()?);
    manifest.inputs.insert("data".into(), data_dir.display().to_string());
    manifest.write(&out)?;
    println!("trained bundle written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LocalizeRecord {
    episode: u32,
    seed: u64,
    predicted: Vec<u32>,
    metrics: sldiff_core::eval::MetricsReport,
    residuals: Vec<f64>,
    i0: Vec<f64>,
    x_hat_full: Vec<f64>,
}

fn cmd_localize(args: LocalizeArgs) -> Result<(), Error> {
    let bundle = load_trained(&resolve_path(&args.bundle))?;
    let dataset = load_dataset(&resolve_path(&args.data))?;
    let out = resolve_path(&args.out);
    let idx = dataset
        .episodes
        .iter()
        .position(|e| e.id == args.episode)
        .ok_or_else(|| Error::InvalidParam(format!("episode {} not in dataset", args.episode)))?;
    let y: Vec<f64> = dataset.observation(idx);
    let truth: Vec<f64> = dataset.indicator(idx)?;

    let mut records = Vec::new();
    for &seed in &args.seeds {
        let opts = LocalizeOptions::from_config(&bundle.config, Variant::Full, seed);
        let result = localize(&bundle, &y, &dataset.episodes[idx].cascade, &opts)?;
        let metrics = compute_metrics(&result.predicted, &truth)?;
        records.push(LocalizeRecord {
            episode: args.episode,
            seed,
            predicted: result.predicted.iter().copied().collect(),
            metrics,
            residuals: result.residuals,
            i0: result.i0,
            x_hat_full: result.x_hat_full,
        });
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("prediction.json"), serde_json::to_vec_pretty(&records)?)?;
    let mut manifest = RunManifest::new("localize", args.seeds.first().copied().unwrap_or(0));
    manifest.seeds = args.seeds.clone();
    manifest.config = Some(bundle.config.clone());
    manifest.config_hash = Some(bundle.config.hash()?);
    manifest.inputs.insert("bundle".into(), args.bundle.display().to_string());
    manifest.inputs.insert("data".into(), args.data.display().to_string());
    manifest.extra.insert("episode".into(), args.episode.to_string());
    manifest.write(&out)?;
    for r in &records {
        println!(
            "episode {} seed {}: predicted {:?} (F1 {:.4})",
            r.episode, r.seed, r.predicted, r.metrics.f1
        );
    }
    Ok(())
}

fn strip_timing(rows: &mut [SweepResult]) {
    for row in rows.iter_mut() {
        row.fine_wall_secs = None;
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Error> {
    install_jobs(args.jobs);
    let bundle = load_trained(&resolve_path(&args.bundle))?;
    let dataset = load_dataset(&resolve_path(&args.data))?;
    let out = resolve_path(&args.out);
    let split = parse_split(&args.split)?;

    let mut rows: Vec<SweepResult> = Vec::new();
    for &seed in &args.seeds {
        if args.ablations {
            let mut table = run_ablations(&bundle, &dataset, split, args.total_steps, seed)?;
            rows.append(&mut table);
        } else {
            rows.push(evaluate_split(
                &bundle,
                &dataset,
                split,
                Variant::Full,
                bundle.config.stages,
                bundle.config.decode,
                seed,
            )?);
        }
    }
    if let Some(name) = &args.baseline {
        if name != "lpsi" {
            return Err(Error::InvalidParam(format!("unknown baseline '{name}'")));
        }
        let indices = dataset.indices(split);
        let mut per_episode = Vec::new();
        for idx in indices {
            let y: Vec<f64> = dataset.observation(idx);
            let truth: Vec<f64> = dataset.indicator(idx)?;
            let predicted = lpsi_baseline(&dataset.graph, &y, 0.3, 10_000)?;
            per_episode.push(compute_metrics(&predicted, &truth)?);
        }
        rows.push(SweepResult {
            id: "baseline_lpsi".into(),
            t1: 0,
            t2: 0,
            seed: 0,
            metrics: sldiff_core::eval::aggregate(&per_episode),
            per_episode,
            fine_wall_secs: None,
        });
    }
    if matches!(args.timing, TimingMode::None) {
        strip_timing(&mut rows);
    }
    let report = ResultsReport {
        config_hash: bundle.config.hash()?,
        master_seed: args.seeds.first().copied().unwrap_or(0),
        rows,
    };
    emit_results(&report, &out)?;
    let mut manifest = RunManifest::new("evaluate", report.master_seed);
    manifest.seeds = args.seeds.clone();
    manifest.config = Some(bundle.config.clone());
    manifest.config_hash = Some(bundle.config.hash()?);
    manifest.inputs.insert("bundle".into(), args.bundle.display().to_string());
    manifest.inputs.insert("data".into(), args.data.display().to_string());
    manifest.timing = match args.timing {
        TimingMode::Wall => "wall".into(),
        TimingMode::None => "none".into(),
    };
    manifest.extra.insert("split".into(), args.split.clone());
    manifest.extra.insert("ablations".into(), args.ablations.to_string());
    manifest.write(&out)?;
    for row in &report.rows {
        println!(
            "{}: F1 {:.4} ACC {:.4} (PR {:.4} RE {:.4})",
            row.id, row.metrics.f1, row.metrics.acc, row.metrics.pr, row.metrics.re
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), Error> {
    install_jobs(args.jobs);
    let bundle = load_trained(&resolve_path(&args.bundle))?;
    let dataset = load_dataset(&resolve_path(&args.data))?;
    let out = resolve_path(&args.out);

    let mut rows = Vec::new();
    for &seed in &args.seeds {
        let mut batch = sweep_ratio(
            &bundle,
            &dataset,
            Split::Test,
            &args.ratios,
            args.total_steps,
            seed,
        )?;
        rows.append(&mut batch);
    }
    if matches!(args.timing, TimingMode::None) {
        strip_timing(&mut rows);
    }
    let report = ResultsReport {
        config_hash: bundle.config.hash()?,
        master_seed: args.seeds.first().copied().unwrap_or(0),
        rows,
    };
    emit_results(&report, &out)?;
    let mut manifest = RunManifest::new("sweep", report.master_seed);
    manifest.seeds = args.seeds.clone();
    manifest.config = Some(bundle.config.clone());
    manifest.config_hash = Some(bundle.config.hash()?);
    manifest.inputs.insert("bundle".into(), args.bundle.display().to_string());
    manifest.inputs.insert("data".into(), args.data.display().to_string());
    manifest.timing = match args.timing {
        TimingMode::Wall => "wall".into(),
        TimingMode::None => "none".into(),
    };
    manifest
        .extra
        .insert("ratios".into(), args.ratios.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(","));
    manifest.extra.insert("total_steps".into(), args.total_steps.to_string());
    manifest.write(&out)?;
    for row in &report.rows {
        match row.fine_wall_secs {
            Some(secs) => println!(
                "{} (T1 {} / T2 {}): F1 {:.4}, fine stage {:.2}s",
                row.id, row.t1, row.t2, row.metrics.f1, secs
            ),
            None => println!("{} (T1 {} / T2 {}): F1 {:.4}", row.id, row.t1, row.t2, row.metrics.f1),
        }
    }
    Ok(())
}
