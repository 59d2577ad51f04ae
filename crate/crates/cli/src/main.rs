use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use corrmix::eval::{evaluate, inspect_pair, Hd95Mode};
use corrmix::synthdata::{gen_dataset, Dataset, DomainFilter, DomainSpec, GenConfig};
use corrmix::trainer::{load_checkpoint, run_training, Pools, RunOptions, TrainConfig, CHECKPOINT_DIR};

#[derive(Parser)]
#[command(name = "corrmix", version, about = "Mixed-domain semi-supervised segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData(GenDataArgs),
    /// Train a model and write history.csv plus a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Dump correlation maps and mixed training views as PGM images.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    train_per_domain: usize,
    #[arg(long, default_value_t = 50)]
    test_per_domain: usize,
    #[arg(long, default_value_t = 0)]
    labeled_domain: u32,
    #[arg(long, default_value_t = 10)]
    labeled_count: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value file; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set t_max=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one domain, e.g. `id==1`.
    #[arg(long)]
    domain: Option<String>,
    /// Write the report CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Take the 95th percentile over both directions' distances together.
    #[arg(long)]
    pooled_hd95: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Index into the labeled training pool.
    #[arg(long, default_value_t = 0)]
    labeled: usize,
    /// Index into the unlabeled training pool.
    #[arg(long, default_value_t = 0)]
    unlabeled: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Failures that are the caller's fault rather than the run's.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    let nested = p.join(CHECKPOINT_DIR);
    if nested.is_dir() {
        nested
    } else {
        p.to_path_buf()
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let cfg = GenConfig {
        h: a.size,
        w: a.size,
        classes: a.classes,
        train_per_domain: a.train_per_domain,
        test_per_domain: a.test_per_domain,
        labeled_domain: a.labeled_domain,
        labeled_count: a.labeled_count,
        seed: a.seed,
    };
    let entries = gen_dataset(&DomainSpec::presets(), &cfg, &a.out)?;
    println!("wrote {} samples to {}", entries.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) if !p.is_file() => return Err(usage(format!("config file {} not found", p.display()))),
        Some(p) => TrainConfig::load(p).map_err(|e| usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    let opts = RunOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume.as_deref().map(checkpoint_dir),
        stop_at: a.stop_at,
    };
    let state = run_training(&cfg, &a.data, &opts)?;
    if let Some(last) = state.history.last() {
        info!("finished at t={} total={:.4}", state.t, last.total);
    }
    println!("trained {} iterations; output in {}", state.t, a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let filter = a
        .domain
        .as_deref()
        .map(str::parse::<DomainFilter>)
        .transpose()
        .map_err(|e| usage(e.to_string()))?;
    let ck = load_checkpoint(&checkpoint_dir(&a.checkpoint))?;
    let ds = Dataset::open(&a.data)?.filtered(filter);
    let mode = if a.pooled_hd95 { Hd95Mode::Pooled } else { Hd95Mode::Directed };
    let report = evaluate(&ck.state.student, &ck.cfg, &ds, mode)?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn inspect(a: InspectArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&checkpoint_dir(&a.checkpoint))?;
    let pools = Pools::from_dataset(&Dataset::open(&a.data)?)?;
    let Some(x) = pools.labeled.get(a.labeled) else {
        bail!("labeled index {} out of range ({} available)", a.labeled, pools.labeled.len());
    };
    let Some(u) = pools.unlabeled.get(a.unlabeled) else {
        bail!("unlabeled index {} out of range ({} available)", a.unlabeled, pools.unlabeled.len());
    };
    let files = inspect_pair(&ck.state, &ck.cfg, x, u, &a.out)?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
