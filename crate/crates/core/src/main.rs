use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spikekit::architecture::StemKind;
use spikekit::attention::AttentionVariant;
use spikekit::harness::{execute, sweep, RunConfig, SweepAxis, Task};
use spikekit::{Error, Result};

#[derive(Parser)]
#[command(name = "spikekit", version, about = "Train, pretrain, evaluate and profile spiking transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training from scratch.
    Train(Common),
    /// Masked-image pretraining of an SCS encoder.
    Pretrain(Common),
    /// Supervised training starting from a pretrained encoder.
    Finetune(Common),
    /// Accuracy of a checkpoint, once per time-step count.
    Eval(Common),
    /// Per-layer op counts and energy for one input.
    Profile(Common),
    /// Original / masked / reconstructed image triplets from a pretraining checkpoint.
    Reconstruct(Common),
    /// One run per value along an ablation axis.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated list, e.g. 1,2,4.
    #[arg(long, value_delimiter = ',')]
    time_steps: Option<Vec<usize>>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    stem: Option<String>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shorthand `spikformer-L-D`.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// variant, stem, time_steps or mask_ratio.
    #[arg(long)]
    axis: String,
    /// Comma-separated values along the axis.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
}

fn build_config(task: Task, a: &Common) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.task = task;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(name) = &a.model {
        cfg.model.set_name(name)?;
    }
    if let Some(v) = &a.variant {
        cfg.model.variant = AttentionVariant::parse(v).map_err(|e| Error::Usage(e.to_string()))?;
    }
    if let Some(s) = &a.stem {
        cfg.model.stem = StemKind::parse(s).map_err(|e| Error::Usage(e.to_string()))?;
    }
    if let Some(r) = a.mask_ratio {
        cfg.pretrain.mask_ratio = r;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = a.epochs {
        match task {
            Task::Pretrain => cfg.pretrain.epochs = e,
            _ => cfg.train.epochs = e,
        }
    }
    if let Some(c) = &a.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(ts) = &a.time_steps {
        if ts.is_empty() || ts.contains(&0) {
            return Err(Error::Usage("--time-steps needs positive counts".into()));
        }
        match task {
            Task::Eval => cfg.eval_time_steps = ts.clone(),
            Task::Pretrain => cfg.pretrain.time_steps = ts[0],
            _ => cfg.model.time_steps = ts[0],
        }
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SPIKEKIT_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Usage(format!("SPIKEKIT_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut out = io::stdout().lock();
    let (task, common) = match &cli.command {
        Command::Train(c) => (Task::Train, c),
        Command::Pretrain(c) => (Task::Pretrain, c),
        Command::Finetune(c) => (Task::Finetune, c),
        Command::Eval(c) => (Task::Eval, c),
        Command::Profile(c) => (Task::Profile, c),
        Command::Reconstruct(c) => (Task::Reconstruct, c),
        Command::Sweep(s) => {
            let axis = SweepAxis::parse(&s.axis)?;
            let base = build_config(Task::Train, &s.common)?;
            let report = sweep(axis, &s.values, &base, |r| {
                let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("failed: {e}"));
                let _ = writeln!(io::stderr(), "{}={}: {status}", axis.as_str(), r.value);
            });
            let dir = base.run_dir();
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("config.toml"), base.to_toml())?;
            fs::write(dir.join("sweep.tsv"), report.to_tsv())?;
            out.write_all(report.to_tsv().as_bytes())?;
            return Ok(());
        }
    };
    let cfg = build_config(task, common)?;
    execute(&cfg, &mut out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spikekit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
