use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use st_graphormer::eval::Variant;
use st_graphormer::Error;
use st_graphormer_cli::{cmd_ablate, cmd_attend, cmd_eval, cmd_prepare, cmd_synth, cmd_train, exit_code, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Synth,
    Prepare,
    Train,
    Eval,
    Attend,
    Ablate,
}

/// Spatiotemporal graph transformer for sensor-network forecasting.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    command: Command,
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume training from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint for `eval` and `attend` (default: the best one under `<out>/train`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Split for `eval` and `attend`: train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Windows traced by `attend`.
    #[arg(long)]
    num_samples: Option<usize>,
    /// Also write one heatmap per layer.
    #[arg(long)]
    per_layer: bool,
    /// Ablation variant, e.g. no_positional or token_none.
    #[arg(long)]
    ablate: Option<String>,
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    if let Some(split) = &cli.split {
        cfg.eval_split = split.clone();
    }
    if let Some(n) = cli.num_samples {
        cfg.num_samples = n;
    }
    cfg.validate()?;
    let ablate = cli.ablate.as_deref().map(str::parse::<Variant>).transpose()?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Prepare => cmd_prepare(&cfg).map(drop),
        Command::Train => cmd_train(&cfg, ablate, cli.resume.as_deref()),
        Command::Eval => cmd_eval(&cfg, cli.checkpoint.as_deref()).map(drop),
        Command::Attend => cmd_attend(&cfg, cli.checkpoint.as_deref(), cli.per_layer),
        Command::Ablate => cmd_ablate(&cfg, ablate).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(threads) = std::env::var("ST_GRAPHORMER_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
