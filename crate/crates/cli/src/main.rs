use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mvad_core::checks;
use mvad_core::config::{ProviderKind, RunConfig};
use mvad_core::error::{Error, Result};
use mvad_core::manifest::{load_manifest, Manifest};
use mvad_core::pipeline;

/// Multi-view zero-shot 3D anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "mvad", version)]
struct Cli {
    /// TOML run configuration. Missing keys take their defaults.
    #[arg(long, global = true, env = "MVAD_CONFIG")]
    config: Option<PathBuf>,

    /// Worker threads for per-cloud work (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Optimizer seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Feature provider: mock, files or planted.
    #[arg(long, global = true)]
    provider: Option<ProviderKind>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Io {
    /// Dataset manifest (falls back to paths.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,

    /// Output directory (falls back to paths.output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render every cloud in the manifest to view directories.
    Render(Io),
    /// Learn prompts on the train split.
    Train {
        #[command(flatten)]
        io: Io,
        /// Checkpoint directory to start from instead of random prompts.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the test split with a checkpoint.
    Infer {
        #[command(flatten)]
        io: Io,
        /// Checkpoint directory holding normal.padf and abnormal.padf
        /// (falls back to paths.checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute metrics from infer output.
    Eval {
        #[command(flatten)]
        io: Io,
        /// Directory written by infer (defaults to --out).
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run the oracle checks at a small size.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.optimizer.seed = s;
    }
    if let Some(k) = cli.provider {
        cfg.provider.kind = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| Error::validation(format!("no {what} given (pass --{what} or set it under [paths])")))
}

fn resolve_io(io: &Io, cfg: &RunConfig) -> Result<(Manifest, PathBuf)> {
    let manifest = required(io.manifest.as_ref(), cfg.paths.manifest.as_ref(), "manifest")?;
    let out = required(io.out.as_ref(), cfg.paths.output.as_ref(), "out")?;
    Ok((load_manifest(manifest)?, out))
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Selftest = cli.command {
        let seed = cli.seed.unwrap_or(0);
        let results = checks::quick_suite(seed);
        for r in &results {
            println!("{r}");
        }
        let failed = results.iter().filter(|r| !r.passed).count();
        if failed > 0 {
            return Err(Error::Numeric(format!("{failed} self-test check(s) failed")));
        }
        println!("all {} checks passed", results.len());
        return Ok(());
    }

    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Render(io) => {
            let (m, out) = resolve_io(io, &cfg)?;
            let n = pipeline::cmd_render(&m, &cfg, &out)?;
            println!("rendered {n} clouds into {}", out.join(pipeline::RENDER_DIR).display());
        }
        Command::Train { io, checkpoint } => {
            let (m, out) = resolve_io(io, &cfg)?;
            let outcome = pipeline::cmd_train(&m, &cfg, &out, checkpoint.as_deref())?;
            if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
                println!("loss {:.6} -> {:.6} over {} epochs", first.total, last.total, outcome.history.len());
            }
            println!("checkpoint written to {}", pipeline::checkpoint_dir(&out).display());
        }
        Command::Infer { io, checkpoint } => {
            let (m, out) = resolve_io(io, &cfg)?;
            let ckpt = required(checkpoint.as_ref(), cfg.paths.checkpoint.as_ref(), "checkpoint")?;
            let summaries = pipeline::cmd_infer(&m, &cfg, &out, &ckpt)?;
            println!("scored {} clouds into {}", summaries.len(), out.join(pipeline::SCORES_DIR).display());
        }
        Command::Eval { io, scores } => {
            let (m, out) = resolve_io(io, &cfg)?;
            let scores = scores.clone().unwrap_or_else(|| out.clone());
            let report = pipeline::cmd_eval(&m, &cfg, Path::new(&scores), &out)?;
            print!("{}", report.to_json());
        }
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
