use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use stworld_cli::commands::{self, RolloutArgs, TrainOptions};
use stworld_cli::config::{resolve_seed, RunConfig};
use stworld_cli::serve::{serve, ServeState};

#[derive(Parser)]
#[command(name = "stworld", version, about = "Train, roll out and serve the stworld driving world model")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, env = "DW_SEED")]
    seed: Option<u64>,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set model.d_model=64`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .dwep episodes.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write (and to resume from with --resume).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    resume: bool,
    /// Stop after this many steps in this invocation.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Args)]
struct ModelPaths {
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    world: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic episodes as ep_{seed}_{index}.dwep.
    GenData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
    },
    TrainTokenizer {
        #[command(flatten)]
        train: TrainArgs,
    },
    TrainWorld {
        #[command(flatten)]
        train: TrainArgs,
        /// Tokenizer checkpoint used to encode the episodes.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        no_masking: bool,
        #[arg(long)]
        no_balanced: bool,
        #[arg(long)]
        no_internal_ar: bool,
        #[arg(long)]
        no_qk_norm: bool,
        /// Train the flat single-sequence baseline instead.
        #[arg(long)]
        vanilla: bool,
    },
    /// Generate future frames from the start of an episode.
    Rollout {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        steps: usize,
        /// JSON list of per-step [dtheta, dx, dy]; null leaves a step free.
        #[arg(long)]
        controls: Option<PathBuf>,
        #[arg(long)]
        seed_frames: Option<usize>,
        #[arg(long)]
        scene_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the drift report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Held-out losses, next-frame accuracy and reconstruction quality.
    Eval {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        targets: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention cost of both model variants over context lengths.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 10, 15])]
        frames: Vec<usize>,
        #[arg(long)]
        measure_memory: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve steering sessions over TCP.
    Serve {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long)]
        seed_frames: Option<usize>,
    },
}

fn train_options(t: &TrainArgs, flags: Vec<String>) -> TrainOptions {
    TrainOptions {
        out: t.out.clone(),
        metrics: t.metrics.clone(),
        resume: t.resume,
        max_steps: t.max_steps,
        checkpoint_every: t.checkpoint_every,
        flags,
    }
}

fn emit(out: Option<&Path>, json: String) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, json).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    let mut flags = Vec::new();
    if let Command::TrainWorld { no_masking, no_balanced, no_internal_ar, no_qk_norm, vanilla, .. } = &cli.command {
        for (on, flag, set) in [
            (*no_masking, "--no-masking", "model.masking.enabled=false"),
            (*no_balanced, "--no-balanced", "model.balanced.enabled=false"),
            (*no_internal_ar, "--no-internal-ar", "model.internal_ar=false"),
            (*no_qk_norm, "--no-qk-norm", "model.qk_norm=false"),
            (*vanilla, "--vanilla", "model.variant=\"vanilla\""),
        ] {
            if on {
                flags.push(flag.to_string());
                overrides.push(set.to_string());
            }
        }
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let seed = resolve_seed(cli.seed, &cfg);
    match &cli.command {
        Command::GenData { count, length, out } => {
            let files = commands::gen_data(&cfg, seed, *count, *length, out)?;
            log::info!("wrote {} episodes to {}", files.len(), out.display());
        }
        Command::TrainTokenizer { train } => {
            let s = commands::train_tokenizer(&cfg, seed, train.data.as_deref(), &train_options(train, Vec::new()))?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::TrainWorld { train, tokenizer, .. } => {
            let opts = train_options(train, flags);
            let s = commands::train_world(&cfg, seed, train.data.as_deref(), tokenizer.as_deref(), &opts)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Rollout { models, episode, steps, controls, seed_frames, scene_seed, out, report } => {
            let tok = commands::load_tokenizer(&models.tokenizer)?;
            let model = commands::load_world(&models.world)?;
            let args = RolloutArgs {
                episode: episode.clone(),
                steps: *steps,
                controls: controls.clone(),
                seed_frames: *seed_frames,
                scene_seed: *scene_seed,
                out: out.clone(),
                report: report.clone(),
            };
            let outcome = commands::rollout(&cfg, seed, &tok, &model, &args)?;
            if report.is_none() {
                if let Some(r) = &outcome.report {
                    println!("{}", serde_json::to_string_pretty(r)?);
                }
            }
        }
        Command::Eval { models, data, targets, out } => {
            let tok = commands::load_tokenizer(&models.tokenizer)?;
            let model = commands::load_world(&models.world)?;
            let r = commands::eval(&cfg, seed, &tok, &model, data.as_deref(), *targets)?;
            emit(out.as_deref(), serde_json::to_string_pretty(&r)?)?;
        }
        Command::Bench { frames, measure_memory, out } => {
            let r = commands::bench(&cfg, frames, *measure_memory)?;
            emit(out.as_deref(), serde_json::to_string_pretty(&r)?)?;
        }
        Command::Serve { models, bind, seed_frames } => {
            let tokenizer = commands::load_tokenizer(&models.tokenizer)?;
            let model = commands::load_world(&models.world)?;
            stworld_cli::config::check_model_fits_tokenizer(&model.config, &tokenizer.config)?;
            let seed_frames = seed_frames.unwrap_or(model.config.ctx_frames);
            let state = ServeState {
                tokenizer,
                model,
                world: cfg.world.clone(),
                sampling: cfg.sampling,
                seed_frames,
                base_seed: seed,
            };
            let listener = TcpListener::bind(bind).with_context(|| format!("binding {bind}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve(listener, Arc::new(state))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
