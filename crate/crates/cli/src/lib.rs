//! The `visenc` command-line tool.
//!
//! [`run`] is the whole binary: parse arguments, load the run config, apply
//! flag overrides, execute one subcommand and write `summary.json`. It returns
//! the process exit code (0 success, 1 invalid input, 2 runtime failure).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

pub mod commands;
pub mod config;

pub use commands::Failure;
pub use config::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "visenc", version, about = "Voxel-wise encoding models: training, evaluation and attention analysis")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (split, init, shuffling, search, synthesis).
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dataset root in the standard layout.
    #[arg(long, global = true, value_name = "DIR")]
    pub dataset: Option<PathBuf>,
    /// Encoder checkpoint directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Split file from a previous `train`.
    #[arg(long, global = true, value_name = "PATH")]
    pub split: Option<PathBuf>,
    /// Attention-map directory from a previous `cam`.
    #[arg(long, global = true, value_name = "DIR")]
    pub maps: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset into the output directory.
    #[command(after_help = "Exit 1: invalid synth settings, unwritable output directory.\n\
                            Exit 2: generation or write failure.")]
    Synth,
    /// Train an encoder; writes split.json, checkpoint/ and train_report.json.
    #[command(after_help = "Exit 1: missing dataset files, malformed inputs, invalid encoder or training settings, \
                            bad split file.\nExit 2: non-finite loss, write failure.")]
    Train,
    /// Hyperparameter search; writes trials.jsonl (resumed if present) and best.json.
    #[command(after_help = "Exit 1: missing dataset files, invalid or unknown search dimensions, zero budget, \
                            unreadable trials.jsonl.\nExit 2: every trial failed, write failure.")]
    Tune,
    /// Noise-normalized accuracy of a checkpoint, overall and per region.
    #[command(after_help = "Exit 1: missing dataset, atlas or checkpoint; checkpoint does not fit the dataset.\n\
                            Exit 2: every voxel has a zero noise ceiling, write failure.")]
    Eval,
    /// ScoreCAM attention maps per region; writes maps/<region>/<id>.visf and .pgm.
    #[command(after_help = "Exit 1: missing dataset, images, atlas or checkpoint; unknown region; \
                            dataset features come from an external model.\nExit 2: extraction or write failure.")]
    Cam,
    /// KL similarity between an anchor region's maps and a near and far region.
    #[command(after_help = "Exit 1: no maps directory, missing region maps, regions share no images.\n\
                            Exit 2: write failure.")]
    Kl,
    /// Functional probability of a region's maps against object masks.
    #[command(after_help = "Exit 1: no maps or masks directory, no map with a matching mask.\n\
                            Exit 2: every mask is empty or full, write failure.")]
    Pf,
    /// PCA of condensed features with silhouette by supercategory.
    #[command(after_help = "Exit 1: missing dataset or checkpoint, stimuli without supercategory labels.\n\
                            Exit 2: degenerate features, write failure.")]
    Embed,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Tune => "tune",
            Command::Eval => "eval",
            Command::Cam => "cam",
            Command::Kl => "kl",
            Command::Pf => "pf",
            Command::Embed => "embed",
        }
    }

    pub fn execute(self, cfg: &RunConfig) -> commands::Outcome {
        match self {
            Command::Synth => commands::cmd_synth(cfg),
            Command::Train => commands::cmd_train(cfg),
            Command::Tune => commands::cmd_tune(cfg),
            Command::Eval => commands::cmd_eval(cfg),
            Command::Cam => commands::cmd_cam(cfg),
            Command::Kl => commands::cmd_kl(cfg),
            Command::Pf => commands::cmd_pf(cfg),
            Command::Embed => commands::cmd_embed(cfg),
        }
    }
}

/// Wall-clock fields, kept apart so the rest of the summary is reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct Timestamp {
    pub started_unix_secs: u64,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub command: &'static str,
    pub seed: u64,
    pub result: Value,
    pub timestamp: Timestamp,
}

impl Cli {
    /// The config file with flag overrides applied.
    pub fn resolve_config(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(Failure::Invalid)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        for (slot, flag) in [
            (&mut cfg.dataset, &self.dataset),
            (&mut cfg.checkpoint, &self.checkpoint),
            (&mut cfg.split, &self.split),
            (&mut cfg.maps, &self.maps),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        cfg.propagate_seed();
        Ok(cfg)
    }
}

fn write_summary(out: &Path, summary: &Summary) -> Result<(), Failure> {
    let path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

/// Runs one command with a resolved config and writes its summary.
pub fn execute(command: Command, cfg: &RunConfig, threads: Option<usize>) -> Result<Summary, Failure> {
    let pool = match threads {
        Some(0) => return Err(Failure::Invalid("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Failure::Runtime(e.to_string()))?;

    let started_unix_secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let result = pool.install(|| command.execute(cfg))?;
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        command: command.name(),
        seed: cfg.seed,
        result,
        timestamp: Timestamp {
            started_unix_secs,
            wall_time_secs: clock.elapsed().as_secs_f64(),
        },
    };
    write_summary(&cfg.out, &summary)?;
    Ok(summary)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let outcome = cli
        .resolve_config()
        .and_then(|cfg| execute(cli.command, &cfg, cli.threads));
    match outcome {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("visenc {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
