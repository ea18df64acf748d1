//! `ldag`: fixtures, attributes, priors, training, evaluation, prediction and
//! ablation sweeps over the synthetic world or imported feature directories.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{Provider, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "ldag", version, about = "Few-shot segmentation with attribute priors")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Opts {
    /// Flat `key = value` config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    shots: Option<usize>,
    #[arg(long, global = true)]
    #[arg(allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// Number of attribute descriptions.
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    #[arg(allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long, global = true)]
    #[arg(allow_negative_numbers = true)]
    tau1: Option<f64>,
    #[arg(long, global = true)]
    #[arg(allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `toy` (synthetic world) or `files` (imported directory, needs --data).
    #[arg(long, global = true)]
    provider: Option<Provider>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Attribute fixture directory (default `<out>/fixtures` when it exists).
    #[arg(long, global = true)]
    fixtures: Option<PathBuf>,
    /// Never contact a chat endpoint.
    #[arg(long, global = true)]
    offline: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Alpha,
    N,
    Toggles,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic manifest, attribute fixtures and an episode directory.
    GenFixtures,
    /// Resolve and print the foreground and background prompts of a class.
    Attributes {
        #[arg(long)]
        class: String,
    },
    /// Write the prior maps and scores of one test episode.
    Prior {
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Train on the fold's training classes and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on the fold's test classes.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict one test episode with a checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
    /// Train and evaluate one configuration per sweep cell.
    Ablate {
        #[arg(long, value_enum, default_value = "all")]
        sweep: Sweep,
        /// Run every cell on all four folds and report their mean.
        #[arg(long)]
        all_folds: bool,
    },
}

impl Opts {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        put("fold", self.fold.map(|v| v.to_string()));
        put("shots", self.shots.map(|v| v.to_string()));
        put("alpha", self.alpha.map(|v| v.to_string()));
        put("n", self.n.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("tau1", self.tau1.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("provider", self.provider.map(|v| v.to_string()));
        put("data", self.data.as_ref().map(|p| p.display().to_string()));
        put("fixtures", self.fixtures.as_ref().map(|p| p.display().to_string()));
        put("threads", self.threads.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        if self.offline {
            put("offline", Some("true".into()));
        }
        kv
    }

    /// Defaults, then `base` (a checkpoint's config), then the file, then flags.
    fn resolve(&self, base: Option<&serde_json::Value>) -> Result<RunConfig, UsageError> {
        let mut cfg = RunConfig::default();
        if let Some(v) = base {
            cfg.train = serde_json::from_value(v.clone())
                .map_err(|e| UsageError(format!("checkpoint config is unreadable: {e}")))?;
        }
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.overrides() {
            cfg.set(k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let opts = &cli.opts;
    let threads = opts.resolve(None)?.threads;
    let work = || -> anyhow::Result<()> {
        match cli.command {
            Command::GenFixtures => commands::gen_fixtures(&opts.resolve(None)?, opts.force),
            Command::Attributes { ref class } => commands::attributes(&opts.resolve(None)?, class),
            Command::Prior { episode } => commands::prior(&opts.resolve(None)?, episode),
            Command::Train => commands::train(&opts.resolve(None)?),
            Command::Eval { ref checkpoint } => commands::eval(opts, checkpoint.as_deref()),
            Command::Predict { ref checkpoint, episode } => commands::predict(opts, checkpoint.as_deref(), episode),
            Command::Ablate { sweep, all_folds } => commands::ablate(&opts.resolve(None)?, sweep, all_folds),
        }
    };
    ldag_core::exec::with_threads(threads, work)?
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}
