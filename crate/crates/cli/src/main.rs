mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{keys_help, RunConfig};
use glad_core::GladError;

/// Generative language-assisted tracker: train, track, evaluate, analyze.
#[derive(Debug, Parser)]
#[command(name = "glad", version, after_help = keys_help())]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra assignment, applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (relative paths go under $GLAD_OUTPUT_ROOT when set).
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "pooled|modulation|concat")]
    pub fusion_mode: Option<String>,
    /// Comma-separated U-Net submodule indices.
    #[arg(long, global = true, value_name = "LIST")]
    pub diffusion_taps: Option<String>,
    #[arg(long, global = true)]
    pub hann_weight: Option<f64>,
    /// Update the diffusion stack together with the tracker.
    #[arg(long, global = true)]
    pub finetune_diffusion: bool,
    /// Use generated sequences instead of `data.root`.
    #[arg(long, global = true)]
    pub synthetic: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the diffusion stack if needed, then train the tracker.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (and checkpoint) after this many optimizer steps.
        #[arg(long)]
        until_step: Option<usize>,
    },
    /// Track one sequence directory, or every sequence under a dataset root.
    Track {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sequence: PathBuf,
    },
    /// Score result files against a dataset.
    Eval {
        /// Directory of `<sequence>.txt` result files [default: <output>/results].
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Template-semantics analysis of a dataset.
    Analyze {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "stub", value_name = "stub|palette")]
        backend: String,
        /// Also run the degradation study.
        #[arg(long)]
        degrade: bool,
    },
    /// Text-guided restoration of a template image.
    Inpaint {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 4)]
        steps: usize,
    },
    /// Success and precision curves from an eval report.
    Plot {
        /// `report.json` written by `eval`.
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the resolved configuration as `key = value` lines.
    Config,
    /// Write synthetic sequences in the dataset layout.
    Synth {
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
}

/// Failure classes, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<GladError> for CliError {
    fn from(e: GladError) -> Self {
        if e.is_config_error() {
            CliError::Usage(e.to_string())
        } else if e.is_data_error() {
            CliError::Data(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn resolve_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p).map_err(CliError::Usage)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for s in &g.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(s) = g.seed {
        pairs.push(("seed".into(), s.to_string()));
    }
    if let Some(d) = &g.output_dir {
        pairs.push(("output.dir".into(), d.display().to_string()));
    }
    if let Some(m) = &g.fusion_mode {
        pairs.push(("fusion.mode".into(), m.clone()));
    }
    if let Some(t) = &g.diffusion_taps {
        pairs.push(("diffusion.taps".into(), t.clone()));
    }
    if let Some(h) = g.hann_weight {
        pairs.push(("head.hann_weight".into(), h.to_string()));
    }
    if g.finetune_diffusion {
        pairs.push(("train.finetune_diffusion".into(), "true".into()));
    }
    cfg.apply(&pairs).map_err(CliError::Usage)?;
    cfg.finish().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    let synthetic = cli.global.synthetic;
    match cli.command {
        Command::Train { resume, until_step } => {
            commands::train(&cfg, synthetic, resume.as_deref(), until_step)
        }
        Command::Track {
            checkpoint,
            sequence,
        } => commands::track(&cfg, checkpoint.as_deref(), &sequence),
        Command::Eval { results, dataset } => {
            commands::eval(&cfg, results.as_deref(), dataset.as_deref())
        }
        Command::Analyze {
            dataset,
            backend,
            degrade,
        } => commands::analyze(&cfg, synthetic, dataset.as_deref(), &backend, degrade),
        Command::Inpaint {
            checkpoint,
            template,
            text,
            steps,
        } => commands::inpaint(&cfg, checkpoint.as_deref(), &template, &text, steps),
        Command::Plot { report } => commands::plot(&cfg, &report),
        Command::Config => commands::show_config(&cfg),
        Command::Synth { count, first_seed } => commands::synth(&cfg, count, first_seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
