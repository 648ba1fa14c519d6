//! Command-line operator surface.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "sc-calib", version, about = "Training-free calibration of ViT features for open-vocabulary segmentation")]
pub struct Cli {
    /// Worker threads; defaults to SC_CALIB_THREADS, then the number of CPUs.
    #[arg(long, global = true, env = "SC_CALIB_THREADS")]
    pub jobs: Option<usize>,

    /// Canonical-order reductions everywhere (always the case; accepted for scripts).
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a label PNG per input image.
    Segment(RunArgs),
    /// mIoU over a labelled dataset.
    Evaluate(RunArgs),
    /// Evaluate each rung of a cumulative stage ladder.
    Ablate(RunArgs),
    /// Semantic-coherence AUC per layer.
    Coherence {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated 1-based layers.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Report anomalous tokens in the penultimate layer.
    InspectAnomalies(RunArgs),
    /// Generate toy weights, a text bank, a labelled dataset and a config.
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, value_delimiter = ',', default_value = "sky,grass,road")]
        categories: Vec<String>,
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub text_bank: Option<PathBuf>,
    /// Single input image.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Dataset image directory.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Dataset label directory.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override any config value, e.g. `pipeline.stages.fusion=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self, layers: Option<Vec<usize>>) -> Result<RunConfig> {
        let overrides = Overrides {
            weights: self.weights.clone(),
            text_bank: self.text_bank.clone(),
            input: self.input.clone(),
            images: self.images.clone(),
            labels: self.labels.clone(),
            output_dir: self.output_dir.clone(),
            seed: self.seed,
            layers,
            set: self.set.clone(),
        };
        RunConfig::resolve(self.config.as_deref(), &overrides)
    }
}

/// Process exit code for an error category.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Io { .. } => 2,
        Error::Parameter(_) => 3,
        Error::Shape(_) => 4,
        Error::Data(_) => 5,
        Error::Format(_) => 6,
        Error::Image { .. } => 7,
    }
}

fn dispatch(command: Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::Segment(a) => commands::segment(&a.resolve(None)?),
        Command::Evaluate(a) => commands::evaluate(&a.resolve(None)?),
        Command::Ablate(a) => commands::ablate(&a.resolve(None)?),
        Command::Coherence { run, layers } => commands::coherence(&run.resolve(layers)?),
        Command::InspectAnomalies(a) => commands::inspect_anomalies(&a.resolve(None)?),
        Command::MakeToy {
            out,
            depth,
            categories,
            images,
            seed,
        } => commands::make_toy(
            &out,
            &commands::ToySpec {
                depth,
                categories,
                images,
                seed,
            },
        ),
    }
}

/// Parses arguments, runs the command on a pool of the requested size and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: category=config: --jobs must be positive");
            return 2;
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: category=config: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: category={}: {e}", e.category());
            exit_code(&e)
        }
    }
}
