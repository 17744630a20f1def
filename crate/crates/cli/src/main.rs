use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod inspect;
mod train;

#[derive(Parser)]
#[command(name = "capsnet", version, about = "Train and probe capsule networks with dynamic routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on MNIST, translated MNIST or MultiMNIST composites.
    Train(train::TrainArgs),
    /// Report test error for a checkpoint.
    Eval(inspect::EvalArgs),
    /// Generate a MultiMNIST file from one MNIST split.
    GenMultimnist(inspect::GenArgs),
    /// Decode one digit with each activity dimension nudged.
    Perturb(inspect::PerturbArgs),
    /// Mean routing-logit change per iteration.
    RoutingDiag(inspect::DiagArgs),
    /// Split an overlapping-digit composite into its two digits.
    Segment(inspect::SegmentArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for capsnet::data::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Self::Train,
            SplitArg::Test => Self::Test,
        }
    }
}

/// Worker threads; 1 keeps everything on the calling thread.
#[derive(Args, Clone, Debug)]
pub struct Threads {
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

impl Threads {
    /// Configures the global pool; returns whether to fan out work.
    pub fn install(&self) -> anyhow::Result<bool> {
        if self.threads == 0 {
            anyhow::bail!("--threads must be at least 1");
        }
        if self.threads > 1 {
            rayon::ThreadPoolBuilder::new().num_threads(self.threads).build_global()?;
        }
        Ok(self.threads > 1)
    }
}

/// MNIST location for commands where `--data-dir` is optional.
pub fn default_data_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train::run(a),
        Command::Eval(a) => inspect::eval(a),
        Command::GenMultimnist(a) => inspect::gen_multimnist(a),
        Command::Perturb(a) => inspect::perturb(a),
        Command::RoutingDiag(a) => inspect::routing_diag(a),
        Command::Segment(a) => inspect::segment(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
