use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mpcq::pipeline::{self, EvalArgs, FsSource, PipelineError, RunConfig, SweepArgs};

#[derive(Parser)]
#[command(
    name = "mpcq",
    version,
    about = "Data-free mixed-precision quantization with channel compensation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Full-precision tensor archive.
    #[arg(long)]
    model: PathBuf,
    /// Graph document.
    #[arg(long)]
    graph: PathBuf,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    low_bits: u32,
    #[arg(long, default_value_t = 6)]
    high_bits: u32,
    #[arg(long, default_value_t = 0.5)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian probe count when no --data is given.
    #[arg(long, default_value_t = 32)]
    probes: usize,
    /// Worker threads (default: number of cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl Common {
    fn config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            graph: self.graph.clone(),
            out: self.out.clone(),
            low_bits: self.low_bits,
            high_bits: self.high_bits,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            seed: self.seed,
            probes: self.probes,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Quantize a model and write the archive plus a per-pair report.
    Quantize {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction error (and top-1) over a grid of regularization weights.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// start:end:step
        #[arg(long, default_value = "0.5")]
        lambda1_range: String,
        /// start:end:step
        #[arg(long, default_value = "0")]
        lambda2_range: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Histogram of a high-bit layer's weights with and without compensation.
    Hist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = 64)]
        bins: usize,
    },
    /// Compare quantized models against full precision.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Evaluate this quantized archive instead of quantizing in memory.
        #[arg(long)]
        quantized: Option<PathBuf>,
    },
    /// Model size at full precision and under the mixed-precision plan.
    Size {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Quantize { common }
            | Command::Sweep { common, .. }
            | Command::Hist { common, .. }
            | Command::Eval { common, .. }
            | Command::Size { common } => common,
        }
    }
}

fn run(cmd: &Command) -> Result<String, PipelineError> {
    let src = FsSource;
    let cfg = cmd.common().config();
    match cmd {
        Command::Quantize { .. } => pipeline::cmd_quantize(&src, &cfg),
        Command::Sweep {
            lambda1_range,
            lambda2_range,
            data,
            labels,
            ..
        } => {
            let args = SweepArgs {
                lambda1: pipeline::parse_range(lambda1_range)?,
                lambda2: pipeline::parse_range(lambda2_range)?,
                data: data.clone(),
                labels: labels.clone(),
            };
            pipeline::cmd_sweep(&src, &cfg, &args)
        }
        Command::Hist { layer, bins, .. } => pipeline::cmd_hist(&src, &cfg, layer, *bins),
        Command::Eval {
            data,
            labels,
            quantized,
            ..
        } => {
            let args = EvalArgs {
                data: data.clone(),
                labels: labels.clone(),
                quantized: quantized.clone(),
            };
            pipeline::cmd_eval(&src, &cfg, &args)
        }
        Command::Size { .. } => pipeline::cmd_size(&src, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = cli.command.common().jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        builder = builder.num_threads(jobs);
    }
    let pool = match builder.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| run(&cli.command)) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
