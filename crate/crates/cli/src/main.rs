//! `patconv`: pattern generation, pruning, reordering, FKW encoding, tuning,
//! execution and benchmarking from the command line.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use patconv::Error;

#[derive(Debug, Parser)]
#[command(
    name = "patconv",
    version,
    about = "Pattern-pruned sparse convolution toolkit"
)]
pub struct Cli {
    /// Seed for every random choice (toy task, synthetic layers, inputs, tuner).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the executor; 1 runs sequentially.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Directory receiving every artifact.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the Top-k natural pattern set of a network (the pretrained toy net by default).
    GenPatterns {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value = "patterns.json")]
        out: String,
    },
    /// ADMM pattern and connectivity pruning on the seeded toy task.
    Prune {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pattern set JSON; built from the model with --k when absent.
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 3.6)]
        rate: f64,
        #[arg(long, default_value_t = 1.0)]
        first_layer_rate: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 6)]
        finetune_epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-2)]
        rho: f64,
    },
    /// Dump the filter reorder plan of every conv layer as JSON.
    Reorder {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patterns: PathBuf,
        #[arg(long, default_value = "reorder.json")]
        out: String,
    },
    /// Encode every conv layer to FKW and write a layerwise manifest.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        patterns: PathBuf,
        #[arg(long, default_value = "model.lr.json")]
        manifest: String,
    },
    /// Expand an FKW file back to dense weights.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "decoded.ptk")]
        out: String,
        /// Also write the JSON dump of the FKW arrays.
        #[arg(long)]
        json: Option<String>,
    },
    /// Check any artifact this tool writes; manifests get a full schema check.
    Validate { path: PathBuf },
    /// Execute one FKW layer or a whole manifest.
    Run {
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Input feature map; a seeded random input is generated when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Execution config JSON overriding the defaults (or the manifest's).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stats: Option<String>,
        #[arg(long, default_value = "output.ptk")]
        out: String,
    },
    /// Search execution parameters for one FKW layer, or every layer of a manifest.
    Tune {
        #[arg(
            long,
            conflicts_with = "manifest",
            required_unless_present = "manifest"
        )]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = patconv::tune::DEFAULT_BUDGET)]
        budget: usize,
        /// Best config JSON, or the tuned manifest when --manifest is given.
        #[arg(long, default_value = "best.json")]
        out: String,
        #[arg(long, default_value = "history.csv")]
        history: String,
    },
    /// Ablation benchmark: dense, CSR, and FKW with optimizations added one at a time.
    Bench {
        /// Benchmark the layers of this manifest instead of a synthetic layer.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Synthetic layer as in,out,height,width.
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 32, 16, 16])]
        shape: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 3.6)]
        rate: f64,
        /// Pattern-set sizes to sweep on the synthetic layer.
        #[arg(long, value_delimiter = ',')]
        patterns: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 64)]
        budget: usize,
        #[arg(long, default_value = "bench")]
        out: String,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(_) => 4,
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn kind(err: &Error) -> &'static str {
    match err {
        Error::Shape(_) => "shape",
        Error::UnsupportedKernel { .. } => "unsupported_kernel",
        Error::EmptyInput(_) => "empty_input",
        Error::Parameter(_) => "parameter",
        Error::NonFinite(_) => "non_finite",
        Error::Divergence { .. } => "divergence",
        Error::Precondition(_) => "precondition",
        Error::Format { .. } => "format",
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

fn error_json(err: &Error) -> serde_json::Value {
    let mut v = serde_json::json!({
        "error": kind(err),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    });
    if let Error::Validation(violations) = err {
        v["violations"] = serde_json::to_value(violations).expect("violations serialize");
    }
    v
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
