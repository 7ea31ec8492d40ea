//! Pipeline driver for the slimdet compression toolkit.

mod config;
mod manifest;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Overrides, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "slimdet",
    about = "Three-stage compression for small detection networks: \
             sparse training, group channel pruning, attention distilling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    /// Pipeline configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run directory for artifacts
    #[arg(long)]
    out: PathBuf,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Graph descriptor override
    #[arg(long)]
    graph: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the run directory
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the base model from seeded initialization
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Start from an existing weight file instead of random init
        #[arg(long)]
        weights: Option<String>,
    },
    /// Sparse-train the batch-norm scale factors (from base.wts)
    Sparse {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        weights: Option<String>,
        /// Initial sparse rate override
        #[arg(long)]
        sparse_rate: Option<f64>,
    },
    /// Group channel pruning with voted shortcut masks (from sparse.wts)
    Prune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        weights: Option<String>,
        /// Total prune ratio override
        #[arg(long)]
        total_prune_ratio: Option<f64>,
    },
    /// Distill the pruned student against the frozen teacher
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Temperature override
        #[arg(long)]
        temperature: Option<f64>,
        /// Per-group attention gains, comma separated
        #[arg(long)]
        betas: Option<String>,
        /// IoU gate for the soft box loss
        #[arg(long)]
        iou_thresh: Option<f64>,
        /// Teacher weights: "base" or "sparse"
        #[arg(long)]
        teacher: Option<String>,
    },
    /// Fine-tune the pruned student on the hard loss only
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a weight file on the validation split
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Weight file name inside the run directory (e.g. distilled.wts)
        #[arg(long)]
        weights: String,
    },
    /// Static params/FLOPs cost model for a graph
    Cost {
        /// Graph descriptor path
        #[arg(long)]
        graph: String,
        /// Input resolution (square, multiple of 32)
        #[arg(long)]
        input: usize,
        /// Optional directory for the cost report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the gamma histogram of a weight file (CSV + SVG)
    Hist {
        /// Graph descriptor path
        #[arg(long)]
        graph: String,
        /// Weight file path
        #[arg(long)]
        weights: String,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Output file stem
        #[arg(long, default_value = "gamma_hist")]
        name: String,
    },
    /// Consolidated markdown report over a run directory
    Report {
        /// Run directory containing stage manifests
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn parse_betas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| anyhow::anyhow!("bad beta value `{p}` in --betas"))
        })
        .collect()
}

fn overrides_for(common: &CommonArgs) -> Overrides {
    Overrides {
        seed: common.seed,
        graph: common.graph.clone(),
        ..Overrides::default()
    }
}

fn run() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let ov = overrides_for(&common);
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_gen_data(&cfg, &common.out, &ov)
        }
        Command::Train { common, weights } => {
            let ov = overrides_for(&common);
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_train(&cfg, &common.out, weights.as_deref(), &ov)
        }
        Command::Sparse { common, weights, sparse_rate } => {
            let mut ov = overrides_for(&common);
            ov.sparse_rate = sparse_rate;
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_sparse(&cfg, &common.out, weights.as_deref(), &ov)
        }
        Command::Prune { common, weights, total_prune_ratio } => {
            let mut ov = overrides_for(&common);
            ov.total_prune_ratio = total_prune_ratio;
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_prune(&cfg, &common.out, weights.as_deref(), &ov)
        }
        Command::Distill { common, temperature, betas, iou_thresh, teacher } => {
            let mut ov = overrides_for(&common);
            ov.temperature = temperature;
            ov.iou_thresh = iou_thresh;
            ov.teacher = teacher;
            if let Some(b) = betas {
                ov.betas = Some(parse_betas(&b)?);
            }
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_distill(&cfg, &common.out, &ov).map(|_| ())
        }
        Command::Finetune { common } => {
            let ov = overrides_for(&common);
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_finetune(&cfg, &common.out, &ov).map(|_| ())
        }
        Command::Eval { common, weights } => {
            let ov = overrides_for(&common);
            let cfg = PipelineConfig::load(&common.config, &ov)?;
            stages::cmd_eval(&cfg, &common.out, &weights, &ov).map(|_| ())
        }
        Command::Cost { graph, input, out } => {
            stages::cmd_cost(&graph, input, out.as_deref()).map(|_| ())
        }
        Command::Hist { graph, weights, out, name } => {
            stages::cmd_hist(&graph, &weights, &out, &name)
        }
        Command::Report { run_dir } => report::cmd_report(&run_dir).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
