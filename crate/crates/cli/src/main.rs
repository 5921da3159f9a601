use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use spurprune::par::Execution;
use spurprune::pipeline::PipelineConfig;

mod commands;
mod config;

use commands::out_for;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "spurprune", version, about = "Prune spurious shortcuts out of trained classifiers")]
struct Cli {
    /// Run multi-seed suites one seed at a time.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test splits as CSV.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the ERM model on `<data>/train.csv`.
    TrainErm {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-means on ERM embeddings, cluster labels and purity report.
    Cluster {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Share of one class that makes a cluster dominant.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the task set, train the mask and binarize it.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// clusters.json written by cluster.
        #[arg(long)]
        clusters: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune an extracted subnetwork on the task set.
    Finetune {
        /// subnetwork.json written by prune.
        #[arg(long)]
        subnet: PathBuf,
        /// Layer masks; defaults to layer_masks.json next to the subnetwork.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// taskdata.csv written by prune.
        #[arg(long)]
        taskdata: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Group metrics on `<data>/test.csv`; with --config also flip rates.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated attribute names (default: all).
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation table over settings 1..=7.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        settings: Vec<u8>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastive batch variants: default, neg_ablation, supcon.
    Variants {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics across pruning ratios.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7,0.9")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decision boundaries of ERM, a random mask and the pruned model on two moons.
    DemoMoons {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let load = |path: &Option<PathBuf>| RunConfig::load(path.as_deref(), PipelineConfig::default);
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load(&config)?;
            commands::gen_data(&cfg, &out_for(out, Some(&cfg), "gen-data"))
        }
        Command::TrainErm { config, data, out } => {
            let cfg = load(&config)?;
            commands::train_erm_cmd(&cfg, &data, &out_for(out, Some(&cfg), "train-erm"))
        }
        Command::Cluster {
            model,
            data,
            k,
            seed,
            threshold,
            out,
        } => commands::cluster(&model, &data, k, seed, threshold, &out_for(out, None, "cluster")),
        Command::Prune {
            model,
            data,
            clusters,
            config,
            out,
        } => {
            let cfg = load(&config)?;
            commands::prune(&cfg, &model, &data, &clusters, &out_for(out, Some(&cfg), "prune"))
        }
        Command::Finetune {
            subnet,
            mask,
            taskdata,
            epochs,
            config,
            out,
        } => {
            let cfg = load(&config)?;
            let out = out_for(out, Some(&cfg), "finetune");
            commands::finetune(&cfg, &subnet, mask.as_deref(), &taskdata, epochs, &out)
        }
        Command::Evaluate {
            model,
            data,
            attributes,
            config,
            seed,
            out,
        } => {
            let cfg = config.as_ref().map(|_| load(&config)).transpose()?;
            let seed = seed.or(cfg.as_ref().map(|c| c.pipeline.seed)).unwrap_or(0);
            let out = out_for(out, cfg.as_ref(), "evaluate");
            commands::evaluate_cmd(&model, &data, &attributes, cfg.as_ref(), seed, &out)
        }
        Command::Ablate {
            config,
            settings,
            seeds,
            out,
        } => {
            let cfg = load(&config)?;
            commands::ablate(&cfg, &settings, seeds, exec, &out_for(out, Some(&cfg), "ablate"))
        }
        Command::Variants { config, seeds, out } => {
            let cfg = load(&config)?;
            commands::variants(&cfg, seeds, exec, &out_for(out, Some(&cfg), "variants"))
        }
        Command::Sweep {
            config,
            ratios,
            seeds,
            out,
        } => {
            let cfg = load(&config)?;
            commands::sweep(&cfg, &ratios, seeds, exec, &out_for(out, Some(&cfg), "sweep"))
        }
        Command::DemoMoons {
            config,
            resolution,
            out,
        } => {
            let cfg = RunConfig::load(config.as_deref(), PipelineConfig::moons_demo)?;
            commands::demo_moons(&cfg, resolution, &out_for(out, Some(&cfg), "demo-moons"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = format!("{err:#}").replace('\n', " ");
            let msg = msg.trim_end();
            eprintln!("spurprune: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
