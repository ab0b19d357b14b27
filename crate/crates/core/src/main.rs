use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dualcast::data::{generate_synthetic, load_dataset, prepare, write_dataset, Prepared, WindowSet};
use dualcast::trainkit::{
    benchmark_attention, doubling_ratios, evaluate, export_embeddings, load_trained, save_trained, staged_grid_search,
    train_on, write_epoch_log, RunConfig, KERNELS, SEED_ENV,
};
use dualcast::{Error, Result};

#[derive(Parser)]
#[command(name = "dualcast", version, about = "Dual-branch traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to `data_dir`.
    Generate(Common),
    /// Train a model and save the checkpoint, epoch log and test metrics.
    Train(Common),
    /// Staged search over the auxiliary loss weights.
    GridSearch(Common),
    /// Score a saved checkpoint on one split.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Write pooled branch representations per sample as CSV.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Time the attention kernels over growing graphs.
    BenchAttention(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides such as `--model.width=8`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn pick(self, data: &Prepared) -> &WindowSet {
        match self {
            Split::Train => &data.train,
            Split::Val => &data.val,
            Split::Test => &data.test,
        }
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let env = std::env::var(SEED_ENV).ok();
        RunConfig::resolve(self.config.as_deref(), env.as_deref(), &self.overrides)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| io(path, e))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    serde_json::to_writer_pretty(create(path)?, value)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = common.resolve()?;
            let synthetic = dualcast::data::SyntheticConfig {
                seed: cfg.seed,
                ..cfg.synthetic.clone()
            };
            let ds = generate_synthetic(&synthetic)?;
            let manifest = write_dataset(&cfg.data_dir, &ds)?;
            println!(
                "wrote {} steps x {} sensors, {} incidents to {}",
                ds.steps(),
                ds.graph.node_count(),
                ds.incidents.len(),
                manifest.display()
            );
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg.manifest_path())?;
            let (outcome, data) = train_on(&cfg, &ds)?;
            write_epoch_log(&outcome.log, create(&cfg.output_dir.join("train_log.csv"))?)?;
            save_trained(&outcome.model, &cfg.checkpoint_dir(), &data.stats, &cfg.loss)?;
            let metrics = evaluate(
                &outcome.model,
                &data.test,
                &data.stats,
                &data.calendar,
                cfg.optimizer.batch_size,
            )?;
            write_json(&cfg.output_dir.join("metrics.json"), &metrics)?;
            println!(
                "best epoch {} val rmse {:.4} test rmse {:.4} mae {:.4}",
                outcome.best_epoch, outcome.best_val_rmse, metrics.rmse, metrics.mae
            );
        }
        Command::GridSearch(common) => {
            let cfg = common.resolve()?;
            let ds = load_dataset(&cfg.manifest_path())?;
            let result = staged_grid_search(&cfg.loss, |w| {
                let trial = RunConfig {
                    loss: *w,
                    ..cfg.clone()
                };
                let (outcome, _) = train_on(&trial, &ds)?;
                println!(
                    "alpha {} beta {} gamma {} val rmse {:.4}",
                    w.alpha, w.beta, w.gamma, outcome.best_val_rmse
                );
                Ok(outcome.best_val_rmse)
            })?;
            result.write_csv(create(&cfg.output_dir.join("grid.csv"))?)?;
            write_json(&cfg.output_dir.join("grid_best.json"), &result.best)?;
            println!(
                "best alpha {} beta {} gamma {} val rmse {:.4}",
                result.best.alpha, result.best.beta, result.best.gamma, result.best_val_rmse
            );
        }
        Command::Evaluate { split, common } => {
            let cfg = common.resolve()?;
            let (model, stats) = load_trained(&cfg.checkpoint_dir())?;
            let ds = load_dataset(&cfg.manifest_path())?;
            let data = prepare(&ds, model.config.input_steps, model.config.output_steps, &cfg.calendar)?;
            let metrics = evaluate(&model, split.pick(&data), &stats, &data.calendar, cfg.optimizer.batch_size)?;
            let path = cfg.output_dir.join(format!("metrics_{}.json", split.name()));
            write_json(&path, &metrics)?;
            println!("{} rmse {:.4} mae {:.4} -> {}", split.name(), metrics.rmse, metrics.mae, path.display());
        }
        Command::ExportEmbeddings { split, common } => {
            let cfg = common.resolve()?;
            let (model, _) = load_trained(&cfg.checkpoint_dir())?;
            let ds = load_dataset(&cfg.manifest_path())?;
            let data = prepare(&ds, model.config.input_steps, model.config.output_steps, &cfg.calendar)?;
            let path = cfg.output_dir.join(format!("embeddings_{}.csv", split.name()));
            let rows = export_embeddings(&model, split.pick(&data), cfg.optimizer.batch_size, create(&path)?)?;
            println!("wrote {rows} rows to {}", path.display());
        }
        Command::BenchAttention(common) => {
            let cfg = common.resolve()?;
            let rows = benchmark_attention(&cfg.bench, &KERNELS)?;
            dualcast::trainkit::bench::write_bench_csv(&rows, create(&cfg.output_dir.join("bench.csv"))?)?;
            for r in &rows {
                println!("{:?} n={} median {:.6}s", r.kernel, r.nodes, r.median_seconds);
            }
            for kernel in KERNELS {
                for (n, ratio) in doubling_ratios(&rows, kernel) {
                    println!("{kernel:?} {n}->{} ratio {ratio:.2}", 2 * n);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
