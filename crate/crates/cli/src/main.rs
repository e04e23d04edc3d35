use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gridgraph::experiments::{
    self, EquivCheckOptions, ImputeEvalOptions, RunConfig, CHECKPOINT_FILE, METRICS_FILE,
};
use gridgraph::train::{ImputerKind, Metrics};

/// Spatial graph convolutions on incomplete images.
#[derive(Parser, Debug)]
#[command(name = "gridgraph", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compile random 3x3 convolutions into SGCN layers and compare outputs.
    EquivCheck {
        /// Random masks on top of the two fixed fixtures.
        #[arg(long, default_value_t = 100)]
        masks: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "16x16", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest accepted absolute difference (exclusive).
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Side of the square hole in the holed test images (0 for none).
        #[arg(long, default_value_t = 13)]
        hole: usize,
        /// Print every case, not just the summary.
        #[arg(long)]
        verbose: bool,
    },
    /// Train from a key=value run file.
    Train {
        config: PathBuf,
        /// Output directory for config echo, metrics, masks and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. --set epochs=2 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-evaluate a checkpoint on its run's frozen test holes.
    Eval {
        checkpoint: PathBuf,
        /// Use this MNIST directory instead of the one recorded in the checkpoint.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also write the summary rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Dump truth, masked input, reconstruction and imputation fills as PGM.
    ExportRecon {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Score a raw imputer inside frozen holes of the MNIST test set.
    ImputeEval {
        #[arg(long)]
        imputer: ImputerKind,
        /// Leading training images used as the pool.
        #[arg(long, default_value_t = 10_000)]
        pool: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Seed of the frozen holes.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 13)]
        mask_size: usize,
        /// Number of test images scored (defaults to all of them).
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
    },
    /// Write a frozen hole file, one `index top left size` line per image.
    MakeMasks {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 13)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 28)]
        height: usize,
        #[arg(long, default_value_t = 28)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
    let num = |v: &str| v.parse::<usize>().map_err(|_| format!("bad size component '{v}'"));
    Ok((num(h)?, num(w)?))
}

fn print_summary(metrics: &Metrics) {
    for r in metrics.rows.iter().filter(|r| r.epoch.is_none()) {
        println!("{} {} = {:.6}", r.split, r.metric, r.value);
    }
}

fn run(cli: Cli) -> gridgraph::Result<ExitCode> {
    match cli.command {
        Command::EquivCheck {
            masks,
            size: (height, width),
            seed,
            tol,
            hole,
            verbose,
        } => {
            let report = experiments::equiv_check(&EquivCheckOptions {
                masks,
                height,
                width,
                seed,
                tol,
                hole,
                ..Default::default()
            })?;
            for case in report.cases.iter().filter(|c| verbose || !c.report.passed()) {
                let r = &case.report;
                println!(
                    "{:<18} complete {:.3e}/{:.3e}  holed {:.3e}/{:.3e}  {}",
                    case.name,
                    r.complete_identity,
                    r.complete_relu,
                    r.incomplete_identity,
                    r.incomplete_relu,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed = report.cases.iter().filter(|c| !c.report.passed()).count();
            println!(
                "{} cases, {failed} failed, max diff {:.3e} (tol {tol:e})",
                report.cases.len(),
                report.max_diff()
            );
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Train { config, out, overrides } => {
            let mut cfg = RunConfig::load(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .ok_or_else(|| gridgraph::Error::Config(format!("--set expects KEY=VALUE, got '{o}'")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            cfg.validate()?;
            let metrics = experiments::run_train(&cfg, &out, &mut |line| println!("{line}"))?;
            print_summary(&metrics);
            println!(
                "wrote {} and {} to {}",
                METRICS_FILE,
                CHECKPOINT_FILE,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, data_dir, csv } => {
            let metrics = experiments::run_eval(&checkpoint, data_dir.as_deref())?;
            print_summary(&metrics);
            if let Some(path) = csv {
                metrics.write_csv(path)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportRecon {
            checkpoint,
            out,
            data_dir,
            count,
        } => {
            let files = experiments::export_recon(&checkpoint, &out, data_dir.as_deref(), count)?;
            println!("wrote {} images to {}", files.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ImputeEval {
            imputer,
            pool,
            k,
            seed,
            mask_size,
            test_size,
            data_dir,
        } => {
            let (train, test) = experiments::load_mnist(&data_dir, pool, test_size.unwrap_or(usize::MAX))?;
            let opts = ImputeEvalOptions {
                imputer,
                pool,
                k,
                seed,
                mask_size,
            };
            let report = experiments::impute_eval(&opts, &train, &test)?;
            println!("{imputer} imputation: mse inside = {:.6} over {} images", report.mse_inside, report.images);
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeMasks {
            count,
            size,
            seed,
            height,
            width,
            out,
        } => {
            experiments::make_masks(&out, count, height, width, size, seed)?;
            println!("wrote {count} masks to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
