use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use cld::datagen::{apply_longtail, generate_correlated, generate_mixture, save_cld1};
use cld::encoder::load_checkpoint;
use cld::error::CldError;
use cld::runner::{
    evaluate, gradient_check, grid_search, load_config, rankings_by_knn_csv, rankings_csv,
    resolve_dataset, train, Config, GridSpec, GRADCHECK_FAIL_THRESHOLD,
};

#[derive(Parser)]
#[command(name = "cld", about = "Cross-level instance-group contrastive learning", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Mixture,
    Correlated,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a CLD1 file.
    GenData {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long)]
        classes: usize,
        /// Samples per class (mixture) or groups per class (correlated).
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        sep: f64,
        /// Near-duplicate spread for the correlated generator.
        #[arg(long, default_value_t = 0.1)]
        corr_sigma: f64,
        #[arg(long, default_value_t = 4)]
        views_per_group: usize,
        /// Optional exponential long-tail ratio in (0, 1].
        #[arg(long)]
        longtail_rho: Option<f64>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a CLD1 dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Optional config for eval knobs (augment, knn, seed).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the report JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grid search over lambda and/or temperature, ranked without labels.
    Tune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of one training step's gradients.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 6)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CldError> {
    match cli.command {
        Command::GenData {
            kind,
            classes,
            per_class,
            dim,
            sep,
            corr_sigma,
            views_per_group,
            longtail_rho,
            seed,
            out,
        } => {
            let mut ds = match kind {
                GenKind::Mixture => generate_mixture(classes, per_class, dim, sep, seed)?,
                GenKind::Correlated => generate_correlated(
                    classes,
                    per_class,
                    views_per_group,
                    dim,
                    sep,
                    corr_sigma,
                    seed,
                )?,
            };
            if let Some(rho) = longtail_rho {
                ds = apply_longtail(&ds, rho, seed ^ 0x17)?;
            }
            save_cld1(&ds, &out)?;
            println!(
                "wrote {} samples (dim {}, {} classes) to {}",
                ds.len(),
                ds.dim(),
                ds.num_classes,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, out } => {
            let mut config = load_config(&config)?;
            if let Some(dir) = out {
                config.out_dir = Some(dir.display().to_string());
            }
            let output = train(&config)?;
            let last = output.log.evals.last().expect("final eval");
            println!(
                "trained {} steps in {:.1}s | knn {:.4} nmi {:.4} retrieval {:.4} tuning {:.4}",
                output.log.steps.len(),
                output.log.wall_clock_secs,
                last.report.knn_top1,
                last.report.nmi_vs_labels,
                last.report.retrieval_top1,
                last.report.tuning_score
            );
            if let Some(path) = &output.log.checkpoint_path {
                println!("checkpoint: {path}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            out,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let mut cfg = match config {
                Some(p) => load_config(&p)?,
                None => Config::default(),
            };
            cfg.data = Some(cld::runner::DataSource::Path(data.display().to_string()));
            let ds = resolve_dataset(&cfg)?;
            let report = evaluate(&params, &ds, &cfg)?;
            let json = serde_json::to_string_pretty(&report.to_json())?;
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(path, json)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Tune { config, grid, out } => {
            let config = load_config(&config)?;
            let grid = GridSpec::parse(&std::fs::read_to_string(&grid)?)?;
            let ds = resolve_dataset(&config)?;
            let cells = grid_search(&config, &grid, &ds);
            let ranked = rankings_csv(&cells);
            print!("{ranked}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("rankings.csv"), &ranked)?;
                std::fs::write(dir.join("rankings_by_knn.csv"), rankings_by_knn_csv(&cells))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            config,
            batch_size,
            eps,
        } => {
            let config = load_config(&config)?;
            let report = gradient_check(&config, batch_size, eps)?;
            println!(
                "gradcheck: max relative error {:.3e} over {} of {} coordinates",
                report.max_rel_error, report.coords_checked, report.param_count
            );
            if report.max_rel_error > GRADCHECK_FAIL_THRESHOLD {
                eprintln!("gradcheck FAILED (threshold {GRADCHECK_FAIL_THRESHOLD:.0e})");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
