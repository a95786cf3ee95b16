use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use medlfrm::data::{save_dataset, synth_generate};
use medlfrm::error::Error;
use medlfrm::experiment::{
    cross_validate_c, default_cv_grid, eval_scores_csv, run_experiment, ExperimentConfig,
};
use medlfrm::data::{load_dataset, split_holdout};

#[derive(Parser)]
#[command(name = "medlfrm", about = "Max-margin latent feature relational models for link prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment from a JSON config (splits, optional CV, fits,
    /// CSV reports).
    Fit { config: PathBuf },
    /// Cross-validate C on the first seed's split and print per-C scores.
    Cv { config: PathBuf },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        n: usize,
        k: usize,
        seed: u64,
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        density: f64,
        #[arg(long, default_value_t = 1.0)]
        weight_scale: f64,
    },
    /// Recompute the AUC from an emitted per-pair score dump.
    Eval { scores: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap prints its own help/usage text.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 1,
        Error::Parse { .. } | Error::Validation(_) | Error::Io { .. } | Error::UndefinedMetric(_) => 2,
        Error::DimensionMismatch(_) => 3,
    }
}

fn run(cli: Cli) -> medlfrm::Result<()> {
    match cli.command {
        Command::Fit { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_experiment(&cfg)?;
            for r in &report.per_seed {
                let c = r.chosen_c.map_or("-".to_string(), |c| c.to_string());
                println!(
                    "seed {}: auc {:.4} (C = {c}, train {:.2}s, test {:.2}s, converged {})",
                    r.seed, r.auc, r.train_secs, r.test_secs, r.converged
                );
            }
            println!(
                "mean auc {:.4} +/- {:.4} over {} seeds -> {}",
                report.mean_auc,
                report.std_auc,
                report.per_seed.len(),
                report.output_dir.display()
            );
            Ok(())
        }
        Command::Cv { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = load_dataset(&cfg.dataset)?;
            let split = split_holdout(&ds, cfg.split_fraction, cfg.seeds[0])?;
            let grid = cfg.cv_grid.clone().unwrap_or_else(default_cv_grid);
            let (best, scores) = cross_validate_c(&ds, &split, &grid, &cfg.model)?;
            for (c, s) in &scores {
                println!("C = {c}: validation auc {s:.4}");
            }
            println!("best C = {best}");
            Ok(())
        }
        Command::Synth {
            n,
            k,
            seed,
            out,
            density,
            weight_scale,
        } => {
            let sd = synth_generate(n, k, seed, density, weight_scale)?;
            save_dataset(&sd.dataset, &out)?;
            println!(
                "wrote {} ({} entities, {} links, density {:.3})",
                out.display(),
                sd.dataset.n_entities,
                sd.dataset.links.len(),
                sd.link_density
            );
            Ok(())
        }
        Command::Eval { scores } => {
            let a = eval_scores_csv(&scores)?;
            println!("auc {a:.6}");
            Ok(())
        }
    }
}
