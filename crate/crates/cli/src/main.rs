use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use speci_core::config::{ExperimentConfig, ModelConfig};
use speci_core::experiment::{self, CompareRow, Outcome};
use speci_core::metrics::SummaryRow;
use speci_core::Error;

/// Relative `output_dir` values are resolved against this directory.
const OUTPUT_ROOT_VAR: &str = "SPECI_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "speci", version, about = "Lifelong imitation-learning experiments on synthetic manipulation suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every paradigm x seed of a TOML experiment config.
    Run {
        config: PathBuf,
        /// Replace the config's seed list (repeatable).
        #[arg(long = "seed", value_name = "SEED")]
        seeds: Vec<u64>,
        /// Disable a component: codebook, adapters or hierarchy (repeatable).
        #[arg(long = "ablate", value_name = "COMPONENT")]
        ablate: Vec<String>,
        /// Use the full-size model dimensions.
        #[arg(long)]
        full_scale: bool,
    },
    /// Continue an interrupted experiment from its last checkpoints.
    Resume { dir: PathBuf },
    /// Print a per-suite table joining several experiment directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    root.join(&cfg.output_dir).join(&cfg.name)
}

fn load(path: &Path, seeds: Vec<u64>, ablate: &[String], full_scale: bool) -> speci_core::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if full_scale {
        cfg.model = ModelConfig {
            ablate: cfg.model.ablate,
            adapter_mode: cfg.model.adapter_mode,
            ..ModelConfig::full_scale()
        };
    }
    for a in ablate {
        cfg.model.ablate.apply(a)?;
    }
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(spec: &experiment::RunSpec, m: &speci_core::metrics::RunMetrics) {
    eprintln!("{:<32} fwt {:.3}  nbt {:.3}  auc {:.3}", spec.id, m.fwt, m.nbt, m.auc);
}

fn cell((mean, std): (f64, f64)) -> String {
    if mean.is_nan() {
        "-".into()
    } else {
        format!("{mean:.3} ± {std:.3}")
    }
}

fn print_summary(rows: &[SummaryRow]) {
    println!("{:<28} {:<12} {:>3}  {:>15}  {:>15}  {:>15}", "paradigm", "suite", "n", "FWT", "NBT", "AUC");
    for r in rows {
        println!(
            "{:<28} {:<12} {:>3}  {:>15}  {:>15}  {:>15}",
            r.paradigm,
            r.suite,
            r.n_seeds,
            cell(r.fwt),
            cell(r.nbt),
            cell(r.auc)
        );
    }
}

fn print_outcome(o: &Outcome) {
    print_summary(&o.summary);
    println!("results in {}", o.dir.display());
}

fn print_compare(rows: &[CompareRow]) {
    let mut suite = "";
    for r in rows {
        let s = &r.summary;
        if s.suite != suite {
            suite = &s.suite;
            println!("\n{suite}");
            println!(
                "  {:<36} {:>3}  {:>15}  {:>15}  {:>15}  {:>8} {:>8} {:>8}",
                "experiment/paradigm", "n", "FWT", "NBT", "AUC", "dFWT", "dNBT", "dAUC"
            );
        }
        let d = |i: usize| r.delta.map_or("-".to_string(), |d| format!("{:+.3}", d[i]));
        println!(
            "  {:<36} {:>3}  {:>15}  {:>15}  {:>15}  {:>8} {:>8} {:>8}",
            format!("{}/{}", r.experiment, s.paradigm),
            s.n_seeds,
            cell(s.fwt),
            cell(s.nbt),
            cell(s.auc),
            d(0),
            d(1),
            d(2)
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seeds,
            ablate,
            full_scale,
        } => load(&config, seeds, &ablate, full_scale).and_then(|cfg| {
            let dir = output_dir(&cfg);
            eprintln!("{} runs into {}", experiment::run_specs(&cfg).len(), dir.display());
            experiment::run(&cfg, &dir, progress).map(|o| print_outcome(&o))
        }),
        Command::Resume { dir } => experiment::resume(&dir, progress).map(|o| print_outcome(&o)),
        Command::Compare { dirs } => experiment::compare(&dirs).map(|rows| print_compare(&rows)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            eprintln!("(config files are TOML with schema_version = {}; see configs/ for examples)", speci_core::config::SCHEMA_VERSION);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
