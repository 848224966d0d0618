//! `flip`: train, sample, evaluate and sweep fair private tabular synthesizers.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flip_core::evaluation::AdversaryConfig;
use flip_core::pipeline::demo::biased_dataset;
use flip_core::pipeline::{
    evaluate_files, generate, load_inputs, run_experiment, train_model, write_report, RunConfig, CHECKPOINT_DIR,
};
use flip_core::vae::ModelCheckpoint;
use flip_core::FlipError;

#[derive(Parser)]
#[command(name = "flip", version, about = "Fair and differentially private tabular data synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train without differential privacy.
    #[arg(long, conflicts_with = "epsilon")]
    no_dp: bool,
    /// Fairness weights, comma separated.
    #[arg(long, value_delimiter = ',')]
    lambda: Vec<f64>,
    /// Privacy budgets, comma separated; `inf` disables privacy.
    #[arg(long, value_delimiter = ',', value_parser = parse_epsilon)]
    epsilon: Vec<Option<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model on the full dataset and save its checkpoint.
    Train(RunArgs),
    /// Sample synthetic records from a checkpoint.
    Generate {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a synthetic CSV against real training and test CSVs.
    Evaluate {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path; a CSV copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the cross-validated (fold, λ, ε) grid; finished cells are skipped.
    Sweep(RunArgs),
    /// Write a constructed biased dataset and its schema.
    DemoData {
        #[arg(long, default_value_t = 5000)]
        rows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory receiving `data.csv` and `schema.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate cell reports into tables and heatmaps.
    Report {
        /// Sweep output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_epsilon(s: &str) -> Result<Option<f64>, String> {
    match s.trim() {
        "inf" | "none" => Ok(None),
        v => v.parse::<f64>().map(Some).map_err(|e| format!("invalid epsilon '{v}': {e}")),
    }
}

enum Failure {
    Config(String),
    Run(FlipError),
}

impl From<FlipError> for Failure {
    fn from(e: FlipError) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Config(_) => 2,
        Failure::Run(e) => match e {
            FlipError::Schema(_)
            | FlipError::InvalidArgument(_)
            | FlipError::HeaderMismatch { .. }
            | FlipError::Privacy(_)
            | FlipError::Json(_) => 2,
            FlipError::BudgetExceeded { .. } => 4,
            _ => 3,
        },
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(&a.config).map_err(|e| Failure::Config(e.to_string()))?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if !a.lambda.is_empty() {
        cfg.lambdas = a.lambda.clone();
    }
    if a.no_dp {
        cfg.epsilons = vec![None];
    } else if !a.epsilon.is_empty() {
        cfg.epsilons = a.epsilon.clone();
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(p).map_err(|e| FlipError::io(p, e).into())
}

fn train(a: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(a)?;
    if cfg.lambdas.len() != 1 || cfg.epsilons.len() != 1 {
        return Err(Failure::Config("train takes exactly one lambda and one epsilon".into()));
    }
    let data = load_inputs(&cfg)?;
    let ckpt = train_model(&data, &cfg, cfg.lambdas[0], cfg.epsilons[0], cfg.seed)?;
    create_dir(&cfg.out_dir)?;
    let dir = cfg.out_dir.join(CHECKPOINT_DIR);
    ckpt.save(&dir)?;
    if let Some(p) = &ckpt.privacy {
        let path = cfg.out_dir.join("privacy.json");
        let text = serde_json::to_string_pretty(p).map_err(FlipError::from)? + "\n";
        std::fs::write(&path, text).map_err(|e| FlipError::io(&path, e))?;
        println!("spent epsilon {:.4} of {} (delta {})", p.spent_eps, p.target_eps, p.delta);
    }
    println!("checkpoint written to {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Generate {
            checkpoint,
            count,
            seed,
            out,
        } => {
            let ckpt = ModelCheckpoint::load(&checkpoint)?;
            let synth = generate(&ckpt, count, seed)?;
            synth.write_csv(&out)?;
            println!("{count} records written to {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            schema,
            train,
            test,
            synthetic,
            seed,
            out,
        } => {
            let cfg = AdversaryConfig {
                seed,
                ..AdversaryConfig::default()
            };
            let report = evaluate_files(&schema, &train, &test, &synthetic, &cfg)?;
            report.write_json(&out)?;
            report.write_csv(out.with_extension("csv"))?;
            println!(
                "ber {:.4}  a_ncb {:.4}  identifiability {:.4}",
                report.ber, report.a_ncb, report.identifiability
            );
            Ok(())
        }
        Command::Sweep(a) => {
            let cfg = load_config(&a)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "{} cells completed, {} skipped, {} failed",
                summary.completed.len(),
                summary.skipped.len(),
                summary.failed.len()
            );
            for (cell, e) in &summary.failed {
                eprintln!("{}: {e}", cell.name());
            }
            match summary.failed.into_iter().next() {
                Some((_, e)) => Err(e.into()),
                None => Ok(()),
            }
        }
        Command::DemoData { rows, seed, out } => {
            let data = biased_dataset(rows, seed)?;
            create_dir(&out)?;
            data.write_csv(out.join("data.csv"))?;
            let path = out.join("schema.json");
            let text = serde_json::to_string_pretty(&data.schema).map_err(FlipError::from)? + "\n";
            std::fs::write(&path, text).map_err(|e| FlipError::io(&path, e))?;
            println!("{rows} records written to {}", out.display());
            Ok(())
        }
        Command::Report { out } => {
            let files = write_report(&out)?;
            println!("summary written to {}", files.summary.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Config(m) => eprintln!("error: configuration: {m}"),
                Failure::Run(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
