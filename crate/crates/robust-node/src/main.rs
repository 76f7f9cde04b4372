//! Command-line interface: single runs, four-method comparisons, numerical
//! verification, and level-set grid export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robust_node::experiment::{
    compare_to_dir, load_config, run_to_dir, train_model, ExperimentConfig, Method,
};
use robust_node::verify::standard_checks;
use robust_node::{Error, Result};

#[derive(Parser)]
#[command(
    name = "robust-node",
    about = "Robust neural ODE training against bounded input perturbations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Overrides both the dataset seed and the training seed (for
    /// `compare`, replaces the seed list).
    #[arg(long)]
    seed: Option<u64>,

    /// Training method: non-robust, uniform-robust, weighted-robust, or
    /// worst-case-robust. Defaults to the config's weight scheme.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train one model, evaluate it, and export artifacts.
    Run(CommonArgs),
    /// Train all four methods per seed with shared initializations and
    /// export a comparison table.
    Compare(CommonArgs),
    /// Run the numerical verification battery and emit a JSON report.
    Verify(CommonArgs),
    /// Train one model and export only its level-set grid CSV.
    ExportGrid(CommonArgs),
}

fn resolve_config(args: &CommonArgs, required: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None if required => {
            return Err(Error::Config(
                "missing required flag: --config <path>".into(),
            ))
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.dataset.seed = seed;
        cfg.shooting.seed = seed;
        cfg.seeds = vec![seed];
    }
    if let Some(name) = &args.method {
        cfg = cfg.with_method(Method::parse(name)?);
    }
    Ok(cfg)
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args, true)?;
    cfg.validate()?;
    let out_dir = cfg.resolve_out_dir(args.out.as_deref())?;
    let output = run_to_dir(&cfg, &out_dir)?;
    println!(
        "run complete: test_accuracy={:.4} margin_accuracy={:.4} \
         high_confidence_mistakes={:.4} robust_objective={:.6}",
        output.metrics.test_accuracy,
        output.metrics.margin_accuracy,
        output.metrics.high_confidence_mistakes,
        output.metrics.robust_objective,
    );
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

fn cmd_compare(args: &CommonArgs) -> Result<()> {
    if args.method.is_some() {
        return Err(Error::Config(
            "method: --method does not apply to compare, which always runs all four".into(),
        ));
    }
    let cfg = resolve_config(args, true)?;
    cfg.validate()?;
    let out_dir = cfg.resolve_out_dir(args.out.as_deref())?;
    let report = compare_to_dir(&cfg, &out_dir)?;
    for (method, mean) in &report.means {
        println!(
            "{method}: mean test_accuracy={:.4} margin_accuracy={:.4} \
             high_confidence_mistakes={:.4}",
            mean.test_accuracy, mean.margin_accuracy, mean.high_confidence_mistakes,
        );
    }
    println!("comparison written to {}", out_dir.display());
    Ok(())
}

fn cmd_verify(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args, false)?;
    let checks = standard_checks(cfg.shooting.seed)?;
    let all_passed = checks.iter().all(|c| c.passed);
    for check in &checks {
        println!(
            "{}: {} (measured {:.3e}, threshold {:.3e})",
            check.name,
            if check.passed { "PASS" } else { "FAIL" },
            check.measured,
            check.threshold,
        );
    }
    let report = serde_json::json!({ "checks": checks, "passed": all_passed });
    let out_dir = args
        .out
        .clone()
        .or(cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(Error::io(&out_dir))?;
    let path = out_dir.join("verify_report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    std::fs::write(&path, text + "\n").map_err(Error::io(&path))?;
    println!("report written to {}", path.display());
    if all_passed {
        Ok(())
    } else {
        Err(Error::VerificationFailed {
            failed: checks.iter().filter(|c| !c.passed).count(),
        })
    }
}

fn cmd_export_grid(args: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(args, true)?;
    cfg.validate()?;
    let out_dir = cfg.resolve_out_dir(args.out.as_deref())?;
    std::fs::create_dir_all(&out_dir).map_err(Error::io(&out_dir))?;
    let model = train_model(&cfg)?;
    let path = out_dir.join("level_set.csv");
    robust_node::evaluation::export_level_set_grid(
        &model.schedule,
        &cfg.targets,
        &cfg.boundary,
        cfg.evaluation.grid_resolution,
        &path,
    )?;
    println!("grid written to {}", path.display());
    Ok(())
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) => 1,
        Error::Io { .. } => 3,
        Error::Shooting { source, .. } => exit_code_for(source),
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Verify(args) => cmd_verify(args),
        Command::ExportGrid(args) => cmd_export_grid(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            let mut source = std::error::Error::source(&error);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::from(exit_code_for(&error))
        }
    }
}
