use std::path::Path;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use permsim::experiment::{
    builtin_scenario, calibrate_ell_spec, execute, list_builtin_scenarios, output_dir, output_root,
    write_artifacts, ExperimentSpec, SpecError,
};

/// Batch runner for permsim experiment specs.
///
/// SPEC is a path to a TOML spec or the name of a built-in scenario. Output
/// goes under $PERMSIM_OUTPUT_ROOT (default ./permsim-out).
/// Exit codes: 0 ok, 1 invalid spec, 2 runtime fault.
#[derive(Parser)]
#[command(name = "permsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every trial of every cell and write report.json, summary.csv and violations.csv.
    Run { spec: String },
    /// List the built-in scenarios, or print one.
    Scenarios { name: Option<String> },
    /// Parse the spec and validate every cell without running anything.
    Validate { spec: String },
    /// Calibrate the liveness bound at each cell's ε and write calibration.json.
    CalibrateEll { spec: String },
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

fn load(arg: &str) -> Result<ExperimentSpec, Failure> {
    let text = if Path::new(arg).exists() {
        std::fs::read_to_string(arg).map_err(|e| Failure::Invalid(format!("{arg}: {e}")))?
    } else if let Some(t) = builtin_scenario(arg) {
        t.to_string()
    } else {
        return Err(Failure::Invalid(format!("{arg}: no such file or scenario")));
    };
    ExperimentSpec::from_toml(&text).map_err(invalid)
}

fn invalid(e: SpecError) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("fault: {m}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Scenarios { name: None } => {
            for n in list_builtin_scenarios() {
                println!("{n}");
            }
        }
        Cmd::Scenarios { name: Some(n) } => match builtin_scenario(&n) {
            Some(t) => print!("{t}"),
            None => return Err(Failure::Invalid(format!("unknown scenario {n}"))),
        },
        Cmd::Validate { spec } => {
            let spec = load(&spec)?;
            let cells = spec.validate().map_err(invalid)?;
            println!("{}: {} cell(s) valid", spec.name, cells.len());
        }
        Cmd::Run { spec } => {
            let spec = load(&spec)?;
            let ex = execute(&spec).map_err(invalid)?;
            let dir = output_dir(&spec, &output_root());
            write_artifacts(&ex, &dir).map_err(runtime)?;
            for c in &ex.report.cells {
                let labels: Vec<String> = c.labels.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("cell {} [{}]", c.cell, labels.join(", "));
                for (k, e) in &c.estimates {
                    println!(
                        "  {k}: {}/{} = {:.4} [{:.4}, {:.4}]",
                        e.successes, e.trials, e.point, e.lower, e.upper
                    );
                }
                for (k, v) in &c.values {
                    println!("  {k} = {v}");
                }
            }
            println!("wrote {}", dir.display());
            if !ex.report.authoritative {
                let faulted: u32 = ex.report.cells.iter().map(|c| c.faulted).sum();
                return Err(Failure::Runtime(format!(
                    "{faulted} trial(s) aborted with a fault; report is not authoritative"
                )));
            }
        }
        Cmd::CalibrateEll { spec } => {
            let spec = load(&spec)?;
            let cal = calibrate_ell_spec(&spec).map_err(invalid)?;
            let dir = output_dir(&spec, &output_root());
            std::fs::create_dir_all(&dir).map_err(runtime)?;
            let json = serde_json::to_string_pretty(&cal).map_err(runtime)?;
            std::fs::write(dir.join("calibration.json"), json + "\n").map_err(runtime)?;
            for c in &cal {
                println!("cell {}: ε = {} ℓ = {} ({} trials)", c.cell, c.epsilon, c.ell, c.trials);
            }
        }
    }
    Ok(())
}
