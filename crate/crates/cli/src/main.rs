//! Command-line runner: simulate scenarios, compare run summaries, validate
//! configs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config/usage error,
//! 3 ordering-assertion failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use laneflow::controllers::ControllerKind;
use laneflow::harness::{
    assert_ordering, compare, load_config, parse_ordering, read_summary_rows, run_scenario,
    write_summary_rows, HarnessError, RunOptions, SummaryRow,
};

/// The standard comparison set; the oracle-assisted variant is opt-in.
const DEFAULT_CONTROLLERS: [ControllerKind; 5] = [
    ControllerKind::FixedTime,
    ControllerKind::MaxPressure,
    ControllerKind::MpcRoad,
    ControllerKind::DmpcAdmm,
    ControllerKind::CentralizedReference,
];

#[derive(Parser)]
#[command(
    name = "laneflow",
    version,
    about = "Store-and-forward traffic-signal simulation with distributed MPC control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario with one or more controllers and write artifacts
    Run {
        /// Scenario config (JSON)
        config: PathBuf,
        /// Controller to run; repeat for several (default: the standard five)
        #[arg(long = "controller", value_name = "NAME")]
        controllers: Vec<ControllerKind>,
        /// Override the scenario's seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: runs/<scenario-name>)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Also write per-solve traces.csv (wall times; not reproducible)
        #[arg(long)]
        traces: bool,
    },
    /// Rank controllers across summary files from the same scenario
    Compare {
        /// summary.csv files (or one combined file with several rows)
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Expected ranking, e.g. "avg_delay_s_per_veh:dmpc_admm<fixed_time";
        /// repeatable; exits 3 if violated
        #[arg(long = "assert-ordering", value_name = "SPEC")]
        assert_ordering: Vec<String>,
    },
    /// Parse a scenario config and report whether it is valid
    Validate {
        /// Scenario config (JSON)
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, controllers, seed, out, traces } => {
            cmd_run(&config, &controllers, seed, out, traces)
        }
        Command::Compare { files, assert_ordering } => cmd_compare(&files, &assert_ordering),
        Command::Validate { config } => cmd_validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// Maps error kinds onto the documented exit codes.
fn exit_code(err: &HarnessError) -> u8 {
    match err {
        HarnessError::Config(_)
        | HarnessError::Topology(_)
        | HarnessError::BadOrderingSpec { .. }
        | HarnessError::BadSummary(_)
        | HarnessError::MismatchedScenario(_) => 2,
        HarnessError::OrderingViolation(_) => 3,
        _ => 1,
    }
}

fn cmd_run(
    config_path: &Path,
    controllers: &[ControllerKind],
    seed: Option<u64>,
    out: Option<PathBuf>,
    traces: bool,
) -> Result<(), HarnessError> {
    let cfg = load_config(config_path)?;
    let kinds: Vec<ControllerKind> = if controllers.is_empty() {
        DEFAULT_CONTROLLERS.to_vec()
    } else {
        controllers.to_vec()
    };
    let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
    let opts = RunOptions {
        out_dir: Some(out_dir.clone()),
        seed_override: seed,
        solver_traces: traces,
    };

    let mut rows: Vec<SummaryRow> = Vec::with_capacity(kinds.len());
    for kind in kinds {
        eprintln!("running {} on '{}' ...", kind.name(), cfg.name);
        let art = run_scenario(&cfg, kind, &opts)?;
        let run = &art.kpis.run;
        eprintln!(
            "  {} steps, avg delay {:.3} s/veh, served {:.1} veh, mean solve {:.4} s",
            run.steps, run.avg_delay_s_per_veh, run.vehicles_served, run.mean_controller_wall_s
        );
        rows.push(art.summary_row());
    }

    let combined = out_dir.join("summary.csv");
    write_summary_rows(&combined, &rows)?;
    println!("wrote {}", combined.display());
    if rows.len() >= 2 {
        println!("\n{}", compare(&rows)?.render());
    }
    Ok(())
}

fn cmd_compare(files: &[PathBuf], specs: &[String]) -> Result<(), HarnessError> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    for file in files {
        rows.extend(read_summary_rows(file)?);
    }
    let cmp = compare(&rows)?;
    println!("{}", cmp.render());
    for spec in specs {
        let parsed = parse_ordering(spec)?;
        assert_ordering(&cmp, &parsed)?;
        println!("ordering holds: {spec}");
    }
    Ok(())
}

fn cmd_validate(config_path: &Path) -> Result<(), HarnessError> {
    let cfg = load_config(config_path)?;
    let topo = laneflow::topology::build_network(&cfg.network)?;
    println!(
        "ok: '{}' — {} intersections, {} steps, seed {}",
        cfg.name,
        topo.n(),
        cfg.simulation.horizon_steps,
        cfg.simulation.seed
    );
    Ok(())
}
