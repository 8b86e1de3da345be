use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use vmb_core::energy_diagnostics::{Diagnostics, SeriesRecorder};
use vmb_core::kinetic_solver::{load_checkpoint, run, System};
use vmb_core::limit_harness::{
    build_ops, run_epsilon_sweep_with, run_expansion_check_with, run_property_suite, vmb_initial_state, RunConfig,
};
use vmb_core::{Result, VmbError};

#[derive(Parser, Debug)]
#[command(name = "vmb", version, about = "Vlasov-Maxwell-Boltzmann solver and light-speed limit harness")]
struct Cli {
    /// TOML configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for random recipes (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run VMB at the first configured epsilon, writing series.csv and checkpoints.
    Simulate {
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sweep epsilon against the Poisson-closed limit and write rates.json.
    Sweep,
    /// Compare the expansion cascade with direct VMB and write rates.json.
    Expand,
    /// Run the property suite and write report.json.
    Verify,
}

#[derive(Serialize)]
struct Timing<'a> {
    command: &'a str,
    wall_seconds: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Returns whether every gated property held.
fn execute(cli: &Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(VmbError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| VmbError::Config(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    let start = Instant::now();
    let (name, ok) = match &cli.command {
        Command::Simulate { resume } => {
            let ops = build_ops(&cfg)?;
            let initial = match resume {
                Some(path) => load_checkpoint(path)?,
                None => vmb_initial_state(&cfg, &ops, cfg.epsilons[0])?,
            };
            let diag = Diagnostics::new(&ops, cfg.diagnostics.clone())?;
            let mut rec = SeriesRecorder::new(&diag);
            let ckpt = (cfg.solver.checkpoint_every > 0).then_some(out.as_path());
            let traj = run(&initial, System::Vmb, &ops, &cfg.solver, &mut rec, ckpt)?;
            std::fs::write(out.join("series.csv"), rec.to_csv())?;
            eprintln!("simulated to t = {} in {} steps", traj.final_state.t, traj.final_state.step);
            ("simulate", true)
        }
        Command::Sweep => {
            let ops = build_ops(&cfg)?;
            let report = run_epsilon_sweep_with(&cfg, &ops)?;
            write_json(&out.join("rates.json"), &report)?;
            if let Some(fit) = report.fit {
                eprintln!("squared-error slope {:.4}, log residual {:.2e}", fit.slope, fit.residual);
            }
            ("sweep", report.passed != Some(false))
        }
        Command::Expand => {
            let ops = build_ops(&cfg)?;
            let report = run_expansion_check_with(&cfg, &ops)?;
            write_json(&out.join("rates.json"), &report)?;
            if let Some(fit) = report.fit {
                eprintln!("remainder slope {:.4}, log residual {:.2e}", fit.slope, fit.residual);
            }
            ("expand", report.passed != Some(false))
        }
        Command::Verify => {
            let report = run_property_suite(&cfg)?;
            write_json(&out.join("report.json"), &report)?;
            for c in &report.checks {
                eprintln!("{} {} value {:e} threshold {:e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            ("verify", report.all_passed)
        }
    };
    write_json(&out.join("timing.json"), &Timing { command: name, wall_seconds: start.elapsed().as_secs_f64() })?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
