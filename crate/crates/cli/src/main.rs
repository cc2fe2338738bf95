//! `fabric-sim`: batch runner for aperture-fabric scenarios.
//!
//! Exit status: 0 success, 1 configuration error, 2 validation failure,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aperture_fabric::pipeline::{self, PipelineError, RunOptions};
use aperture_fabric::scenario::SHIPPED;
use aperture_fabric::Scenario;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "fabric-sim",
    version,
    about = "Frequency-indexed near-field FMCW simulation and imaging"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the chirp schedule and check guard timing.
    Schedule(Common),
    /// Synthesize the raw cube and per-state range profiles.
    Simulate(Common),
    /// Fit calibration parameters from the reference scatterers.
    Calibrate(Common),
    /// Simulate, calibrate and focus an image.
    Image(Common),
    /// Evaluate the relative link budget.
    Budget(Common),
    /// Full chain with every artifact and a summary.
    E2e(Common),
    /// List the bundled scenarios.
    List,
}

#[derive(Args)]
struct Common {
    /// Scenario TOML file, or the name of a bundled scenario.
    #[arg(long)]
    config: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Image with the nominal mapping instead of fitted parameters.
    #[arg(long)]
    no_calibrate: bool,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions {
            seed: self.seed,
            calibrate: !self.no_calibrate,
        }
    }

    fn scenario(&self) -> Result<Scenario, PipelineError> {
        let path = Path::new(&self.config);
        let scenario = if path.exists() {
            Scenario::load(path)?
        } else {
            Scenario::shipped(&self.config)?
        };
        Ok(scenario)
    }
}

fn run(command: Command) -> Result<(), PipelineError> {
    let c = match &command {
        Command::List => {
            for (name, _) in SHIPPED {
                println!("{name}");
            }
            return Ok(());
        }
        Command::Schedule(c)
        | Command::Simulate(c)
        | Command::Calibrate(c)
        | Command::Image(c)
        | Command::Budget(c)
        | Command::E2e(c) => c,
    };
    let scenario = c.scenario()?;
    let opts = c.options();
    match &command {
        Command::Schedule(_) => {
            let r = pipeline::run_schedule(&scenario, &opts, &c.out)?;
            println!("guard check passed, margin {:.3e} s", r.margin_s);
        }
        Command::Simulate(_) => {
            let p = pipeline::run_simulate(&scenario, &opts, &c.out)?;
            println!("{} of {} states usable", p.usable.len(), p.snr_db.len());
        }
        Command::Calibrate(_) => report_fit(&pipeline::run_calibrate(&scenario, &opts, &c.out)?),
        Command::Image(_) => print!("{}", pipeline::run_image(&scenario, &opts, &c.out)?.to_text()),
        Command::Budget(_) => print!("{}", pipeline::run_budget(&scenario, &opts, &c.out)?.to_text()),
        Command::E2e(_) => {
            let r = pipeline::run_e2e(&scenario, &opts, &c.out)?;
            if let Some(fit) = &r.fit {
                report_fit(fit);
            }
            print!("{}", r.summary_text());
        }
        Command::List => unreachable!("handled above"),
    }
    println!("outputs written to {}", c.out.display());
    Ok(())
}

fn report_fit(fit: &aperture_fabric::FitReport) {
    if !fit.converged {
        eprintln!(
            "warning: calibration did not converge after {} iterations",
            fit.iterations
        );
    }
    if let Some(d) = &fit.diagnostic {
        eprintln!("warning: {d:?}");
    }
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
