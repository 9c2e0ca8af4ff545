use std::fs;
use std::path::{Path, PathBuf};
use std::process;

use awfair::equilibrium::{equilibrium_report, EquilibriumTolerances};
use awfair::experiments::{run_convergence_study, run_heating_comparison, RandomStudyConfig};
use awfair::fairness_lp::{min_infnorm, DEFAULT_BISECTION_TOL};
use awfair::io::{
    emit_report, emit_trajectory, parse_config, report_json, ConfigError, CouplingDiagnostics,
    HeatingSummary, ReportDocument, RunConfiguration, SimulationSummary, SystemSpec,
};
use awfair::{integrate, Disturbance, DisturbanceSchedule, Error, ExitCode, LoopVariant};
use clap::{Parser, Subcommand};

/// Fair equilibria of saturated resource-sharing networks under rank-one anti-windup.
#[derive(Debug, Parser)]
#[command(name = "awfair", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the randomized study (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report and trajectory files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Tolerance override: existence/tie tolerance for `equilibrium`, bisection
    /// width for `--certify`, relative step tolerance for `simulate` and
    /// `heating`, convergence distance for `study`.
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate the coupling matrix and print M-matrix diagnostics.
    Check,
    /// Existence, uniqueness and the closed-form fair equilibrium.
    Equilibrium {
        /// Also solve the min-max LP and compare it with the closed form;
        /// exits nonzero when they disagree.
        #[arg(long)]
        certify: bool,
    },
    /// Integrate the closed loop once from the configured initial state.
    Simulate {
        /// Use purely local anti-windup instead of the broadcast term.
        #[arg(long)]
        uncoordinated: bool,
    },
    /// Randomized convergence study (100 systems x 10 initial states by default).
    Study {
        /// Run the full 1000 x 100 study.
        #[arg(long)]
        full: bool,
    },
    /// Coordinated vs. uncoordinated district-heating comparison.
    Heating,
}

/// Outcome that is not a hard error but still maps to a nonzero exit.
struct Verdict(ExitCode);

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(Verdict(code)) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    process::exit(code as i32);
}

fn load(cli: &Cli) -> Result<RunConfiguration, Error> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfiguration::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
        cfg.study.seed = seed;
    }
    if cli.out.is_some() {
        cfg.out.clone_from(&cli.out);
    }
    if let Some(tol) = cli.tol {
        if !(tol.is_finite() && tol > 0.0) {
            return Err(invalid("tol", format!("must be positive, got {tol}")));
        }
    }
    Ok(cfg)
}

fn invalid(field: &str, message: impl ToString) -> Error {
    ConfigError::Validation {
        field: field.into(),
        message: message.to_string(),
    }
    .into()
}

fn system(cfg: &RunConfiguration) -> Result<&SystemSpec, Error> {
    cfg.system.as_ref().ok_or_else(|| {
        invalid(
            "system",
            "this command needs a [system] block (pass --config)",
        )
    })
}

/// The disturbance an equilibrium is computed for: the constant `w`, or the
/// final value of a schedule.
fn steady_disturbance(schedule: &DisturbanceSchedule) -> Result<Disturbance, Error> {
    let w = match schedule {
        DisturbanceSchedule::Constant(w) => w.clone(),
        DisturbanceSchedule::PiecewiseLinear(points) => points.last().expect("validated").1.clone(),
    };
    Ok(Disturbance::new(w)?)
}

fn output_dir(cfg: &RunConfiguration) -> Result<Option<&Path>, Error> {
    match cfg.out.as_deref() {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| ConfigError::Io {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(Some(dir))
        }
        None => Ok(None),
    }
}

fn publish<R: ReportDocument>(report: &R, out: Option<&Path>, file: &str) -> Result<(), Error> {
    print!("{}", report_json(report));
    if let Some(dir) = out {
        emit_report(report, &dir.join(file))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Verdict, Error> {
    let mut cfg = load(cli)?;
    let ok = Verdict(ExitCode::Success);
    match cli.command {
        Command::Check => {
            let sys = system(&cfg)?;
            publish(
                &CouplingDiagnostics::from(&sys.coupling),
                output_dir(&cfg)?,
                "check.json",
            )?;
            Ok(ok)
        }
        Command::Equilibrium { certify } => {
            let sys = system(&cfg)?;
            let w = steady_disturbance(&sys.schedule)?;
            let tolerances =
                cli.tol
                    .map_or_else(EquilibriumTolerances::default, |t| EquilibriumTolerances {
                        strict_tol: t,
                        tie_tol: t,
                    });
            let report = equilibrium_report(&sys.coupling, &w, &sys.gains, tolerances)?;
            let out = output_dir(&cfg)?;
            publish(&report, out, "equilibrium.json")?;
            for warning in &report.warnings {
                eprintln!("warning: {warning}");
            }
            if certify {
                let cert =
                    min_infnorm(&sys.coupling, &w, cli.tol.unwrap_or(DEFAULT_BISECTION_TOL))?;
                publish(&cert, out, "certificate.json")?;
                if !cert.agreement {
                    eprintln!("certificate: LP optimum disagrees with the closed form");
                    return Ok(Verdict(ExitCode::Validation));
                }
            }
            if report.point.is_none() {
                return Ok(Verdict(ExitCode::Validation));
            }
            Ok(ok)
        }
        Command::Simulate { uncoordinated } => {
            let sys = system(&cfg)?;
            let variant = if uncoordinated {
                LoopVariant::Uncoordinated
            } else {
                LoopVariant::Coordinated
            };
            let mut sim = cfg.simulation;
            if let Some(t) = cli.tol {
                sim.step.rtol = t;
            }
            let w = steady_disturbance(&sys.schedule)?;
            let report = equilibrium_report(
                &sys.coupling,
                &w,
                &sys.gains,
                EquilibriumTolerances::default(),
            )?;
            let reference = report.point.as_ref().map(|p| &p.x0);
            let result = integrate(
                variant,
                &sys.initial,
                &sys.schedule,
                &sys.coupling,
                &sys.gains,
                &sim,
                reference,
            )?;
            let out = output_dir(&cfg)?;
            publish(&SimulationSummary::from(&result), out, "simulation.json")?;
            if let Some(dir) = out {
                if sim.record_trajectory {
                    emit_trajectory(&result, &dir.join("trajectory.csv"))?;
                }
            }
            Ok(ok)
        }
        Command::Study { full } => {
            if full {
                cfg.study = RandomStudyConfig {
                    seed: cfg.study.seed,
                    simulation: cfg.study.simulation,
                    ..RandomStudyConfig::default()
                };
            }
            if let Some(t) = cli.tol {
                cfg.study.convergence_tol = t;
            }
            let report = run_convergence_study(&cfg.study)?;
            publish(&report, output_dir(&cfg)?, "study.json")?;
            let a = &report.aggregate;
            eprintln!(
                "{}/{} runs converged, max distance {:.3e} (tolerance {}), {} LP disagreements",
                a.converged_runs, a.total_runs, a.max_distance, a.tolerance, a.lp_disagreements
            );
            Ok(if report.passed() {
                ok
            } else {
                Verdict(ExitCode::Validation)
            })
        }
        Command::Heating => {
            let mut sim = cfg.heating_simulation;
            if let Some(t) = cli.tol {
                sim.step.rtol = t;
            }
            let comparison = run_heating_comparison(&cfg.heating, &sim)?;
            let out = output_dir(&cfg)?;
            publish(&HeatingSummary::from(&comparison), out, "heating.json")?;
            if let Some(dir) = out {
                emit_trajectory(
                    &comparison.coordinated,
                    &dir.join("heating_coordinated.csv"),
                )?;
                emit_trajectory(
                    &comparison.uncoordinated,
                    &dir.join("heating_uncoordinated.csv"),
                )?;
            }
            Ok(ok)
        }
    }
}
