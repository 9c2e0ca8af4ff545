//! Configuration parsing and result emission.
//!
//! # Configuration (TOML)
//!
//! ```toml
//! schema_version = 1
//! seed = 42                      # optional
//! out = "results"                # optional output directory
//!
//! [system]
//! b = [[2.0, -1.0], [-0.5, 2.0]] # or: b_file = "coupling.csv"
//! w = [3.0, 3.0]                 # exactly one of `w` and `schedule`
//! # schedule = [{ t = 0.0, w = [0.0, 0.0] }, { t = 10.0, w = [3.0, 3.0] }]
//! initial_x = [0.0, 0.0]         # optional, defaults to zero
//! initial_z = [0.0, 0.0]
//!
//! [system.gains]                 # optional; scalars broadcast to all agents
//! p = 1.0
//! r = 1.5
//! beta = 1.0
//!
//! [simulation]                   # every key optional
//! horizon = 1e6
//! rtol = 1e-8
//!
//! [study]                        # every key optional
//! n_systems = 100
//! ics_per_system = 10
//!
//! [heating]                      # every key optional
//! alpha = 1.0
//! profile = [[0.0, 20.0], [10.0, 20.0], [15.0, -20.0], [35.0, -20.0], [40.0, 20.0]]
//! ```
//!
//! # Trajectory files
//!
//! Comma-separated with header `t,x_1..x_n,z_1..z_n,u_1..u_n,sat_u_1..sat_u_n,sum_dz`,
//! one row per sample in time order. Values use Rust's shortest round-trip
//! float rendering, so parsing a file back reproduces the samples exactly.
//!
//! # Reports
//!
//! Pretty-printed JSON objects `{"schema_version": 1, "kind": ..., "report": {...}}`
//! with keys in declaration order.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::equilibrium::EquilibriumReport;
use crate::experiments::{HeatingComparison, HeatingScenario, RandomStudyConfig, StudyReport};
use crate::fairness_lp::FairnessCertificate;
use crate::model::{validate_coupling, ClosedLoopState, ControllerGains, CouplingMatrix};
use crate::simulate::{DisturbanceSchedule, SimulationConfig, SimulationResult, TrajectorySample};

pub const SCHEMA_VERSION: u32 = 1;

/// Gains used when a config leaves them out.
pub const DEFAULT_P: f64 = 1.0;
pub const DEFAULT_R: f64 = 1.5;
pub const DEFAULT_BETA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("I/O error on {path}: {message}")]
    Io { path: String, message: String },
}

fn invalid(field: &str, message: impl ToString) -> ConfigError {
    ConfigError::Validation {
        field: field.to_string(),
        message: message.to_string(),
    }
}

fn io_err(path: &Path, e: impl ToString) -> ConfigError {
    ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(&self, n: usize, field: &str) -> Result<DVector<f64>, ConfigError> {
        match self {
            Self::Scalar(v) => Ok(DVector::from_element(n, *v)),
            Self::Vec(v) if v.len() == n => Ok(DVector::from_column_slice(v)),
            Self::Vec(v) => Err(invalid(
                field,
                format!("expected {n} entries, got {}", v.len()),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    system: Option<RawSystem>,
    #[serde(default)]
    simulation: RawSimulation,
    #[serde(default)]
    study: RawStudy,
    #[serde(default)]
    heating: RawHeating,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    b: Option<Vec<Vec<f64>>>,
    b_file: Option<PathBuf>,
    w: Option<Vec<f64>>,
    schedule: Option<Vec<RawBreakpoint>>,
    initial_x: Option<Vec<f64>>,
    initial_z: Option<Vec<f64>>,
    #[serde(default)]
    gains: RawGains,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBreakpoint {
    t: f64,
    w: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGains {
    p: Option<ScalarOrVec>,
    r: Option<ScalarOrVec>,
    beta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    horizon: Option<f64>,
    initial_step: Option<f64>,
    min_step: Option<f64>,
    max_step: Option<f64>,
    rtol: Option<f64>,
    atol: Option<f64>,
    stop_abs: Option<f64>,
    stop_rel: Option<f64>,
    rel_floor: Option<f64>,
    sample_stride: Option<usize>,
    record_trajectory: Option<bool>,
    stop_on_equilibrium: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStudy {
    n_systems: Option<usize>,
    ics_per_system: Option<usize>,
    n_min: Option<usize>,
    n_max: Option<usize>,
    convergence_tol: Option<f64>,
    gain_floor: Option<f64>,
    beta_floor: Option<f64>,
    max_rejections: Option<usize>,
    ic_std: Option<f64>,
    horizon: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeating {
    b: Option<Vec<Vec<f64>>>,
    p: Option<f64>,
    r: Option<f64>,
    beta: Option<f64>,
    alpha: Option<f64>,
    comfort_temperature: Option<f64>,
    profile: Option<Vec<(f64, f64)>>,
    max_step: Option<f64>,
    horizon: Option<f64>,
}

/// A fully specified single system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub coupling: CouplingMatrix,
    pub schedule: DisturbanceSchedule,
    pub gains: ControllerGains,
    pub initial: ClosedLoopState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfiguration {
    pub schema_version: u32,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub system: Option<SystemSpec>,
    pub simulation: SimulationConfig,
    pub study: RandomStudyConfig,
    pub heating: HeatingScenario,
    pub heating_simulation: SimulationConfig,
}

impl Default for RunConfiguration {
    fn default() -> Self {
        let heating = HeatingScenario::default_cold_spell();
        let heating_simulation = heating.default_simulation();
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            out: None,
            system: None,
            simulation: SimulationConfig::default(),
            study: RandomStudyConfig::scaled(42),
            heating,
            heating_simulation,
        }
    }
}

/// Read and validate a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfiguration, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_config_str(
        &text,
        path.parent().unwrap_or(Path::new(".")),
        &path.display().to_string(),
    )
}

/// Parse configuration text; relative file references resolve against `base`.
pub fn parse_config_str(
    text: &str,
    base: &Path,
    origin: &str,
) -> Result<RunConfiguration, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        message: e.to_string().trim_end().to_string(),
    })?;
    let schema_version = raw.schema_version.unwrap_or(SCHEMA_VERSION);
    if schema_version != SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("unsupported version {schema_version}, expected {SCHEMA_VERSION}"),
        ));
    }
    let mut cfg = RunConfiguration {
        schema_version,
        seed: raw.seed,
        out: raw.out,
        ..Default::default()
    };
    if let Some(sys) = raw.system {
        cfg.system = Some(build_system(sys, base)?);
    }
    cfg.simulation = build_simulation(&raw.simulation, SimulationConfig::default())?;
    build_study(&raw.study, &mut cfg.study)?;
    if let Some(seed) = cfg.seed {
        cfg.study.seed = seed;
    }
    build_heating(raw.heating, &mut cfg)?;
    Ok(cfg)
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    if n == 0 {
        return Err(invalid(field, "matrix is empty"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(invalid(
                field,
                format!(
                    "matrix is not square: row {} has {} entries, expected {n}",
                    i + 1,
                    row.len()
                ),
            ));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>, ConfigError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", line + 1),
            })?;
        rows.push(row);
    }
    Ok(rows)
}

fn coupling_from(rows: &[Vec<f64>], field: &str) -> Result<CouplingMatrix, ConfigError> {
    validate_coupling(&matrix_from_rows(rows, field)?).map_err(|e| invalid(field, e))
}

fn build_system(raw: RawSystem, base: &Path) -> Result<SystemSpec, ConfigError> {
    let rows = match (raw.b, raw.b_file) {
        (Some(b), None) => b,
        (None, Some(file)) => read_matrix_csv(&base.join(file))?,
        (Some(_), Some(_)) => {
            return Err(invalid("system.b", "give either `b` or `b_file`, not both"))
        }
        (None, None) => return Err(invalid("system.b", "missing coupling matrix")),
    };
    let coupling = coupling_from(&rows, "system.b")?;
    let n = coupling.n();

    let check_len = |v: &[f64], field: &str| {
        if v.len() == n {
            Ok(())
        } else {
            Err(invalid(
                field,
                format!("expected {n} entries, got {}", v.len()),
            ))
        }
    };
    let schedule = match (raw.w, raw.schedule) {
        (Some(w), None) => {
            check_len(&w, "system.w")?;
            DisturbanceSchedule::Constant(DVector::from_vec(w))
        }
        (None, Some(bp)) => {
            for p in &bp {
                check_len(&p.w, "system.schedule")?;
            }
            DisturbanceSchedule::piecewise_linear(
                bp.into_iter()
                    .map(|p| (p.t, DVector::from_vec(p.w)))
                    .collect(),
            )
            .map_err(|e| invalid("system.schedule", e))?
        }
        (Some(_), Some(_)) => {
            return Err(invalid(
                "system.w",
                "exactly one disturbance specification allowed: got both `w` and `schedule`",
            ))
        }
        (None, None) => {
            return Err(invalid(
                "system.w",
                "missing disturbance (`w` or `schedule`)",
            ))
        }
    };
    schedule.validate().map_err(|e| invalid("system.w", e))?;

    let g = raw.gains;
    let p =
        g.p.unwrap_or(ScalarOrVec::Scalar(DEFAULT_P))
            .expand(n, "system.gains.p")?;
    let r =
        g.r.unwrap_or(ScalarOrVec::Scalar(DEFAULT_R))
            .expand(n, "system.gains.r")?;
    let gains = ControllerGains::new(p, r, g.beta.unwrap_or(DEFAULT_BETA))
        .map_err(|e| invalid("system.gains", e))?;

    let x = raw.initial_x.unwrap_or_else(|| vec![0.0; n]);
    let z = raw.initial_z.unwrap_or_else(|| vec![0.0; n]);
    check_len(&x, "system.initial_x")?;
    check_len(&z, "system.initial_z")?;
    let initial = ClosedLoopState::new(DVector::from_vec(x), DVector::from_vec(z))
        .map_err(|e| invalid("system.initial_x", e))?;
    Ok(SystemSpec {
        coupling,
        schedule,
        gains,
        initial,
    })
}

fn build_simulation(
    raw: &RawSimulation,
    mut s: SimulationConfig,
) -> Result<SimulationConfig, ConfigError> {
    macro_rules! set {
        ($($src:ident => $($dst:ident).+),* $(,)?) => {
            $(if let Some(v) = raw.$src { s.$($dst).+ = v; })*
        };
    }
    set!(
        horizon => horizon,
        initial_step => step.initial_step,
        min_step => step.min_step,
        max_step => step.max_step,
        rtol => step.rtol,
        atol => step.atol,
        stop_abs => stop_abs,
        stop_rel => stop_rel,
        rel_floor => rel_floor,
        sample_stride => sample_stride,
        record_trajectory => record_trajectory,
        stop_on_equilibrium => stop_on_equilibrium,
    );
    s.validate().map_err(|e| invalid("simulation", e))?;
    Ok(s)
}

fn build_study(raw: &RawStudy, study: &mut RandomStudyConfig) -> Result<(), ConfigError> {
    if let Some(v) = raw.n_systems {
        study.n_systems = v;
    }
    if let Some(v) = raw.ics_per_system {
        study.ics_per_system = v;
    }
    if let Some(v) = raw.n_min {
        study.n_range.0 = v;
    }
    if let Some(v) = raw.n_max {
        study.n_range.1 = v;
    }
    if let Some(v) = raw.convergence_tol {
        study.convergence_tol = v;
    }
    if let Some(v) = raw.gain_floor {
        study.gain_floor = v;
    }
    if let Some(v) = raw.beta_floor {
        study.beta_floor = v;
    }
    if let Some(v) = raw.max_rejections {
        study.max_rejections = v;
    }
    if let Some(v) = raw.ic_std {
        study.ic_std = v;
    }
    if let Some(v) = raw.horizon {
        study.simulation.horizon = v;
    }
    study.validate().map_err(|e| invalid("study", e))
}

fn build_heating(raw: RawHeating, cfg: &mut RunConfiguration) -> Result<(), ConfigError> {
    let h = &mut cfg.heating;
    let custom_b = raw.b.is_some();
    if let Some(rows) = raw.b {
        h.coupling = coupling_from(&rows, "heating.b")?;
    }
    let n = h.coupling.n();
    if custom_b || raw.p.is_some() || raw.r.is_some() || raw.beta.is_some() {
        h.gains = ControllerGains::uniform(
            n,
            raw.p.unwrap_or(DEFAULT_P),
            raw.r.unwrap_or(DEFAULT_R),
            raw.beta.unwrap_or(DEFAULT_BETA),
        )
        .map_err(|e| invalid("heating", e))?;
    }
    if let Some(v) = raw.alpha {
        h.alpha = v;
    }
    if let Some(v) = raw.comfort_temperature {
        h.comfort_temperature = v;
    }
    if let Some(v) = raw.profile {
        h.outdoor = v;
    }
    h.validate().map_err(|e| invalid("heating", e))?;
    let mut sim = h.default_simulation();
    if let Some(v) = raw.max_step {
        sim.step.max_step = v;
    }
    if let Some(v) = raw.horizon {
        sim.horizon = v;
    }
    sim.validate().map_err(|e| invalid("heating", e))?;
    cfg.heating_simulation = sim;
    Ok(())
}

/// Column names of a trajectory file for `n` agents.
pub fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for prefix in ["x", "z", "u", "sat_u"] {
        h.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    h.push("sum_dz".into());
    h
}

fn render(v: f64) -> String {
    format!("{v:?}")
}

pub fn emit_trajectory(result: &SimulationResult, path: &Path) -> Result<(), ConfigError> {
    let n = result.n();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    wtr.write_record(trajectory_header(n))
        .map_err(|e| io_err(path, e))?;
    for s in &result.trajectory {
        let mut row = Vec::with_capacity(2 + 4 * n);
        row.push(render(s.t));
        for part in [&s.x, &s.z, &s.u, &s.sat_u] {
            row.extend(part.iter().map(|v| render(*v)));
        }
        row.push(render(s.sum_dz));
        wtr.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    wtr.flush().map_err(|e| io_err(path, e))
}

/// Parse a trajectory file written by [`emit_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectorySample>, ConfigError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.len() < 6 || (header.len() - 2) % 4 != 0 {
        return Err(ConfigError::Parse {
            path: path.display().to_string(),
            message: format!("unexpected column count {}", header.len()),
        });
    }
    let n = (header.len() - 2) / 4;
    if header.iter().collect::<Vec<_>>() != trajectory_header(n) {
        return Err(ConfigError::Parse {
            path: path.display().to_string(),
            message: "header does not match the trajectory schema".into(),
        });
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ConfigError::Parse {
                path: path.display().to_string(),
                message: format!("line {}: {e}", line + 2),
            })?;
        let block = |k: usize| vals[1 + k * n..1 + (k + 1) * n].to_vec();
        out.push(TrajectorySample {
            t: vals[0],
            x: block(0),
            z: block(1),
            u: block(2),
            sat_u: block(3),
            sum_dz: vals[1 + 4 * n],
        });
    }
    Ok(out)
}

pub(crate) fn ser_dvector<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(v.iter())
}

/// Anything that can be written with [`emit_report`].
pub trait ReportDocument: Serialize {
    const KIND: &'static str;
}

impl ReportDocument for StudyReport {
    const KIND: &'static str = "study";
}

impl ReportDocument for EquilibriumReport {
    const KIND: &'static str = "equilibrium";
}

impl ReportDocument for FairnessCertificate {
    const KIND: &'static str = "fairness_certificate";
}

/// Summary of one integration; the trajectory itself goes to CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub variant: crate::simulate::LoopVariant,
    pub converged: bool,
    pub t_final: f64,
    pub final_x: Vec<f64>,
    pub final_z: Vec<f64>,
    pub distance_to_equilibrium: Option<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl From<&SimulationResult> for SimulationSummary {
    fn from(r: &SimulationResult) -> Self {
        Self {
            variant: r.variant,
            converged: r.converged,
            t_final: r.t_final,
            final_x: r.final_state.x.iter().copied().collect(),
            final_z: r.final_state.z.iter().copied().collect(),
            distance_to_equilibrium: r.distance_to_equilibrium,
            accepted_steps: r.accepted_steps,
            rejected_steps: r.rejected_steps,
        }
    }
}

impl ReportDocument for SimulationSummary {
    const KIND: &'static str = "simulation";
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatingSummary {
    pub worst_coordinated: f64,
    pub worst_uncoordinated: f64,
    pub worst_agent_coordinated: usize,
    pub worst_agent_uncoordinated: usize,
    pub plateau: crate::experiments::PlateauCheck,
    pub coordinated: SimulationSummary,
    pub uncoordinated: SimulationSummary,
}

impl From<&HeatingComparison> for HeatingSummary {
    fn from(c: &HeatingComparison) -> Self {
        Self {
            worst_coordinated: c.worst_coordinated,
            worst_uncoordinated: c.worst_uncoordinated,
            worst_agent_coordinated: c.worst_agent_coordinated,
            worst_agent_uncoordinated: c.worst_agent_uncoordinated,
            plateau: c.plateau.clone(),
            coordinated: (&c.coordinated).into(),
            uncoordinated: (&c.uncoordinated).into(),
        }
    }
}

impl ReportDocument for HeatingSummary {
    const KIND: &'static str = "heating";
}

/// M-matrix diagnostics for a validated coupling matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingDiagnostics {
    pub n: usize,
    /// `min_i (B_ii - sum_{j != i} |B_ij|)`
    pub dominance_margin: f64,
    /// Largest entry of `|B M - I|`.
    pub inverse_residual: f64,
    pub min_inverse_entry: f64,
    pub inverse_row_sums: Vec<f64>,
}

impl From<&CouplingMatrix> for CouplingDiagnostics {
    fn from(c: &CouplingMatrix) -> Self {
        Self {
            n: c.n(),
            dominance_margin: c.dominance_margin(),
            inverse_residual: c.inverse_residual(),
            min_inverse_entry: c.m().min(),
            inverse_row_sums: c.row_sums().iter().copied().collect(),
        }
    }
}

impl ReportDocument for CouplingDiagnostics {
    const KIND: &'static str = "check";
}

#[derive(Serialize)]
struct Envelope<'a, R> {
    schema_version: u32,
    kind: &'static str,
    report: &'a R,
}

/// Render a report as the JSON text written by [`emit_report`].
pub fn report_json<R: ReportDocument>(report: &R) -> String {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: R::KIND,
        report,
    };
    let mut s = serde_json::to_string_pretty(&env).expect("report types serialize infallibly");
    s.push('\n');
    s
}

pub fn emit_report<R: ReportDocument>(report: &R, path: &Path) -> Result<(), ConfigError> {
    fs::write(path, report_json(report)).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{equilibrium_report, EquilibriumTolerances};
    use crate::model::Disturbance;
    use crate::simulate::LoopVariant;

    fn parse(text: &str) -> Result<RunConfiguration, ConfigError> {
        parse_config_str(text, Path::new("."), "test.toml")
    }

    #[test]
    fn minimal_config_gets_default_gains() {
        let cfg = parse("[system]\nb = [[2.0, -1.0], [-0.5, 2.0]]\nw = [3.0, 3.0]\n").unwrap();
        let sys = cfg.system.unwrap();
        assert_eq!(sys.gains.beta(), 1.0);
        assert!(sys.gains.p().iter().all(|v| *v == 1.0));
        assert!(sys.gains.r().iter().all(|v| *v == 1.5));
        assert_eq!(
            sys.schedule,
            DisturbanceSchedule::Constant(DVector::from_vec(vec![3.0, 3.0]))
        );
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.simulation, SimulationConfig::default());
    }

    #[test]
    fn non_square_matrix_is_rejected() {
        let err = parse("[system]\nb = [[2.0, -1.0], [-0.5]]\nw = [3.0, 3.0]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Validation { ref field, .. } if field == "system.b"));
    }

    #[test]
    fn both_disturbances_are_rejected() {
        let err = parse(
            "[system]\nb = [[2.0]]\nw = [3.0]\nschedule = [{ t = 0.0, w = [1.0] }, { t = 1.0, w = [2.0] }]\n",
        )
        .unwrap_err();
        assert!(
            matches!(err, ConfigError::Validation { ref message, .. } if message.contains("exactly one"))
        );
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse("schema_version = 1\n[system\nb = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { message, .. } => assert!(message.contains("line 2"), "{message}"),
            other => panic!("{other:?}"),
        }
        let err = parse("bogus_key = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }));
    }

    #[test]
    fn schedule_and_overrides() {
        let cfg = parse(
            r#"
schema_version = 1
seed = 9
[system]
b = [[2.0, -1.0], [-0.5, 2.0]]
schedule = [{ t = 0.0, w = [0.0, 0.0] }, { t = 5.0, w = [3.0, 3.0] }]
[system.gains]
p = [1.0, 2.0]
r = 0.5
beta = 3.0
[simulation]
horizon = 50.0
rtol = 1e-6
[study]
n_systems = 3
[heating]
alpha = 0.5
"#,
        )
        .unwrap();
        let sys = cfg.system.unwrap();
        assert_eq!(sys.gains.p()[1], 2.0);
        assert_eq!(sys.gains.beta(), 3.0);
        assert_eq!(sys.schedule.settles_at(), 5.0);
        assert_eq!(cfg.simulation.horizon, 50.0);
        assert_eq!(cfg.simulation.step.rtol, 1e-6);
        assert_eq!(cfg.study.n_systems, 3);
        assert_eq!(cfg.study.seed, 9);
        assert_eq!(cfg.heating.alpha, 0.5);
    }

    #[test]
    fn wrong_schema_version() {
        assert!(parse("schema_version = 2\n").is_err());
    }

    #[test]
    fn equilibrium_report_schema() {
        let c = validate_coupling(&DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -0.5, 2.0])).unwrap();
        let g = ControllerGains::uniform(2, 1.0, 1.5, 1.0).unwrap();
        let r = equilibrium_report(
            &c,
            &Disturbance::zeros(2),
            &g,
            EquilibriumTolerances::default(),
        )
        .unwrap();
        let text = report_json(&r);
        assert_eq!(text, report_json(&r));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["kind"], "equilibrium");
        assert_eq!(v["report"]["point"]["x0"], serde_json::json!([0.0, 0.0]));
    }

    #[test]
    fn single_sample_trajectory_is_header_plus_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let result = SimulationResult {
            variant: LoopVariant::Coordinated,
            converged: true,
            t_final: 0.0,
            final_state: ClosedLoopState::zeros(2),
            trajectory: vec![TrajectorySample {
                t: 0.0,
                x: vec![0.0; 2],
                z: vec![0.0; 2],
                u: vec![0.0; 2],
                sat_u: vec![0.0; 2],
                sum_dz: 0.0,
            }],
            distance_to_equilibrium: None,
            accepted_steps: 0,
            rejected_steps: 0,
        };
        emit_trajectory(&result, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 10);
        assert!(lines[1].starts_with("0.0,"));
    }

    #[test]
    fn study_report_schema() {
        let cfg = RandomStudyConfig {
            n_systems: 2,
            ics_per_system: 1,
            ..RandomStudyConfig::scaled(3)
        };
        let report = crate::experiments::run_convergence_study(&cfg).unwrap();
        let text = report_json(&report);
        assert_eq!(text, report_json(&report));
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v["report"]["aggregate"]["max_distance"].is_number());
        assert_eq!(v["report"]["aggregate"]["tolerance"], 0.005);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let result = SimulationResult {
            variant: LoopVariant::Coordinated,
            converged: true,
            t_final: 0.3,
            final_state: ClosedLoopState::zeros(1),
            trajectory: vec![
                TrajectorySample {
                    t: 0.0,
                    x: vec![0.1 + 0.2],
                    z: vec![-1e-300],
                    u: vec![1.0 / 3.0],
                    sat_u: vec![1.0 / 3.0],
                    sum_dz: 0.0,
                },
                TrajectorySample {
                    t: 0.3,
                    x: vec![123456789.12345679],
                    z: vec![f64::MIN_POSITIVE],
                    u: vec![-7.5],
                    sat_u: vec![-1.0],
                    sum_dz: -6.5,
                },
            ],
            distance_to_equilibrium: None,
            accepted_steps: 1,
            rejected_steps: 0,
        };
        emit_trajectory(&result, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x_1,z_1,u_1,sat_u_1,sum_dz");
        assert_eq!(read_trajectory(&path).unwrap(), result.trajectory);
    }
}
