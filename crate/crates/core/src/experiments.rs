//! Seeded experiments: the randomized convergence study and the
//! district-heating comparison.
//!
//! Every system in a study owns a ChaCha stream selected by its index, so the
//! report does not depend on scheduling order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::equilibrium::{
    candidate_equilibrium, existence_condition, maximizing_set, EquilibriumError,
    EquilibriumTolerances,
};
use crate::fairness_lp::{min_infnorm, LpError, DEFAULT_BISECTION_TOL};
use crate::model::{
    validate_coupling, ClosedLoopState, ControllerGains, CouplingMatrix, Disturbance, ModelError,
};
use crate::simulate::{
    integrate, DisturbanceSchedule, LoopVariant, SimulationConfig, SimulationError,
    SimulationResult, StepControl,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error("no admissible disturbance after {attempts} draws")]
    RejectionBudgetExhausted { attempts: usize },
    #[error("could not draw a valid system in {attempts} attempts")]
    SystemDrawFailed { attempts: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

const MAX_SYSTEM_REDRAWS: usize = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomStudyConfig {
    pub n_systems: usize,
    pub ics_per_system: usize,
    /// Inclusive range of system sizes.
    pub n_range: (usize, usize),
    pub seed: u64,
    pub convergence_tol: f64,
    pub gain_floor: f64,
    pub beta_floor: f64,
    pub max_rejections: usize,
    /// Standard deviation of the initial `x` and `z` entries.
    pub ic_std: f64,
    pub simulation: SimulationConfig,
}

impl Default for RandomStudyConfig {
    fn default() -> Self {
        Self {
            n_systems: 1000,
            ics_per_system: 100,
            n_range: (5, 15),
            seed: 42,
            convergence_tol: 0.005,
            gain_floor: 1e-3,
            beta_floor: 1e-3,
            max_rejections: 10_000,
            ic_std: 100.0,
            simulation: SimulationConfig {
                record_trajectory: false,
                ..Default::default()
            },
        }
    }
}

impl RandomStudyConfig {
    /// 100 systems with 10 initial conditions each.
    pub fn scaled(seed: u64) -> Self {
        Self {
            n_systems: 100,
            ics_per_system: 10,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.n_systems == 0 || self.ics_per_system == 0 || self.max_rejections == 0 {
            return bad("counts must be at least 1".into());
        }
        let (lo, hi) = self.n_range;
        if lo < 1 || hi > 64 || lo > hi {
            return bad(format!("n_range [{lo}, {hi}] must lie within [1, 64]"));
        }
        for (name, v) in [
            ("convergence_tol", self.convergence_tol),
            ("gain_floor", self.gain_floor),
            ("beta_floor", self.beta_floor),
            ("ic_std", self.ic_std),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        self.simulation.validate()?;
        Ok(())
    }
}

/// One admissible random system.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSystem {
    pub coupling: CouplingMatrix,
    pub gains: ControllerGains,
    pub w: Disturbance,
    /// `|d_i|`, the designed dominance margin of row `i`.
    pub margins: Vec<f64>,
    pub rejections_a1: usize,
    pub rejections_a2: usize,
    /// Raised when flooring made some `r_i > p_i`.
    pub floor_broke_order: bool,
}

/// The per-system RNG for system `index` of a study seeded with `seed`.
pub fn system_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw one system; fails when no admissible `w` turns up within the
/// rejection budget.
pub fn random_system_once<R: Rng>(
    rng: &mut R,
    config: &RandomStudyConfig,
) -> Result<RandomSystem, ExperimentError> {
    let std_normal = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let (lo, hi) = config.n_range;
    let n = rng.random_range(lo..=hi);

    let c: Vec<f64> = (0..n * n).map(|_| -std_normal.sample(rng).abs()).collect();
    let d_dist = Normal::new(0.0, n as f64).expect("positive std");
    let margins: Vec<f64> = (0..n).map(|_| d_dist.sample(rng).abs()).collect();
    let mut b = DMatrix::from_row_slice(n, n, &c);
    for i in 0..n {
        let row_abs: f64 = c[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
        b[(i, i)] += row_abs + margins[i];
    }
    let coupling = validate_coupling(&b)?;

    // beta ~ U(0, 10]
    let beta = (10.0 * (1.0 - rng.random::<f64>())).max(config.beta_floor);
    let p: Vec<f64> = (0..n)
        .map(|_| std_normal.sample(rng).abs().max(config.gain_floor))
        .collect();
    let r: Vec<f64> = p
        .iter()
        .map(|&pi| (pi * rng.random::<f64>()).max(config.gain_floor))
        .collect();
    let floor_broke_order = p.iter().zip(&r).any(|(p, r)| r > p);
    let gains = ControllerGains::new(DVector::from_vec(p), DVector::from_vec(r), beta)?;

    let tol = EquilibriumTolerances::default();
    let w_dist = Normal::new(0.0, 5.0).expect("positive std");
    let mut rejections_a1 = 0;
    let mut rejections_a2 = 0;
    for _ in 0..config.max_rejections {
        let w = Disturbance::new(DVector::from_iterator(
            n,
            (0..n).map(|_| w_dist.sample(rng)),
        ))?;
        if !existence_condition(&coupling, &w, tol.strict_tol)?.is_strict() {
            rejections_a1 += 1;
            continue;
        }
        if !maximizing_set(&coupling, &w, tol.tie_tol)?.unique {
            rejections_a2 += 1;
            continue;
        }
        return Ok(RandomSystem {
            coupling,
            gains,
            w,
            margins,
            rejections_a1,
            rejections_a2,
            floor_broke_order,
        });
    }
    Err(ExperimentError::RejectionBudgetExhausted {
        attempts: config.max_rejections,
    })
}

/// Draw systems until one is admissible. Returns the system and the number of
/// whole-system redraws.
pub fn random_system<R: Rng>(
    rng: &mut R,
    config: &RandomStudyConfig,
) -> Result<(RandomSystem, usize), ExperimentError> {
    for redraws in 0..MAX_SYSTEM_REDRAWS {
        match random_system_once(rng, config) {
            Ok(s) => return Ok((s, redraws)),
            Err(ExperimentError::RejectionBudgetExhausted { .. })
            | Err(ExperimentError::Model(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Err(ExperimentError::SystemDrawFailed {
        attempts: MAX_SYSTEM_REDRAWS,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub converged: bool,
    pub t_final: f64,
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemRecord {
    pub id: usize,
    pub n: usize,
    pub beta: f64,
    pub k: usize,
    pub conjecture_ok: bool,
    pub floor_broke_order: bool,
    pub redraws: usize,
    pub rejections_a1: usize,
    pub rejections_a2: usize,
    /// `||x0||_inf` of the closed-form equilibrium.
    pub equilibrium_value: f64,
    pub residual_plant: f64,
    pub residual_integrator: f64,
    /// LP optimum of the fair allocation problem.
    pub lp_value: f64,
    pub lp_agreement: bool,
    pub runs: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyAggregate {
    pub max_distance: f64,
    pub tolerance: f64,
    pub total_runs: usize,
    pub converged_runs: usize,
    pub exceeding_tolerance: usize,
    pub failed_runs: usize,
    pub rejections_a1: usize,
    pub rejections_a2: usize,
    pub system_redraws: usize,
    pub lp_disagreements: usize,
    pub floor_broke_order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub config: RandomStudyConfig,
    pub systems: Vec<SystemRecord>,
    pub aggregate: StudyAggregate,
}

impl StudyReport {
    /// True when every run converged within the tolerance and every LP
    /// certificate agreed.
    pub fn passed(&self) -> bool {
        let a = &self.aggregate;
        a.converged_runs == a.total_runs && a.exceeding_tolerance == 0 && a.lp_disagreements == 0
    }
}

/// Draw system `index` of a study and evaluate its equilibrium and LP optimum.
pub fn study_system(
    config: &RandomStudyConfig,
    index: usize,
) -> Result<(RandomSystem, SystemRecord, ChaCha8Rng), ExperimentError> {
    let mut rng = system_rng(config.seed, index as u64);
    let (sys, redraws) = random_system(&mut rng, config)?;
    let k = maximizing_set(
        &sys.coupling,
        &sys.w,
        EquilibriumTolerances::default().tie_tol,
    )?
    .indices[0];
    let eq = candidate_equilibrium(&sys.coupling, &sys.w, &sys.gains, k)?;
    let cert = min_infnorm(&sys.coupling, &sys.w, DEFAULT_BISECTION_TOL)?;
    let equilibrium_value = eq.cost();
    let record = SystemRecord {
        id: index,
        n: sys.coupling.n(),
        beta: sys.gains.beta(),
        k,
        conjecture_ok: sys.gains.conjecture_ok(),
        floor_broke_order: sys.floor_broke_order,
        redraws,
        rejections_a1: sys.rejections_a1,
        rejections_a2: sys.rejections_a2,
        equilibrium_value,
        residual_plant: eq.residual_plant,
        residual_integrator: eq.residual_integrator,
        lp_value: cert.gamma_star,
        lp_agreement: crate::fairness_lp::values_agree(cert.gamma_star, equilibrium_value),
        runs: Vec::new(),
    };
    Ok((sys, record, rng))
}

fn run_system(config: &RandomStudyConfig, index: usize) -> Result<SystemRecord, ExperimentError> {
    let (sys, mut record, mut rng) = study_system(config, index)?;
    let k = record.k;
    let eq = candidate_equilibrium(&sys.coupling, &sys.w, &sys.gains, k)?;
    let n = sys.coupling.n();
    let ic = Normal::new(0.0, config.ic_std).expect("positive std");
    let initials: Vec<ClosedLoopState> = (0..config.ics_per_system)
        .map(|_| ClosedLoopState {
            x: DVector::from_iterator(n, (0..n).map(|_| ic.sample(&mut rng))),
            z: DVector::from_iterator(n, (0..n).map(|_| ic.sample(&mut rng))),
        })
        .collect();
    let schedule = DisturbanceSchedule::Constant(sys.w.as_vector().clone());
    record.runs = initials
        .par_iter()
        .map(|init| {
            match integrate(
                LoopVariant::Coordinated,
                init,
                &schedule,
                &sys.coupling,
                &sys.gains,
                &config.simulation,
                Some(&eq.x0),
            ) {
                Ok(r) => RunRecord {
                    converged: r.converged,
                    t_final: r.t_final,
                    distance: r.distance_to_equilibrium,
                    error: None,
                },
                Err(e) => RunRecord {
                    converged: false,
                    t_final: f64::NAN,
                    distance: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(record)
}

/// The randomized convergence study: random admissible systems, each
/// simulated from Gaussian initial conditions and compared against its
/// closed-form equilibrium.
pub fn run_convergence_study(config: &RandomStudyConfig) -> Result<StudyReport, ExperimentError> {
    config.validate()?;
    let systems: Vec<SystemRecord> = (0..config.n_systems)
        .into_par_iter()
        .map(|i| run_system(config, i))
        .collect::<Result<_, _>>()?;

    let runs = || systems.iter().flat_map(|s| s.runs.iter());
    let max_distance = runs().filter_map(|r| r.distance).fold(0.0f64, f64::max);
    let aggregate = StudyAggregate {
        max_distance,
        tolerance: config.convergence_tol,
        total_runs: runs().count(),
        converged_runs: runs().filter(|r| r.converged).count(),
        exceeding_tolerance: runs()
            .filter(|r| r.distance.is_none_or(|d| d > config.convergence_tol))
            .count(),
        failed_runs: runs().filter(|r| r.error.is_some()).count(),
        rejections_a1: systems.iter().map(|s| s.rejections_a1).sum(),
        rejections_a2: systems.iter().map(|s| s.rejections_a2).sum(),
        system_redraws: systems.iter().map(|s| s.redraws).sum(),
        lp_disagreements: systems.iter().filter(|s| !s.lp_agreement).count(),
        floor_broke_order: systems.iter().filter(|s| s.floor_broke_order).count(),
    };
    Ok(StudyReport {
        config: config.clone(),
        systems,
        aggregate,
    })
}

/// The five-building coupling matrix: building 1 sits next to the heat source
/// and building 5 at the far end of the network.
pub fn heating_matrix() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            260.0, -30.0, -30.0, -45.0, -50.0, //
            -15.0, 250.0, -30.0, -45.0, -50.0, //
            -15.0, -20.0, 210.0, -45.0, -50.0, //
            -15.0, -20.0, -30.0, 175.0, -50.0, //
            -15.0, -20.0, -30.0, -40.0, 110.0,
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatingScenario {
    pub coupling: CouplingMatrix,
    pub gains: ControllerGains,
    /// `(t, outdoor temperature in C)`, strictly increasing in `t`.
    pub outdoor: Vec<(f64, f64)>,
    /// Indoor comfort temperature; zero deviation.
    pub comfort_temperature: f64,
    /// `w_i(t) = alpha * (T_out(t) - comfort_temperature)` for every building.
    pub alpha: f64,
}

impl HeatingScenario {
    /// A synthetic cold spell: mild for 10 time units, a 5-unit ramp down to
    /// -20 C, 20 units at -20 C, then a 5-unit ramp back.
    pub fn default_cold_spell() -> Self {
        let coupling = validate_coupling(&heating_matrix()).expect("bundled matrix is an M-matrix");
        Self {
            coupling,
            gains: ControllerGains::uniform(5, 1.0, 1.5, 1.0).expect("positive gains"),
            outdoor: vec![
                (0.0, 20.0),
                (10.0, 20.0),
                (15.0, -20.0),
                (35.0, -20.0),
                (40.0, 20.0),
            ],
            comfort_temperature: 20.0,
            alpha: 1.0,
        }
    }

    pub fn n(&self) -> usize {
        self.coupling.n()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.gains.check_dim(self.n())?;
        if self.outdoor.is_empty() {
            return Err(ExperimentError::InvalidConfig(
                "empty outdoor profile".into(),
            ));
        }
        if self
            .outdoor
            .iter()
            .any(|(t, temp)| !t.is_finite() || !temp.is_finite())
            || !self.alpha.is_finite()
            || !self.comfort_temperature.is_finite()
        {
            return Err(ExperimentError::InvalidConfig(
                "profile, alpha and comfort temperature must be finite".into(),
            ));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn disturbance_at(&self, temperature: f64) -> DVector<f64> {
        DVector::from_element(
            self.n(),
            self.alpha * (temperature - self.comfort_temperature),
        )
    }

    pub fn schedule(&self) -> Result<DisturbanceSchedule, SimulationError> {
        DisturbanceSchedule::piecewise_linear(
            self.outdoor
                .iter()
                .map(|(t, temp)| (*t, self.disturbance_at(*temp)))
                .collect(),
        )
    }

    /// The time window spent at the coldest temperature of the profile.
    pub fn cold_plateau(&self) -> (f64, f64, f64) {
        let coldest = self
            .outdoor
            .iter()
            .map(|(_, temp)| *temp)
            .fold(f64::INFINITY, f64::min);
        let first = self
            .outdoor
            .iter()
            .position(|(_, temp)| *temp == coldest)
            .expect("non-empty profile");
        let mut last = first;
        while last + 1 < self.outdoor.len() && self.outdoor[last + 1].1 == coldest {
            last += 1;
        }
        (self.outdoor[first].0, self.outdoor[last].0, coldest)
    }

    /// Simulation settings for the heating runs: the profile plus 20 time
    /// units of recovery, with a step bound that resolves the ramps.
    pub fn default_simulation(&self) -> SimulationConfig {
        let end = self.outdoor.last().map_or(0.0, |(t, _)| *t);
        SimulationConfig {
            horizon: end + 20.0,
            step: StepControl {
                max_step: 0.05,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

/// State of the coordinated loop at the end of the cold plateau.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauCheck {
    pub t: f64,
    pub temperature: f64,
    pub x: Vec<f64>,
    /// Analytic common deviation `dz(M_k w) / M_k 1`, when the equilibrium exists.
    pub analytic: Option<f64>,
    /// `max_i x_i - min_i x_i`.
    pub spread: f64,
    pub distance_to_analytic: Option<f64>,
    pub approaches_analytic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatingComparison {
    pub coordinated: SimulationResult,
    pub uncoordinated: SimulationResult,
    /// `max_{t, i} |x_i(t)|`.
    pub worst_coordinated: f64,
    pub worst_uncoordinated: f64,
    /// Zero-based building index attaining the worst deviation.
    pub worst_agent_coordinated: usize,
    pub worst_agent_uncoordinated: usize,
    pub plateau: PlateauCheck,
}

/// Tolerance for "the coordinated deviations sit on the analytic value".
pub const PLATEAU_TOL: f64 = 0.05;

fn worst_deviation(result: &SimulationResult) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for s in &result.trajectory {
        for (i, x) in s.x.iter().enumerate() {
            if x.abs() > worst.0 {
                worst = (x.abs(), i);
            }
        }
    }
    worst
}

/// Run both loop variants from rest on the same outdoor profile.
pub fn run_heating_comparison(
    scenario: &HeatingScenario,
    config: &SimulationConfig,
) -> Result<HeatingComparison, ExperimentError> {
    scenario.validate()?;
    if !config.record_trajectory {
        return Err(ExperimentError::InvalidConfig(
            "heating comparison needs recorded trajectories".into(),
        ));
    }
    let schedule = scenario.schedule()?;
    let n = scenario.n();
    let run = |variant| {
        integrate(
            variant,
            &ClosedLoopState::zeros(n),
            &schedule,
            &scenario.coupling,
            &scenario.gains,
            config,
            None,
        )
    };
    let coordinated = run(LoopVariant::Coordinated)?;
    let uncoordinated = run(LoopVariant::Uncoordinated)?;
    let (worst_coordinated, worst_agent_coordinated) = worst_deviation(&coordinated);
    let (worst_uncoordinated, worst_agent_uncoordinated) = worst_deviation(&uncoordinated);

    let (_, plateau_end, coldest) = scenario.cold_plateau();
    let w = Disturbance::new(scenario.disturbance_at(coldest))?;
    let tol = EquilibriumTolerances::default();
    let analytic = if existence_condition(&scenario.coupling, &w, tol.strict_tol)?.is_strict() {
        let k = maximizing_set(&scenario.coupling, &w, tol.tie_tol)?.indices[0];
        Some(candidate_equilibrium(&scenario.coupling, &w, &scenario.gains, k)?.x0[0])
    } else {
        None
    };
    let at = coordinated
        .trajectory
        .iter()
        .rev()
        .find(|s| s.t <= plateau_end)
        .unwrap_or(&coordinated.trajectory[0]);
    let hi = at.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = at.x.iter().copied().fold(f64::INFINITY, f64::min);
    let distance_to_analytic =
        analytic.map(|a| at.x.iter().map(|x| (x - a).abs()).fold(0.0, f64::max));
    let plateau = PlateauCheck {
        t: at.t,
        temperature: coldest,
        x: at.x.clone(),
        analytic,
        spread: hi - lo,
        distance_to_analytic,
        approaches_analytic: distance_to_analytic.is_some_and(|d| d <= PLATEAU_TOL),
    };

    Ok(HeatingComparison {
        coordinated,
        uncoordinated,
        worst_coordinated,
        worst_uncoordinated,
        worst_agent_coordinated,
        worst_agent_uncoordinated,
        plateau,
    })
}
