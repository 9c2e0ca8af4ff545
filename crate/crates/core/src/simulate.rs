//! Time integration of the closed loop.
//!
//! Two loop variants share the plant and PI law and differ only in the
//! anti-windup term fed to the integrators:
//!
//! * coordinated: `z' = x + beta * sum_j dz(u_j)` for every agent,
//! * uncoordinated: `z'_i = x_i + beta * dz(u_i)`.
//!
//! Integration uses the Dormand–Prince 5(4) pair with FSAL and a PI step-size
//! controller. The kinks of `sat` at `|u_i| = 1` are left to the error
//! controller; the right-hand side is globally Lipschitz.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::model::{dz, sat, ClosedLoopState, ControllerGains, CouplingMatrix, ModelError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("step size {step:e} fell below the minimum {min_step:e} at t = {t}")]
    StepUnderflow { t: f64, step: f64, min_step: f64 },
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid disturbance schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopVariant {
    /// Rank-one broadcast of the summed dead-zones.
    #[default]
    Coordinated,
    /// Each integrator only sees its own dead-zone.
    Uncoordinated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepControl {
    pub initial_step: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            initial_step: 1e-3,
            min_step: 1e-12,
            max_step: 10.0,
            rtol: 1e-8,
            atol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationConfig {
    pub horizon: f64,
    pub step: StepControl,
    /// Bound on `|x'_i|` and `|z'_i|` for the stopping rule.
    pub stop_abs: f64,
    /// Bound on `|x'_i / x_i|` and `|z'_i / z_i|`.
    pub stop_rel: f64,
    /// States smaller than this in magnitude pass the relative test.
    pub rel_floor: f64,
    /// Stopping checks and trajectory samples happen every `sample_stride`
    /// accepted steps.
    pub sample_stride: usize,
    pub record_trajectory: bool,
    /// When false the run always lasts until `horizon`.
    pub stop_on_equilibrium: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            horizon: 1e6,
            step: StepControl::default(),
            stop_abs: 1e-8,
            stop_rel: 1e-6,
            rel_floor: 1e-12,
            sample_stride: 1,
            record_trajectory: true,
            stop_on_equilibrium: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), SimulationError> {
        let s = &self.step;
        let checks = [
            ("horizon", self.horizon),
            ("initial_step", s.initial_step),
            ("min_step", s.min_step),
            ("max_step", s.max_step),
            ("rtol", s.rtol),
            ("atol", s.atol),
            ("stop_abs", self.stop_abs),
            ("stop_rel", self.stop_rel),
            ("rel_floor", self.rel_floor),
        ];
        for (name, v) in checks {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimulationError::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if s.min_step > s.max_step {
            return Err(SimulationError::InvalidConfig(
                "min_step exceeds max_step".into(),
            ));
        }
        if self.sample_stride == 0 {
            return Err(SimulationError::InvalidConfig(
                "sample_stride must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Constant or piecewise-linear disturbance `w(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceSchedule {
    Constant(DVector<f64>),
    /// Breakpoints `(t, w)` with strictly increasing times; held constant
    /// outside the covered range.
    PiecewiseLinear(Vec<(f64, DVector<f64>)>),
}

impl DisturbanceSchedule {
    pub fn piecewise_linear(
        breakpoints: Vec<(f64, DVector<f64>)>,
    ) -> Result<Self, SimulationError> {
        let s = Self::PiecewiseLinear(breakpoints);
        s.validate()?;
        Ok(s)
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Constant(w) => w.len(),
            Self::PiecewiseLinear(bp) => bp.first().map_or(0, |(_, w)| w.len()),
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |m: &str| Err(SimulationError::InvalidSchedule(m.into()));
        match self {
            Self::Constant(w) => {
                if w.iter().any(|v| !v.is_finite()) {
                    return bad("non-finite disturbance");
                }
            }
            Self::PiecewiseLinear(bp) => {
                if bp.is_empty() {
                    return bad("no breakpoints");
                }
                let n = bp[0].1.len();
                for (t, w) in bp {
                    if !t.is_finite() || w.iter().any(|v| !v.is_finite()) {
                        return bad("non-finite breakpoint");
                    }
                    if w.len() != n {
                        return bad("breakpoints have different dimensions");
                    }
                }
                if bp.windows(2).any(|p| p[1].0 <= p[0].0) {
                    return bad("breakpoint times must be strictly increasing");
                }
            }
        }
        Ok(())
    }

    /// Time after which `w` no longer changes.
    pub fn settles_at(&self) -> f64 {
        match self {
            Self::Constant(_) => f64::NEG_INFINITY,
            Self::PiecewiseLinear(bp) => bp.last().map_or(f64::NEG_INFINITY, |(t, _)| *t),
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        self.eval_into(t, out.as_mut_slice());
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match self {
            Self::Constant(w) => out.copy_from_slice(w.as_slice()),
            Self::PiecewiseLinear(bp) => {
                let idx = bp.partition_point(|(tb, _)| *tb <= t);
                if idx == 0 {
                    out.copy_from_slice(bp[0].1.as_slice());
                } else if idx == bp.len() || bp[idx - 1].0 == t {
                    out.copy_from_slice(bp[idx - 1].1.as_slice());
                } else {
                    let (t0, w0) = &bp[idx - 1];
                    let (t1, w1) = &bp[idx];
                    let f = (t - t0) / (t1 - t0);
                    for ((o, a), b) in out.iter_mut().zip(w0.iter()).zip(w1.iter()) {
                        *o = a + f * (b - a);
                    }
                }
            }
        }
    }
}

/// One decimated point of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub sat_u: Vec<f64>,
    pub sum_dz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub variant: LoopVariant,
    pub converged: bool,
    pub t_final: f64,
    pub final_state: ClosedLoopState,
    pub trajectory: Vec<TrajectorySample>,
    /// `||x_final - x0||_inf` when a reference equilibrium was supplied.
    pub distance_to_equilibrium: Option<f64>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl SimulationResult {
    pub fn n(&self) -> usize {
        self.final_state.n()
    }
}

/// Closed-loop right-hand side on flat buffers `y = [x; z]`.
struct LoopRhs<'a> {
    n: usize,
    /// Column-major `B`.
    b: &'a [f64],
    p: &'a [f64],
    r: &'a [f64],
    beta: f64,
    variant: LoopVariant,
    sat_u: Vec<f64>,
    dz_u: Vec<f64>,
}

impl<'a> LoopRhs<'a> {
    fn new(coupling: &'a CouplingMatrix, gains: &'a ControllerGains, variant: LoopVariant) -> Self {
        let n = coupling.n();
        Self {
            n,
            b: coupling.b().as_slice(),
            p: gains.p().as_slice(),
            r: gains.r().as_slice(),
            beta: gains.beta(),
            variant,
            sat_u: vec![0.0; n],
            dz_u: vec![0.0; n],
        }
    }

    fn eval(&mut self, y: &[f64], w: &[f64], dy: &mut [f64]) {
        let n = self.n;
        let (x, z) = y.split_at(n);
        let (dx, dzv) = dy.split_at_mut(n);
        for i in 0..n {
            let u = -self.p[i] * x[i] - self.r[i] * z[i];
            self.sat_u[i] = sat(u);
            self.dz_u[i] = u - self.sat_u[i];
            dx[i] = w[i] - x[i];
        }
        for (col, s) in self.b.chunks_exact(n).zip(self.sat_u.iter()) {
            if *s != 0.0 {
                for (d, bij) in dx.iter_mut().zip(col) {
                    *d += bij * s;
                }
            }
        }
        match self.variant {
            LoopVariant::Coordinated => {
                let broadcast = self.beta * self.dz_u.iter().sum::<f64>();
                for i in 0..n {
                    dzv[i] = x[i] + broadcast;
                }
            }
            LoopVariant::Uncoordinated => {
                for i in 0..n {
                    dzv[i] = x[i] + self.beta * self.dz_u[i];
                }
            }
        }
    }
}

fn rhs(
    variant: LoopVariant,
    state: &ClosedLoopState,
    coupling: &CouplingMatrix,
    w: &DVector<f64>,
    gains: &ControllerGains,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    let n = coupling.n();
    gains.check_dim(n)?;
    for (what, len) in [("state", state.n()), ("disturbance", w.len())] {
        if len != n {
            return Err(ModelError::DimensionMismatch {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let mut y = Vec::with_capacity(2 * n);
    y.extend_from_slice(state.x.as_slice());
    y.extend_from_slice(state.z.as_slice());
    let mut dy = vec![0.0; 2 * n];
    LoopRhs::new(coupling, gains, variant).eval(&y, w.as_slice(), &mut dy);
    Ok((
        DVector::from_column_slice(&dy[..n]),
        DVector::from_column_slice(&dy[n..]),
    ))
}

/// `(x', z')` of the coordinated loop.
pub fn rhs_coordinated(
    state: &ClosedLoopState,
    coupling: &CouplingMatrix,
    w: &DVector<f64>,
    gains: &ControllerGains,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    rhs(LoopVariant::Coordinated, state, coupling, w, gains)
}

/// `(x', z')` with local anti-windup only.
pub fn rhs_uncoordinated(
    state: &ClosedLoopState,
    coupling: &CouplingMatrix,
    w: &DVector<f64>,
    gains: &ControllerGains,
) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
    rhs(LoopVariant::Uncoordinated, state, coupling, w, gains)
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI step-size controller constants.
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;
/// Upper bound on `h * rho` near rest, well inside the real stability interval
/// (about 3.3). Without it the controller parks the step on the stability
/// boundary and the stiff mode never decays below the tolerance level.
const STABILITY_CAP: f64 = 2.0;

struct Stages {
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    ynew: Vec<f64>,
    w: Vec<f64>,
}

fn sample(t: f64, y: &[f64], gains: &ControllerGains) -> TrajectorySample {
    let n = y.len() / 2;
    let (x, z) = y.split_at(n);
    let u: Vec<f64> = (0..n)
        .map(|i| -gains.p()[i] * x[i] - gains.r()[i] * z[i])
        .collect();
    let sat_u: Vec<f64> = u.iter().map(|v| sat(*v)).collect();
    let sum_dz = u.iter().map(|v| dz(*v)).sum();
    TrajectorySample {
        t,
        x: x.to_vec(),
        z: z.to_vec(),
        u,
        sat_u,
        sum_dz,
    }
}

/// `|f_i| < abs` and (`|y_i| < floor` or `|f_i / y_i| < rel`) for every component.
fn at_rest(y: &[f64], f: &[f64], cfg: &SimulationConfig) -> bool {
    y.iter().zip(f).all(|(y, f)| {
        f.abs() < cfg.stop_abs && (y.abs() < cfg.rel_floor || (f / y).abs() < cfg.stop_rel)
    })
}

/// Integrate the loop from `initial` until the stopping rule holds or the
/// horizon is reached.
///
/// The stopping rule is only armed once the schedule has settled, so a
/// time-varying disturbance always plays out in full.
pub fn integrate(
    variant: LoopVariant,
    initial: &ClosedLoopState,
    schedule: &DisturbanceSchedule,
    coupling: &CouplingMatrix,
    gains: &ControllerGains,
    config: &SimulationConfig,
    reference_x0: Option<&DVector<f64>>,
) -> Result<SimulationResult, SimulationError> {
    config.validate()?;
    schedule.validate()?;
    let n = coupling.n();
    gains.check_dim(n)?;
    let initial = ClosedLoopState::new(initial.x.clone(), initial.z.clone())?;
    for (what, len) in [
        ("initial state", initial.n()),
        ("disturbance schedule", schedule.n()),
        ("reference equilibrium", reference_x0.map_or(n, |r| r.len())),
    ] {
        if len != n {
            return Err(ModelError::DimensionMismatch {
                what,
                expected: n,
                got: len,
            }
            .into());
        }
    }

    let dim = 2 * n;
    let sc = &config.step;
    let mut f = LoopRhs::new(coupling, gains, variant);
    let mut st = Stages {
        k: std::array::from_fn(|_| vec![0.0; dim]),
        tmp: vec![0.0; dim],
        ynew: vec![0.0; dim],
        w: vec![0.0; n],
    };
    let mut y: Vec<f64> = initial.x.iter().chain(initial.z.iter()).copied().collect();
    let mut t = 0.0;
    let settle = schedule.settles_at();

    schedule.eval_into(t, &mut st.w);
    f.eval(&y, &st.w, &mut st.k[0]);

    let mut trajectory = Vec::new();
    if config.record_trajectory {
        trajectory.push(sample(t, &y, gains));
    }

    let mut h = sc.initial_step.min(sc.max_step);
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut converged = false;

    while t < config.horizon {
        let mut clipped = false;
        if t + h >= config.horizon {
            h = config.horizon - t;
            clipped = true;
        }
        if (h < sc.min_step && !clipped) || t + h == t {
            return Err(SimulationError::StepUnderflow {
                t,
                step: h,
                min_step: sc.min_step,
            });
        }

        dopri_step(&mut f, schedule, t, h, &y, &mut st);

        let err = error_norm(&y, &st, h, sc);
        if !err.is_finite() {
            if h <= sc.min_step {
                return Err(SimulationError::NonFiniteState { t });
            }
            h *= FAC_MIN;
            rejected += 1;
            last_rejected = true;
            continue;
        }

        if err <= 1.0 {
            let rho = stiffness_estimate(&st);
            t += h;
            std::mem::swap(&mut y, &mut st.ynew);
            st.k.swap(0, 6);
            accepted += 1;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(SimulationError::NonFiniteState { t });
            }
            let check = accepted.is_multiple_of(config.sample_stride);
            if check && config.record_trajectory {
                trajectory.push(sample(t, &y, gains));
            }
            if check && config.stop_on_equilibrium && t >= settle && at_rest(&y, &st.k[0], config) {
                converged = true;
                break;
            }
            let fac11 = err.powf(0.2 - PI_BETA * 0.75);
            let fac = (fac11 / err_old.powf(PI_BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            err_old = err.max(1e-4);
            last_rejected = false;
            if let Some(rho) = rho {
                h_new = h_new.min(STABILITY_CAP / rho);
            }
            h = h_new.min(sc.max_step);
        } else {
            let fac11 = err.powf(0.2 - PI_BETA * 0.75);
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            rejected += 1;
            last_rejected = true;
        }
    }

    if config.record_trajectory && trajectory.last().is_none_or(|s| s.t < t) {
        trajectory.push(sample(t, &y, gains));
    }
    let final_state = ClosedLoopState {
        x: DVector::from_column_slice(&y[..n]),
        z: DVector::from_column_slice(&y[n..]),
    };
    let distance_to_equilibrium = reference_x0.map(|x0| (&final_state.x - x0).amax());
    Ok(SimulationResult {
        variant,
        converged,
        t_final: t,
        final_state,
        trajectory,
        distance_to_equilibrium,
        accepted_steps: accepted,
        rejected_steps: rejected,
    })
}

fn dopri_step(
    f: &mut LoopRhs<'_>,
    schedule: &DisturbanceSchedule,
    t: f64,
    h: f64,
    y: &[f64],
    st: &mut Stages,
) {
    let dim = y.len();
    let Stages { k, tmp, ynew, w } = st;
    let [k1, k2, k3, k4, k5, k6, k7] = k;

    for i in 0..dim {
        tmp[i] = y[i] + h * A21 * k1[i];
    }
    schedule.eval_into(t + C2 * h, w);
    f.eval(tmp, w, k2);

    for i in 0..dim {
        tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
    }
    schedule.eval_into(t + C3 * h, w);
    f.eval(tmp, w, k3);

    for i in 0..dim {
        tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
    }
    schedule.eval_into(t + C4 * h, w);
    f.eval(tmp, w, k4);

    for i in 0..dim {
        tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
    }
    schedule.eval_into(t + C5 * h, w);
    f.eval(tmp, w, k5);

    for i in 0..dim {
        tmp[i] = y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
    }
    schedule.eval_into(t + h, w);
    f.eval(tmp, w, k6);

    for i in 0..dim {
        ynew[i] = y[i] + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
    }
    f.eval(ynew, w, k7);
}

/// Dominant-eigenvalue magnitude from the last two stages,
/// `|f(y1) - f(y6)| / |y1 - y6|`; `None` when the difference is at round-off level.
fn stiffness_estimate(st: &Stages) -> Option<f64> {
    let (mut num, mut den, mut mag) = (0.0, 0.0, 0.0);
    for i in 0..st.ynew.len() {
        num += (st.k[6][i] - st.k[5][i]).powi(2);
        den += (st.ynew[i] - st.tmp[i]).powi(2);
        mag += st.ynew[i].powi(2);
    }
    let den = den.sqrt();
    (den > 1e-13 * (1.0 + mag.sqrt())).then(|| num.sqrt() / den)
}

fn error_norm(y: &[f64], st: &Stages, h: f64, sc: &StepControl) -> f64 {
    let [k1, _, k3, k4, k5, k6, k7] = &st.k;
    let mut acc = 0.0;
    for i in 0..y.len() {
        let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        let scale = sc.atol + sc.rtol * y[i].abs().max(st.ynew[i].abs());
        acc += (e / scale).powi(2);
    }
    (acc / y.len() as f64).sqrt()
}
