//! Existence and uniqueness checks on the disturbance, and the closed-form
//! fair equilibrium of the coordinated loop.
//!
//! With `M = B^-1` and `m_i = M_i 1`, the loop admits an equilibrium iff
//! `max_i (M_i w - 1) / m_i <= min_j (M_j w + 1) / m_j`. The equilibrium picks an
//! agent `k` maximizing `|dz(M_i w)| / m_i`, equalizes every state at
//! `dz(M_k w) / m_k`, and lets agent `k` alone absorb the dead-zone.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::io::ser_dvector;
use crate::model::{dz, sat, ControllerGains, CouplingMatrix, Disturbance, ModelError};

/// Absolute bound on both equilibrium residuals.
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error("existence condition violated (gap {gap:e})")]
    ConditionViolated { gap: f64 },
    #[error("agent {k} does not maximize |dz(M_i w)| / M_i 1")]
    IndexNotMaximizing { k: usize },
    #[error(
        "candidate equilibrium residuals too large (plant {plant:e}, integrator {integrator:e})"
    )]
    ResidualTooLarge { plant: f64, integrator: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquilibriumTolerances {
    /// Absolute margin on the existence gap for strict satisfaction.
    pub strict_tol: f64,
    /// Relative tolerance for ties in the maximizing index.
    pub tie_tol: f64,
}

impl Default for EquilibriumTolerances {
    fn default() -> Self {
        Self {
            strict_tol: 1e-9,
            tie_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Satisfaction {
    StrictlySatisfied,
    WeaklySatisfied,
    Violated,
}

/// Both sides of the existence condition and their classification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExistenceStatus {
    pub status: Satisfaction,
    /// `max_i (M_i w - 1) / M_i 1`
    pub lhs: f64,
    /// `min_j (M_j w + 1) / M_j 1`
    pub rhs: f64,
    pub gap: f64,
}

impl ExistenceStatus {
    pub fn is_strict(&self) -> bool {
        self.status == Satisfaction::StrictlySatisfied
    }
}

/// The agents most affected by the disturbance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximizerSet {
    /// Zero-based agent indices, ascending.
    pub indices: Vec<usize>,
    pub value: f64,
    pub unique: bool,
}

impl MaximizerSet {
    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumPoint {
    #[serde(serialize_with = "ser_dvector")]
    pub x0: DVector<f64>,
    /// Unsaturated controller outputs.
    #[serde(serialize_with = "ser_dvector")]
    pub u0: DVector<f64>,
    #[serde(serialize_with = "ser_dvector")]
    pub z0: DVector<f64>,
    pub k: usize,
    /// `||-x0 + B sat(u0) + w||_inf`
    pub residual_plant: f64,
    /// `||x0 + beta 1 1^T dz(u0)||_inf`
    pub residual_integrator: f64,
}

impl EquilibriumPoint {
    /// `||x0||_inf`, the fair cost.
    pub fn cost(&self) -> f64 {
        self.x0.amax()
    }
}

fn mw(coupling: &CouplingMatrix, w: &Disturbance) -> Result<DVector<f64>, ModelError> {
    w.check_dim(coupling.n())?;
    Ok(coupling.m() * w.as_vector())
}

fn ratios(coupling: &CouplingMatrix, mw: &DVector<f64>) -> DVector<f64> {
    mw.zip_map(coupling.row_sums(), |v, s| dz(v).abs() / s)
}

/// Every agent attaining `max_i |dz(M_i w)| / M_i 1` within `tie_tol` (relative).
///
/// When the maximum is zero no agent is saturated at `u = -M w`; all agents are
/// returned and the set counts as unique.
pub fn maximizing_set(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    tie_tol: f64,
) -> Result<MaximizerSet, ModelError> {
    let mw = mw(coupling, w)?;
    let r = ratios(coupling, &mw);
    let value = r.max();
    if value == 0.0 {
        return Ok(MaximizerSet {
            indices: (0..coupling.n()).collect(),
            value,
            unique: true,
        });
    }
    let threshold = value - tie_tol * value;
    let indices: Vec<usize> = (0..r.len()).filter(|&i| r[i] >= threshold).collect();
    let unique = indices.len() == 1;
    Ok(MaximizerSet {
        indices,
        value,
        unique,
    })
}

pub fn existence_condition(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    strict_tol: f64,
) -> Result<ExistenceStatus, ModelError> {
    let mw = mw(coupling, w)?;
    let s = coupling.row_sums();
    let lhs = (0..mw.len())
        .map(|i| (mw[i] - 1.0) / s[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let rhs = (0..mw.len())
        .map(|j| (mw[j] + 1.0) / s[j])
        .fold(f64::INFINITY, f64::min);
    let gap = rhs - lhs;
    let status = if gap > strict_tol {
        Satisfaction::StrictlySatisfied
    } else if gap < -strict_tol {
        Satisfaction::Violated
    } else {
        Satisfaction::WeaklySatisfied
    };
    Ok(ExistenceStatus {
        status,
        lhs,
        rhs,
        gap,
    })
}

/// Closed-form equilibrium for maximizing agent `k`.
///
/// Fails with [`EquilibriumError::ConditionViolated`] when no equilibrium
/// exists. A weakly satisfied condition still yields a point, but uniqueness is
/// not guaranteed for it.
pub fn candidate_equilibrium(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    gains: &ControllerGains,
    k: usize,
) -> Result<EquilibriumPoint, EquilibriumError> {
    let n = coupling.n();
    gains.check_dim(n)?;
    let defaults = EquilibriumTolerances::default();
    let existence = existence_condition(coupling, w, defaults.strict_tol)?;
    if existence.status == Satisfaction::Violated {
        return Err(EquilibriumError::ConditionViolated { gap: existence.gap });
    }
    let maximizers = maximizing_set(coupling, w, defaults.tie_tol)?;
    if k >= n || !maximizers.contains(k) {
        return Err(EquilibriumError::IndexNotMaximizing { k });
    }

    let mw = coupling.m() * w.as_vector();
    let s = coupling.row_sums();
    let beta = gains.beta();
    let dz_k = dz(mw[k]);
    let level = dz_k / s[k];

    let x0 = DVector::from_element(n, level);
    let u0 = DVector::from_iterator(
        n,
        (0..n).map(|i| {
            if i == k {
                -sat(mw[k]) - dz_k / (beta * s[k])
            } else {
                -mw[i] + s[i] / s[k] * dz_k
            }
        }),
    );
    let z0 = DVector::from_iterator(
        n,
        (0..n).map(|i| -(u0[i] + gains.p()[i] * x0[i]) / gains.r()[i]),
    );

    let (residual_plant, residual_integrator) = residuals(coupling, w, beta, &x0, &u0);
    if !(residual_plant <= RESIDUAL_TOL && residual_integrator <= RESIDUAL_TOL) {
        return Err(EquilibriumError::ResidualTooLarge {
            plant: residual_plant,
            integrator: residual_integrator,
        });
    }
    Ok(EquilibriumPoint {
        x0,
        u0,
        z0,
        k,
        residual_plant,
        residual_integrator,
    })
}

/// Infinity norms of the plant and integrator equilibrium equations at `(x0, u0)`.
pub fn residuals(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    beta: f64,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
) -> (f64, f64) {
    let sat_u = u0.map(sat);
    let plant = (-x0 + coupling.b() * sat_u + w.as_vector()).amax();
    let broadcast = beta * u0.iter().map(|u| dz(*u)).sum::<f64>();
    let integrator = x0.map(|x| x + broadcast).amax();
    (plant, integrator)
}

/// Everything known about the equilibrium for one `(B, w, gains)` triple.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumReport {
    pub existence: ExistenceStatus,
    pub maximizers: MaximizerSet,
    /// Present iff the existence condition holds strictly.
    pub point: Option<EquilibriumPoint>,
    pub a1_strict: bool,
    pub a2_unique: bool,
    pub warnings: Vec<String>,
}

pub fn equilibrium_report(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    gains: &ControllerGains,
    tolerances: EquilibriumTolerances,
) -> Result<EquilibriumReport, EquilibriumError> {
    gains.check_dim(coupling.n())?;
    let existence = existence_condition(coupling, w, tolerances.strict_tol)?;
    let maximizers = maximizing_set(coupling, w, tolerances.tie_tol)?;
    let a1_strict = existence.is_strict();
    let a2_unique = maximizers.unique;
    let mut warnings = Vec::new();
    match existence.status {
        Satisfaction::StrictlySatisfied => {}
        Satisfaction::WeaklySatisfied => warnings.push(format!(
            "existence condition holds only with equality (gap {:e}); an equilibrium exists but may not be unique",
            existence.gap
        )),
        Satisfaction::Violated => warnings.push(format!(
            "existence condition violated (gap {:e}); the closed loop has no equilibrium",
            existence.gap
        )),
    }
    if !a2_unique {
        warnings.push(format!(
            "maximizing agent is not unique ({:?}); uniqueness of the equilibrium is not guaranteed",
            maximizers.indices
        ));
    }
    let point = if a1_strict {
        Some(candidate_equilibrium(
            coupling,
            w,
            gains,
            maximizers.indices[0],
        )?)
    } else {
        None
    };
    Ok(EquilibriumReport {
        existence,
        maximizers,
        point,
        a1_strict,
        a2_unique,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_coupling;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn two_by_two() -> CouplingMatrix {
        validate_coupling(&dmatrix![2.0, -1.0; -0.5, 2.0]).unwrap()
    }

    fn scalar() -> CouplingMatrix {
        validate_coupling(&dmatrix![2.0]).unwrap()
    }

    fn w(v: DVector<f64>) -> Disturbance {
        Disturbance::new(v).unwrap()
    }

    #[test]
    fn maximizing_set_examples() {
        let c = two_by_two();
        let zero = maximizing_set(&c, &Disturbance::zeros(2), 1e-9).unwrap();
        assert_eq!(zero.indices, vec![0, 1]);
        assert_eq!(zero.value, 0.0);
        assert!(zero.unique);

        let set = maximizing_set(&c, &w(dvector![3.0, 3.0]), 1e-9).unwrap();
        assert_eq!(set.indices, vec![0]);
        assert_abs_diff_eq!(set.value, 11.0 / 6.0, epsilon = 1e-14);
        assert!(set.unique);

        let set = maximizing_set(&scalar(), &w(dvector![3.0]), 1e-9).unwrap();
        assert_eq!(set.indices, vec![0]);
        assert_abs_diff_eq!(set.value, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn ties_are_reported() {
        let c = validate_coupling(&dmatrix![2.0, -1.0; -1.0, 2.0]).unwrap();
        let set = maximizing_set(&c, &w(dvector![5.0, 5.0]), 1e-9).unwrap();
        assert_eq!(set.indices, vec![0, 1]);
        assert!(!set.unique);
        let report = equilibrium_report(
            &c,
            &w(dvector![5.0, 5.0]),
            &ControllerGains::uniform(2, 1.0, 1.0, 1.0).unwrap(),
            EquilibriumTolerances::default(),
        )
        .unwrap();
        assert!(!report.a2_unique);
        assert!(report.warnings.iter().any(|m| m.contains("not unique")));
        // A caller-chosen tied index still gives a valid point.
        let g = ControllerGains::uniform(2, 1.0, 1.0, 1.0).unwrap();
        assert!(candidate_equilibrium(&c, &w(dvector![5.0, 5.0]), &g, 1).is_ok());
    }

    #[test]
    fn existence_examples() {
        let c = two_by_two();
        for s in [-50.0, -3.0, 0.0, 0.7, 12.0] {
            let st = existence_condition(&c, &w(dvector![s, s]), 1e-9).unwrap();
            assert_eq!(st.status, Satisfaction::StrictlySatisfied, "s = {s}");
        }
        let st = existence_condition(&c, &w(dvector![3.0, 3.0]), 1e-9).unwrap();
        assert_abs_diff_eq!(st.lhs, 11.0 / 6.0, epsilon = 1e-14);
        assert_abs_diff_eq!(st.rhs, 25.0 / 6.0, epsilon = 1e-14);
        assert_eq!(st.status, Satisfaction::StrictlySatisfied);
    }

    #[test]
    fn existence_flips_to_violated() {
        let c = two_by_two();
        let m = c.m().clone();
        let s = c.row_sums().clone();
        let mut t = 0.0;
        let status = loop {
            let st = existence_condition(&c, &w(dvector![t, 0.0]), 1e-9).unwrap();
            if st.status == Satisfaction::Violated {
                break st;
            }
            t += 0.25;
            assert!(t < 100.0);
        };
        // Direct evaluation: some pair (i, j) breaks the inequality.
        let wv = dvector![t, 0.0];
        let mw = &m * &wv;
        let broken = (0..2).any(|i| (0..2).any(|j| (mw[i] - 1.0) / s[i] > (mw[j] + 1.0) / s[j]));
        assert!(broken);
        assert!(status.gap < 0.0);
        assert!(matches!(
            candidate_equilibrium(
                &c,
                &w(wv),
                &ControllerGains::uniform(2, 1.0, 1.0, 1.0).unwrap(),
                0
            ),
            Err(EquilibriumError::ConditionViolated { .. })
        ));
    }

    #[test]
    fn scalar_candidate() {
        let g = ControllerGains::uniform(1, 1.0, 0.5, 1.0).unwrap();
        let p = candidate_equilibrium(&scalar(), &w(dvector![3.0]), &g, 0).unwrap();
        assert_abs_diff_eq!(p.x0[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.u0[0], -2.0, epsilon = 1e-12);
        // u0 = -p x0 - r z0  =>  z0 = (2 - 1) / 0.5
        assert_abs_diff_eq!(p.z0[0], 2.0, epsilon = 1e-12);
        assert!(p.residual_plant <= 1e-12 && p.residual_integrator <= 1e-12);
    }

    #[test]
    fn two_by_two_candidate() {
        let g = ControllerGains::uniform(2, 1.0, 1.5, 1.0).unwrap();
        let p = candidate_equilibrium(&two_by_two(), &w(dvector![3.0, 3.0]), &g, 0).unwrap();
        assert_abs_diff_eq!(p.x0, dvector![11.0 / 6.0, 11.0 / 6.0], epsilon = 1e-12);
        assert_abs_diff_eq!(p.u0, dvector![-17.0 / 6.0, -5.0 / 6.0], epsilon = 1e-12);
        assert!(p.residual_plant <= 1e-12 && p.residual_integrator <= 1e-12);
        assert!(matches!(
            candidate_equilibrium(&two_by_two(), &w(dvector![3.0, 3.0]), &g, 1),
            Err(EquilibriumError::IndexNotMaximizing { k: 1 })
        ));
    }

    #[test]
    fn unsaturated_candidate_is_origin() {
        let c = two_by_two();
        let wv = dvector![0.3, -0.2];
        let g = ControllerGains::new(dvector![1.0, 2.0], dvector![0.5, 4.0], 3.0).unwrap();
        let p = candidate_equilibrium(&c, &w(wv.clone()), &g, 0).unwrap();
        let mw = c.m() * &wv;
        assert_eq!(p.x0, DVector::zeros(2));
        assert_abs_diff_eq!(p.u0, -&mw, epsilon = 1e-15);
        assert_abs_diff_eq!(p.z0, dvector![mw[0] / 0.5, mw[1] / 4.0], epsilon = 1e-15);
    }

    #[test]
    fn report_examples() {
        let c = two_by_two();
        let g = ControllerGains::uniform(2, 1.0, 1.5, 1.0).unwrap();
        let r = equilibrium_report(&c, &Disturbance::zeros(2), &g, Default::default()).unwrap();
        assert!(r.a1_strict && r.a2_unique);
        assert_eq!(r.point.unwrap().x0, DVector::zeros(2));

        let r = equilibrium_report(&c, &w(dvector![3.0, 3.0]), &g, Default::default()).unwrap();
        assert!(r.a1_strict && r.a2_unique);
        assert!(r.warnings.is_empty());

        let b = dmatrix![
            260.0, -30.0, -30.0, -45.0, -50.0;
            -15.0, 250.0, -30.0, -45.0, -50.0;
            -15.0, -20.0, 210.0, -45.0, -50.0;
            -15.0, -20.0, -30.0, 175.0, -50.0;
            -15.0, -20.0, -30.0, -40.0, 110.0
        ];
        let c = validate_coupling(&b).unwrap();
        let g = ControllerGains::uniform(5, 1.0, 1.5, 1.0).unwrap();
        let r = equilibrium_report(
            &c,
            &w(DVector::from_element(5, -10.0)),
            &g,
            Default::default(),
        )
        .unwrap();
        assert!(r.a1_strict);
        assert!(r.point.is_some());
    }

    #[test]
    fn report_without_point_when_violated() {
        let c = two_by_two();
        let g = ControllerGains::uniform(2, 1.0, 1.5, 1.0).unwrap();
        let r = equilibrium_report(&c, &w(dvector![40.0, -40.0]), &g, Default::default()).unwrap();
        assert_eq!(r.existence.status, Satisfaction::Violated);
        assert!(!r.a1_strict);
        assert!(r.point.is_none());
    }

    #[test]
    fn beta_scales_only_the_dead_zone() {
        let c = two_by_two();
        let wv = w(dvector![3.0, 3.0]);
        let g1 = ControllerGains::uniform(2, 1.0, 1.5, 1.0).unwrap();
        let g2 = ControllerGains::uniform(2, 1.0, 1.5, 4.0).unwrap();
        let a = candidate_equilibrium(&c, &wv, &g1, 0).unwrap();
        let b = candidate_equilibrium(&c, &wv, &g2, 0).unwrap();
        assert_eq!(a.x0, b.x0);
        assert_eq!(a.u0.map(sat), b.u0.map(sat));
        assert_abs_diff_eq!(dz(a.u0[0]) / 4.0, dz(b.u0[0]), epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let c = two_by_two();
        assert!(maximizing_set(&c, &Disturbance::zeros(3), 1e-9).is_err());
        let g = ControllerGains::uniform(3, 1.0, 1.0, 1.0).unwrap();
        assert!(equilibrium_report(&c, &Disturbance::zeros(2), &g, Default::default()).is_err());
    }
}
