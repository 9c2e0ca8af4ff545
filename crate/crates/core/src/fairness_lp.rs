//! Optimality oracle for the fair allocation problem
//!
//! ```text
//! minimize ||x||_inf  subject to  x = B u + w,  -1 <= u <= 1
//! ```
//!
//! solved by bisection on the level `gamma` with an exact LP feasibility test
//! at each step. Nothing here uses the closed-form equilibrium; the closed
//! form only enters the certificate afterwards, for comparison.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::equilibrium::{existence_condition, maximizing_set, Satisfaction};
use crate::model::{CouplingMatrix, Disturbance, ModelError};
use crate::simplex::{phase_one, PhaseOne, MAX_PIVOTS};

pub const DEFAULT_BISECTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("LP numerical failure: no termination within {pivots} simplex pivots")]
    NumericalFailure { pivots: usize },
    #[error("gamma must be finite and non-negative, got {0}")]
    InvalidGamma(f64),
    #[error("bisection tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of one feasibility query; `witness` is set iff `feasible`.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    pub witness: Option<DVector<f64>>,
}

/// Is there `u` in `[-1, 1]^n` with `||B u + w||_inf <= gamma`?
pub fn lp_feasible(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    gamma: f64,
) -> Result<Feasibility, LpError> {
    let n = coupling.n();
    w.check_dim(n)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(LpError::InvalidGamma(gamma));
    }
    let wv = w.as_vector();
    if wv.amax() <= gamma {
        return Ok(Feasibility {
            feasible: true,
            witness: Some(DVector::zeros(n)),
        });
    }

    // Shift to v = u + 1 >= 0:
    //   v_j <= 2
    //   B_i v <= gamma - w_i + (B 1)_i
    //  -B_i v <= gamma + w_i - (B 1)_i
    let b = coupling.b();
    let rows = 3 * n;
    let mut a = vec![0.0; rows * n];
    let mut rhs = vec![0.0; rows];
    for i in 0..n {
        a[i * n + i] = 1.0;
        rhs[i] = 2.0;
        let row_sum: f64 = b.row(i).sum();
        for j in 0..n {
            a[(n + i) * n + j] = b[(i, j)];
            a[(2 * n + i) * n + j] = -b[(i, j)];
        }
        rhs[n + i] = gamma - wv[i] + row_sum;
        rhs[2 * n + i] = gamma + wv[i] - row_sum;
    }
    let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let feas_tol = 1e-12 * scale;

    match phase_one(&a, &rhs, n, feas_tol, MAX_PIVOTS) {
        Ok(PhaseOne::Feasible(v)) => {
            let u = DVector::from_iterator(n, v.into_iter().map(|v| (v - 1.0).clamp(-1.0, 1.0)));
            Ok(Feasibility {
                feasible: true,
                witness: Some(u),
            })
        }
        Ok(PhaseOne::Infeasible { .. }) => Ok(Feasibility {
            feasible: false,
            witness: None,
        }),
        Err(e) => Err(LpError::NumericalFailure { pivots: e.pivots }),
    }
}

/// LP optimum compared against the closed-form fair cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessCertificate {
    pub gamma_star: f64,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    /// `||x0||_inf` of the closed-form equilibrium; absent when no
    /// equilibrium exists.
    pub closed_form_value: Option<f64>,
    pub agreement: bool,
}

/// Relative agreement test between the LP optimum and the closed form.
pub fn values_agree(gamma_star: f64, closed_form: f64) -> bool {
    (gamma_star - closed_form).abs() <= 1e-7 * closed_form.abs().max(1.0)
}

/// Bisection on `gamma` over `[0, ||w||_inf]` until the bracket is at most `tol` wide.
pub fn min_infnorm(
    coupling: &CouplingMatrix,
    w: &Disturbance,
    tol: f64,
) -> Result<FairnessCertificate, LpError> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(LpError::InvalidTolerance(tol));
    }
    let n = coupling.n();
    w.check_dim(n)?;
    let b = coupling.b();
    let wv = w.as_vector();

    let mut lo = 0.0;
    let mut hi = wv.amax();
    let mut u_best = DVector::zeros(n);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let f = lp_feasible(coupling, w, mid)?;
        match f.witness {
            Some(u) => {
                let reached = (b * &u + wv).amax();
                hi = mid.min(reached).max(lo);
                u_best = u;
            }
            None => lo = mid,
        }
    }
    let x_star = b * &u_best + wv;

    let closed_form_value = match existence_condition(coupling, w, 1e-9)?.status {
        Satisfaction::Violated => None,
        _ => Some(maximizing_set(coupling, w, 1e-9)?.value),
    };
    let agreement = closed_form_value.is_some_and(|v| values_agree(hi, v));
    Ok(FairnessCertificate {
        gamma_star: hi,
        x_star: x_star.iter().copied().collect(),
        u_star: u_best.iter().copied().collect(),
        closed_form_value,
        agreement,
    })
}
