//! Core domain types, the scalar nonlinearities and M-matrix validation.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Tolerance for `B * M = I` and for the entrywise sign of `M`.
pub const INVERSE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("coupling matrix must be square and non-empty, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("coupling matrix has a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} is not strictly diagonally dominant (diagonal {diagonal}, off-diagonal sum {off_diagonal})")]
    NotRowDominant {
        row: usize,
        diagonal: f64,
        off_diagonal: f64,
    },
    #[error("bad sign pattern at ({row}, {col}): value {value}")]
    BadSignPattern { row: usize, col: usize, value: f64 },
    #[error("inverse is singular or not entrywise non-negative: {reason}")]
    SingularOrNegativeInverse { reason: String },
    #[error("dimension mismatch: expected {expected}, got {got} for {what}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid gains: {0}")]
    InvalidGains(String),
    #[error("non-finite entry in {0}")]
    NonFiniteVector(&'static str),
}

/// Clamp every entry to `[-1, 1]`.
pub fn saturate(v: &DVector<f64>) -> DVector<f64> {
    v.map(sat)
}

/// `v - sat(v)`, entrywise.
pub fn deadzone(v: &DVector<f64>) -> DVector<f64> {
    v.map(dz)
}

#[inline]
pub fn sat(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

#[inline]
pub fn dz(v: f64) -> f64 {
    v - sat(v)
}

/// A validated M-matrix `B` together with `M = B^-1` and the row sums of `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    b: DMatrix<f64>,
    m: DMatrix<f64>,
    row_sums: DVector<f64>,
}

impl CouplingMatrix {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `M = B^-1`.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `M_i 1` for every row `i`.
    pub fn row_sums(&self) -> &DVector<f64> {
        &self.row_sums
    }

    /// Smallest `b_ii - sum_{j != i} |b_ij|` over all rows.
    pub fn dominance_margin(&self) -> f64 {
        (0..self.n())
            .map(|i| row_margin(&self.b, i))
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest entry of `|B M - I|`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.n();
        (&self.b * &self.m - DMatrix::<f64>::identity(n, n)).amax()
    }
}

fn row_margin(b: &DMatrix<f64>, i: usize) -> f64 {
    let off: f64 = (0..b.ncols())
        .filter(|&j| j != i)
        .map(|j| b[(i, j)].abs())
        .sum();
    b[(i, i)] - off
}

/// Validate the sign pattern and strict row dominance of `raw`, then invert it.
///
/// Off-diagonal zeros are accepted.
pub fn validate_coupling(raw: &DMatrix<f64>) -> Result<CouplingMatrix, ModelError> {
    let (rows, cols) = raw.shape();
    if rows != cols || rows == 0 {
        return Err(ModelError::NotSquare { rows, cols });
    }
    let n = rows;
    for i in 0..n {
        for j in 0..n {
            let v = raw[(i, j)];
            if !v.is_finite() {
                return Err(ModelError::NonFinite { row: i, col: j });
            }
            let bad = if i == j { v <= 0.0 } else { v > 0.0 };
            if bad {
                return Err(ModelError::BadSignPattern {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
    }
    for i in 0..n {
        let diagonal = raw[(i, i)];
        let off_diagonal = diagonal - row_margin(raw, i);
        if diagonal <= off_diagonal {
            return Err(ModelError::NotRowDominant {
                row: i,
                diagonal,
                off_diagonal,
            });
        }
    }

    let m =
        raw.clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| ModelError::SingularOrNegativeInverse {
                reason: "LU factorization is singular".into(),
            })?;
    if let Some(v) = m.iter().find(|v| !v.is_finite() || **v < -INVERSE_TOL) {
        return Err(ModelError::SingularOrNegativeInverse {
            reason: format!("inverse has entry {v}"),
        });
    }
    let residual = (raw * &m - DMatrix::<f64>::identity(n, n)).amax();
    if residual > INVERSE_TOL {
        return Err(ModelError::SingularOrNegativeInverse {
            reason: format!("|B M - I| = {residual:e}"),
        });
    }
    let row_sums = DVector::from_iterator(n, m.row_iter().map(|r| r.sum()));
    if let Some(i) = row_sums.iter().position(|s| *s <= 0.0) {
        return Err(ModelError::SingularOrNegativeInverse {
            reason: format!("row sum {i} of the inverse is not positive"),
        });
    }
    Ok(CouplingMatrix {
        b: raw.clone(),
        m,
        row_sums,
    })
}

/// Diagonal PI gains `P`, `R` and the scalar anti-windup gain `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    p: DVector<f64>,
    r: DVector<f64>,
    beta: f64,
}

impl ControllerGains {
    pub fn new(p: DVector<f64>, r: DVector<f64>, beta: f64) -> Result<Self, ModelError> {
        if p.len() != r.len() {
            return Err(ModelError::DimensionMismatch {
                what: "integral gains",
                expected: p.len(),
                got: r.len(),
            });
        }
        if p.is_empty() {
            return Err(ModelError::InvalidGains("no agents".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !p.iter().all(|v| positive(*v)) {
            return Err(ModelError::InvalidGains(
                "proportional gains must be strictly positive".into(),
            ));
        }
        if !r.iter().all(|v| positive(*v)) {
            return Err(ModelError::InvalidGains(
                "integral gains must be strictly positive".into(),
            ));
        }
        if !positive(beta) {
            return Err(ModelError::InvalidGains(format!(
                "anti-windup gain must be strictly positive, got {beta}"
            )));
        }
        Ok(Self { p, r, beta })
    }

    /// The same `p`, `r` for every agent.
    pub fn uniform(n: usize, p: f64, r: f64, beta: f64) -> Result<Self, ModelError> {
        Self::new(
            DVector::from_element(n, p),
            DVector::from_element(n, r),
            beta,
        )
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &DVector<f64> {
        &self.p
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `p_i > r_i` for every agent: the conjectured sufficient condition for
    /// global convergence.
    pub fn conjecture_ok(&self) -> bool {
        self.p.iter().zip(self.r.iter()).all(|(p, r)| p > r)
    }

    pub(crate) fn check_dim(&self, n: usize) -> Result<(), ModelError> {
        if self.n() != n {
            return Err(ModelError::DimensionMismatch {
                what: "controller gains",
                expected: n,
                got: self.n(),
            });
        }
        Ok(())
    }
}

/// Constant disturbance `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Disturbance(DVector<f64>);

impl Disturbance {
    pub fn new(w: DVector<f64>) -> Result<Self, ModelError> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteVector("disturbance"));
        }
        Ok(Self(w))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub(crate) fn check_dim(&self, n: usize) -> Result<(), ModelError> {
        if self.n() != n {
            return Err(ModelError::DimensionMismatch {
                what: "disturbance",
                expected: n,
                got: self.n(),
            });
        }
        Ok(())
    }
}

/// Plant state `x` and integrator state `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
}

impl ClosedLoopState {
    pub fn new(x: DVector<f64>, z: DVector<f64>) -> Result<Self, ModelError> {
        if x.len() != z.len() {
            return Err(ModelError::DimensionMismatch {
                what: "integrator state",
                expected: x.len(),
                got: z.len(),
            });
        }
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteVector("closed-loop state"));
        }
        Ok(Self { x, z })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            z: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

/// `u = -P x - R z`.
pub fn control_law(state: &ClosedLoopState, gains: &ControllerGains) -> DVector<f64> {
    DVector::from_iterator(
        state.n(),
        (0..state.n()).map(|i| -gains.p[i] * state.x[i] - gains.r[i] * state.z[i]),
    )
}
