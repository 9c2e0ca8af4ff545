//! Dense-tableau phase-one simplex for `A v <= b, v >= 0`.
//!
//! Bland's rule picks both the entering and the leaving variable, so the
//! method cannot cycle; the pivot cap turns numerical trouble into an error
//! instead of a hang.

use thiserror::Error;

pub const MAX_PIVOTS: usize = 10_000;

const PIVOT_EPS: f64 = 1e-11;
const COST_EPS: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("simplex exceeded {pivots} pivots without terminating")]
pub struct PivotLimit {
    pub pivots: usize,
}

/// Outcome of a phase-one solve.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseOne {
    Feasible(Vec<f64>),
    Infeasible { violation: f64 },
}

struct Tableau {
    /// Row-major `rows x (cols + 1)`; the last column is the right-hand side.
    cells: Vec<f64>,
    rows: usize,
    cols: usize,
    /// Reduced costs of the phase-one objective, plus its current value last.
    cost: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    #[inline]
    fn width(&self) -> usize {
        self.cols + 1
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.cells[r * self.width() + c]
    }

    #[inline]
    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn objective(&self) -> f64 {
        -self.cost[self.cols]
    }

    fn entering(&self) -> Option<usize> {
        (0..self.cols).find(|&j| self.cost[j] < -COST_EPS)
    }

    fn leaving(&self, col: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for r in 0..self.rows {
            let a = self.at(r, col);
            if a <= PIVOT_EPS {
                continue;
            }
            let ratio = self.rhs(r).max(0.0) / a;
            best = match best {
                None => Some((r, ratio)),
                Some((br, bratio)) => {
                    let tie = (ratio - bratio).abs() <= 1e-12 * (1.0 + bratio.abs());
                    if ratio < bratio && !tie || tie && self.basis[r] < self.basis[br] {
                        Some((r, ratio))
                    } else {
                        Some((br, bratio))
                    }
                }
            };
        }
        best.map(|(r, _)| r)
    }

    fn pivot(&mut self, pr: usize, pc: usize) {
        let w = self.width();
        let inv = 1.0 / self.at(pr, pc);
        let (before, rest) = self.cells.split_at_mut(pr * w);
        let (prow, after) = rest.split_at_mut(w);
        for v in prow.iter_mut() {
            *v *= inv;
        }
        prow[pc] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[pc];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * p;
                }
                row[pc] = 0.0;
            }
        };
        before.chunks_exact_mut(w).for_each(eliminate);
        after.chunks_exact_mut(w).for_each(eliminate);
        eliminate(&mut self.cost);
        self.basis[pr] = pc;
    }
}

/// Find `v >= 0` with `a v <= b`, where `a` is row-major `b.len() x nvars`.
///
/// Feasibility is declared when the total artificial infeasibility drops to
/// `feas_tol` or below.
pub fn phase_one(
    a: &[f64],
    b: &[f64],
    nvars: usize,
    feas_tol: f64,
    max_pivots: usize,
) -> Result<PhaseOne, PivotLimit> {
    let rows = b.len();
    debug_assert_eq!(a.len(), rows * nvars);
    let n_art = b.iter().filter(|v| **v < 0.0).count();
    let cols = nvars + rows + n_art;
    let w = cols + 1;
    let mut cells = vec![0.0; rows * w];
    let mut cost = vec![0.0; w];
    let mut basis = vec![0; rows];
    let mut next_art = nvars + rows;
    for r in 0..rows {
        let row = &mut cells[r * w..(r + 1) * w];
        let sign = if b[r] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nvars {
            row[j] = sign * a[r * nvars + j];
        }
        row[nvars + r] = sign;
        row[cols] = sign * b[r];
        if sign < 0.0 {
            row[next_art] = 1.0;
            basis[r] = next_art;
            next_art += 1;
            // cost row = -(sum of artificial rows) over non-artificial columns
            for j in 0..nvars + rows {
                cost[j] -= row[j];
            }
            cost[cols] -= row[cols];
        } else {
            basis[r] = nvars + r;
        }
    }
    let mut t = Tableau {
        cells,
        rows,
        cols,
        cost,
        basis,
    };

    let mut pivots = 0;
    while t.objective() > feas_tol {
        let Some(col) = t.entering() else {
            return Ok(PhaseOne::Infeasible {
                violation: t.objective(),
            });
        };
        // phase-one objective is bounded below by zero
        let Some(row) = t.leaving(col) else {
            return Ok(PhaseOne::Infeasible {
                violation: t.objective(),
            });
        };
        if pivots == max_pivots {
            return Err(PivotLimit { pivots });
        }
        t.pivot(row, col);
        pivots += 1;
    }

    let mut v = vec![0.0; nvars];
    for (r, &var) in t.basis.iter().enumerate() {
        if var < nvars {
            v[var] = t.rhs(r).max(0.0);
        }
    }
    Ok(PhaseOne::Feasible(v))
}
