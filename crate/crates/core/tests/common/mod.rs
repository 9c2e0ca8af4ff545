//! Suites shared by the standalone property tests and the acceptance run.
#![allow(dead_code)]

use awfair::equilibrium::{candidate_equilibrium, residuals};
use awfair::experiments::{random_system, system_rng, RandomStudyConfig, RandomSystem};
use awfair::fairness_lp::min_infnorm;
use awfair::{
    deadzone, lp_feasible, maximizing_set, saturate, ControllerGains, CouplingMatrix, DVector,
    Disturbance, EquilibriumTolerances,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SEED: u64 = 42;

pub fn systems(count: usize, seed: u64, n_range: (usize, usize)) -> Vec<RandomSystem> {
    let cfg = RandomStudyConfig {
        n_range,
        ..RandomStudyConfig::default()
    };
    (0..count)
        .map(|i| {
            random_system(&mut system_rng(seed, i as u64), &cfg)
                .unwrap()
                .0
        })
        .collect()
}

fn maximizer(c: &CouplingMatrix, w: &Disturbance) -> usize {
    maximizing_set(c, w, EquilibriumTolerances::default().tie_tol)
        .unwrap()
        .indices[0]
}

/// Worst plant and integrator residuals of the closed-form equilibrium.
pub fn residual_suite(systems: &[RandomSystem]) -> Result<(f64, f64), String> {
    let mut worst = (0.0f64, 0.0f64);
    for (i, s) in systems.iter().enumerate() {
        let k = maximizer(&s.coupling, &s.w);
        let eq = candidate_equilibrium(&s.coupling, &s.w, &s.gains, k)
            .map_err(|e| format!("system {i}: {e}"))?;
        let (p, q) = residuals(&s.coupling, &s.w, s.gains.beta(), &eq.x0, &eq.u0);
        worst = (worst.0.max(p), worst.1.max(q));
    }
    if worst.0 <= 1e-9 && worst.1 <= 1e-9 {
        Ok(worst)
    } else {
        Err(format!(
            "residuals {:e}, {:e} exceed 1e-9",
            worst.0, worst.1
        ))
    }
}

/// Largest relative gap between the LP optimum and `||x0||_inf`.
pub fn certification_suite(systems: &[RandomSystem]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (i, s) in systems.iter().enumerate() {
        let k = maximizer(&s.coupling, &s.w);
        let eq =
            candidate_equilibrium(&s.coupling, &s.w, &s.gains, k).map_err(|e| e.to_string())?;
        let cert = min_infnorm(&s.coupling, &s.w, 1e-9).map_err(|e| format!("system {i}: {e}"))?;
        let c = eq.cost();
        let rel = (cert.gamma_star - c).abs() / c.max(1.0);
        worst = worst.max(rel);
        if rel > 1e-7 {
            failures.push(i);
        }
    }
    if failures.is_empty() {
        Ok(worst)
    } else {
        Err(format!(
            "{} systems disagree (first {:?}), worst {worst:e}",
            failures.len(),
            &failures[..failures.len().min(5)]
        ))
    }
}

pub fn decomposition_suite(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = Normal::new(0.0, 10.0).unwrap();
    for trial in 0..count {
        let n = rng.random_range(1..=15);
        let v = DVector::from_iterator(n, (0..n).map(|_| spread.sample(&mut rng)));
        if saturate(&v) + deadzone(&v) != v {
            return Err(format!("identity fails on trial {trial}: {v:?}"));
        }
    }
    Ok(())
}

/// Feasible sets must be nested in gamma, and every witness must certify its gamma.
pub fn monotonicity_suite(
    systems: &[RandomSystem],
    pairs: usize,
    seed: u64,
) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for (i, s) in systems.iter().enumerate() {
        let top = s.w.as_vector().amax();
        for _ in 0..pairs {
            let a = rng.random::<f64>() * top;
            let b = rng.random::<f64>() * top;
            let (g1, g2) = (a.min(b), a.max(b));
            let f1 = lp_feasible(&s.coupling, &s.w, g1).map_err(|e| e.to_string())?;
            let f2 = lp_feasible(&s.coupling, &s.w, g2).map_err(|e| e.to_string())?;
            for (g, f) in [(g1, &f1), (g2, &f2)] {
                if let Some(u) = &f.witness {
                    let x = s.coupling.b() * u + s.w.as_vector();
                    if u.amax() > 1.0 || x.amax() > g + 1e-8 * g.max(1.0) {
                        return Err(format!(
                            "system {i}: witness for gamma {g} reaches {}",
                            x.amax()
                        ));
                    }
                }
            }
            if f1.feasible && !f2.feasible {
                return Err(format!("system {i}: feasible at {g1} but not at {g2}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// `x0` and `u0` must not depend on `P`, `R` for fixed `beta`.
pub fn gain_independence_suite(systems: &[RandomSystem], seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, s) in systems.iter().enumerate() {
        let n = s.coupling.n();
        let k = maximizer(&s.coupling, &s.w);
        let base =
            candidate_equilibrium(&s.coupling, &s.w, &s.gains, k).map_err(|e| e.to_string())?;
        for _ in 0..2 {
            let p = DVector::from_fn(n, |_, _| rng.random_range(1e-3..5.0));
            let r = DVector::from_fn(n, |_, _| rng.random_range(1e-3..5.0));
            let g = ControllerGains::new(p, r, s.gains.beta()).unwrap();
            let eq = candidate_equilibrium(&s.coupling, &s.w, &g, k).map_err(|e| e.to_string())?;
            if eq.x0 != base.x0 || eq.u0 != base.u0 {
                return Err(format!("system {i}: equilibrium moved with the gains"));
            }
        }
    }
    Ok(())
}

/// `min ||B u + w||_inf` over a uniform grid on `[-1, 1]^n` (n <= 2).
fn grid_min(
    c: &CouplingMatrix,
    w: &DVector<f64>,
    center: &[f64],
    half: f64,
    step: f64,
) -> (f64, Vec<f64>) {
    let n = c.n();
    let b = c.b();
    let axis = |j: usize| {
        let lo = (center[j] - half).max(-1.0);
        let hi = (center[j] + half).min(1.0);
        let count = ((hi - lo) / step).round() as usize;
        (0..=count).map(move |i| (lo + i as f64 * step).min(hi))
    };
    let eval = |u: &[f64]| {
        (0..n)
            .map(|i| (w[i] + (0..n).map(|j| b[(i, j)] * u[j]).sum::<f64>()).abs())
            .fold(0.0, f64::max)
    };
    let mut best = (f64::INFINITY, vec![0.0; n]);
    if n == 1 {
        for u0 in axis(0) {
            let v = eval(&[u0]);
            if v < best.0 {
                best = (v, vec![u0]);
            }
        }
    } else {
        for u0 in axis(0) {
            for u1 in axis(1) {
                let v = eval(&[u0, u1]);
                if v < best.0 {
                    best = (v, vec![u0, u1]);
                }
            }
        }
    }
    best
}

/// Brute-force check of the LP optimum on one- and two-agent systems.
///
/// A step-`h` grid is within `||B||_inf h / 2` of the optimum, which brackets
/// the LP value; nested refinement around the best grid point then pins it
/// down to `1e-4`.
pub fn grid_suite(systems: &[RandomSystem]) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for (i, s) in systems.iter().enumerate() {
        let n = s.coupling.n();
        assert!(n <= 2);
        let w = s.w.as_vector();
        let gamma = min_infnorm(&s.coupling, &s.w, 1e-9)
            .map_err(|e| e.to_string())?
            .gamma_star;
        let h = 1e-3;
        let (coarse, mut at) = grid_min(&s.coupling, w, &vec![0.0; n], 1.0, h);
        let lip = s
            .coupling
            .b()
            .row_iter()
            .map(|r| r.abs().sum())
            .fold(0.0, f64::max);
        if gamma > coarse + 1e-9 || gamma < coarse - lip * h / 2.0 - 1e-9 {
            return Err(format!(
                "system {i}: LP {gamma} outside grid bracket around {coarse}"
            ));
        }
        let mut best = coarse;
        let mut step = h;
        while step > 1e-9 {
            let (v, u) = grid_min(&s.coupling, w, &at, 4.0 * step, step / 8.0);
            if v < best {
                best = v;
                at = u;
            }
            step /= 8.0;
        }
        worst = worst.max((best - gamma).abs());
        if (best - gamma).abs() > 1e-4 {
            return Err(format!("system {i}: grid {best} vs LP {gamma}"));
        }
    }
    Ok(worst)
}
