//! Damped Gauss–Newton (Levenberg–Marquardt) for small dense problems.
//!
//! Parameters are expected in natural units of order one; the Jacobian is
//! taken by forward differences with a fixed step in those units.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when `(f_old − f_new) / f_old` falls below this.
    pub relative_decrease: f64,
    /// Stop when the step norm falls below this.
    pub min_step: f64,
    /// Forward-difference step in scaled units.
    pub fd_step: f64,
    pub initial_damping: f64,
    pub max_damping: f64,
    /// Singular-value ratio under which the Jacobian counts as rank deficient.
    pub rank_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_decrease: 1e-8,
            min_step: 1e-10,
            fd_step: 1e-3,
            initial_damping: 1e-3,
            max_damping: 1e16,
            rank_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub x: Vec<f64>,
    /// Objective `Σ r²` at the start and after every accepted step.
    pub history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub diagnostic: Option<String>,
}

fn sum_sq(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum()
}

fn jacobian<F>(residuals: &F, x: &[f64], r0: &[f64], h: f64) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let mut jac = DMatrix::zeros(r0.len(), x.len());
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + h;
        let rp = residuals(&xp);
        for (i, (a, b)) in rp.iter().zip(r0).enumerate() {
            jac[(i, j)] = (a - b) / h;
        }
        xp[j] = x[j];
    }
    jac
}

/// Minimizes `Σ r(x)²` from `x0`.
pub fn minimize<F>(residuals: F, x0: &[f64], opts: &LmOptions) -> LmOutcome
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut r = residuals(&x);
    let mut cost = sum_sq(&r);
    let mut history = vec![cost];
    let mut lambda = opts.initial_damping;
    let mut converged = false;
    let mut diagnostic = None;
    let mut iterations = 0;
    let mut jac = jacobian(&residuals, &x, &r, opts.fd_step);
    let mut need_jacobian = false;

    if cost == 0.0 {
        converged = true;
    }

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        if need_jacobian {
            jac = jacobian(&residuals, &x, &r, opts.fd_step);
            need_jacobian = false;
        }
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * DVector::from_column_slice(&r);
        let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max);
        let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);

        let mut damped = a.clone();
        for i in 0..n {
            damped[(i, i)] += lambda * a[(i, i)].max(floor);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                lambda *= 10.0;
                if lambda > opts.max_damping {
                    diagnostic = Some("normal equations singular beyond damping repair".into());
                    break;
                }
                continue;
            }
        };
        let step_norm = step.norm();
        if step_norm < opts.min_step {
            converged = true;
            break;
        }
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let r_trial = residuals(&trial);
        let cost_trial = sum_sq(&r_trial);
        if cost_trial.is_finite() && cost_trial < cost {
            let rel = (cost - cost_trial) / cost;
            x = trial;
            r = r_trial;
            cost = cost_trial;
            history.push(cost);
            need_jacobian = true;
            lambda = (lambda / 10.0).max(1e-12);
            if rel < opts.relative_decrease || cost == 0.0 {
                converged = true;
            }
        } else {
            lambda *= 10.0;
            if lambda > opts.max_damping {
                // no descent direction left at machine precision
                if cost <= history[0] * f64::EPSILON {
                    converged = true;
                } else {
                    diagnostic = Some(format!("damping exceeded {:e} without descent", opts.max_damping));
                }
                break;
            }
        }
    }
    if !converged && diagnostic.is_none() {
        diagnostic = Some(format!("iteration cap {} reached", opts.max_iterations));
    }

    // rank check at the solution
    let jac = jacobian(&residuals, &x, &r, opts.fd_step);
    let sv = jac.singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if n > 0 && (sv.len() < n || smin <= opts.rank_tolerance * smax) {
        converged = false;
        diagnostic = Some(format!(
            "rank-deficient Jacobian: singular values span [{smin:e}, {smax:e}]"
        ));
    }

    LmOutcome {
        x,
        history,
        iterations,
        converged,
        diagnostic,
    }
}
