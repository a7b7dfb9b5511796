//! Limited-memory BFGS with a backtracking (Armijo) line search. Minimizes;
//! every accepted step strictly lowers the objective.

use log::debug;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop once `max |g_i|` falls below this.
    pub tol: f64,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 10,
            max_iters: 200,
            tol: 1e-4,
            armijo: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_max_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective after each accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// Returned by [`minimize`] when the objective at the starting point is not
/// finite.
#[derive(Debug, Clone, Copy)]
pub struct NonFiniteStart(pub f64);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(g: &[f64]) -> f64 {
    g.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<LbfgsResult, NonFiniteStart>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0;
    let (mut value, mut grad) = f(&x);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NonFiniteStart(value));
    }
    let mut history = vec![value];
    // Correction pairs, oldest first.
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < opts.max_iters {
        if max_norm(&grad) < opts.tol {
            termination = Termination::Converged;
            break;
        }

        // Two-loop recursion: direction = -H g.
        let mut q = grad.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            alphas[i] = rho_hist[i] * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alphas[i] * yj;
            }
        }
        let initial_scale = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0),
        };
        for qj in q.iter_mut() {
            *qj *= initial_scale;
        }
        for i in 0..s_hist.len() {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        let mut direction: Vec<f64> = q.into_iter().map(|v| -v).collect();
        let mut slope = dot(&direction, &grad);
        if !(slope < 0.0) {
            // Curvature information went bad: fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1.0);
            direction = grad.iter().map(|g| -g * scale).collect();
            slope = dot(&direction, &grad);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(xi, di)| xi + step * di).collect();
            let (tv, tg) = f(&trial);
            if tv.is_finite() && tg.iter().all(|g| g.is_finite()) && tv <= value + opts.armijo * step * slope && tv < value {
                accepted = Some((trial, tv, tg));
                break;
            }
            step *= 0.5;
        }
        let Some((new_x, new_value, new_grad)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = new_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }
        debug!("iteration {iterations}: objective {new_value:.6}, step {step:.3e}");
        x = new_x;
        value = new_value;
        grad = new_grad;
        history.push(value);
    }
    if termination == Termination::MaxIterations && max_norm(&grad) < opts.tol {
        termination = Termination::Converged;
    }
    Ok(LbfgsResult {
        gradient_max_norm: max_norm(&grad),
        x,
        value,
        iterations,
        termination,
        history,
    })
}
