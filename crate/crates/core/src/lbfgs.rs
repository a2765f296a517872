//! Limited-memory BFGS with Armijo backtracking.
//!
//! The objective may refuse a point (for instance near a collision); such
//! trial points are treated like an Armijo failure and the step is shortened.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub grad_tol: f64,
    /// Stop when `(f_k - f_{k+1}) / max(|f_k|, |f_{k+1}|, 1)` falls below this.
    pub f_tol: f64,
    pub max_iter: usize,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, grad_tol: 1e-9, f_tol: 1e-15, max_iter: 20_000, armijo: 1e-4, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    FunctionTolerance,
    MaxIterations,
    /// No acceptable step; `collision` is set when every rejected trial was
    /// refused by the objective rather than failing the Armijo test.
    LineSearchFailed {
        collision: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub reason: StopReason,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Minimizes `f` from `x0`. `f` returns the value and gradient, or an error
/// for inadmissible points. `observe` is called after every accepted step
/// with `(iteration, x, f, |g|)`.
pub fn minimize<F, O>(x0: Vec<f64>, mut f: F, opts: &LbfgsOptions, mut observe: O) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: FnMut(usize, &[f64], f64, f64),
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::domain("objective is not finite at the starting point"));
    }
    let mut gnorm = norm(&g);
    observe(0, &x, fx, gnorm);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let n = x.len();

    for iter in 1..=opts.max_iter {
        if gnorm <= opts.grad_tol {
            return Ok(LbfgsOutcome {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter - 1,
                reason: StopReason::GradientTolerance,
            });
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for i in 0..n {
                d[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for i in 0..n {
                d[i] += (a - b) * s[i];
            }
        }
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut step = if pairs.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        let mut only_refusals = true;
        for _ in 0..opts.max_backtracks {
            let trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            match f(&trial) {
                Ok((ft, gt)) if ft.is_finite() && ft <= fx + opts.armijo * step * slope => {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                Ok(_) => only_refusals = false,
                Err(Error::Collision { .. }) => {}
                Err(e) => return Err(e),
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            return Ok(LbfgsOutcome {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter - 1,
                reason: StopReason::LineSearchFailed { collision: only_refusals },
            });
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }

        let rel = (fx - f_new) / fx.abs().max(f_new.abs()).max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        gnorm = norm(&g);
        observe(iter, &x, fx, gnorm);
        if gnorm <= opts.grad_tol {
            return Ok(LbfgsOutcome {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter,
                reason: StopReason::GradientTolerance,
            });
        }
        if rel <= opts.f_tol {
            return Ok(LbfgsOutcome {
                x,
                f: fx,
                grad_norm: gnorm,
                iterations: iter,
                reason: StopReason::FunctionTolerance,
            });
        }
    }
    Ok(LbfgsOutcome { x, f: fx, grad_norm: gnorm, iterations: opts.max_iter, reason: StopReason::MaxIterations })
}
