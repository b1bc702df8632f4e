//! Limited-memory BFGS minimization with a weak-Wolfe bisection line search.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct LbfgsConfig {
    pub memory: usize,
    /// Convergence when the Euclidean gradient norm drops to this value.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            memory: 10,
            tolerance: 1e-6,
            max_iter: 5000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after each accepted step.
    pub trace: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_STEPS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct Probe {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

/// Bisection search for a step satisfying the weak Wolfe conditions.
/// Non-finite trial values count as too long a step, so the search retreats.
/// A decrease within rounding of `f0` is accepted when the curvature
/// condition holds, which keeps the search alive near a converged optimum.
fn line_search<F>(f: &mut F, x: &[f64], f0: f64, g0: &[f64], d: &[f64], t0: f64) -> Option<Probe>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let gd = dot(g0, d);
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut t = t0;
    let mut g = vec![0.0; x.len()];
    let slack = 1e-12 * f0.abs().max(1.0);
    for _ in 0..MAX_LINE_STEPS {
        let xt: Vec<f64> = x.iter().zip(d).map(|(xi, di)| xi + t * di).collect();
        let ft = f(&xt, &mut g);
        let finite = ft.is_finite() && g.iter().all(|v| v.is_finite());
        let sufficient = finite && (ft <= f0 + C1 * t * gd || (ft <= f0 + slack && t * norm(d) < 1e-6));
        if !sufficient {
            hi = t;
        } else if dot(&g, d) < C2 * gd {
            lo = t;
        } else {
            return Some(Probe { x: xt, f: ft, g });
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo.max(t) };
    }
    None
}

/// Minimizes `f`, which returns the objective and writes its gradient.
pub fn minimize<F>(mut f: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Optimization {
            message: "objective not finite at the starting point".into(),
            trace: vec![fx],
        });
    }
    let mut trace = vec![fx];
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut failures = 0;

    while iterations < cfg.max_iter {
        let gnorm = norm(&g);
        if gnorm <= cfg.tolerance {
            return Ok(Minimum {
                grad_norm: gnorm,
                x,
                value: fx,
                grad: g,
                iterations,
                converged: true,
                trace,
            });
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        if dot(&d, &g) >= 0.0 {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
        }
        let t0 = if hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };

        match line_search(&mut f, &x, fx, &g, &d, t0) {
            Some(p) => {
                failures = 0;
                let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                if sy > 1e-12 * norm(&s) * norm(&y) {
                    if hist.len() == cfg.memory {
                        hist.pop_front();
                    }
                    hist.push_back((s, y, 1.0 / sy));
                }
                x = p.x;
                fx = p.f;
                g = p.g;
                trace.push(fx);
            }
            None => {
                failures += 1;
                if failures >= 2 {
                    return Err(Error::Optimization {
                        message: format!(
                            "line search failed twice in a row at iteration {iterations} (gradient norm {gnorm:.3e})"
                        ),
                        trace,
                    });
                }
                hist.clear();
            }
        }
        iterations += 1;
    }
    Ok(Minimum {
        grad_norm: norm(&g),
        x,
        value: fx,
        grad: g,
        iterations,
        converged: false,
        trace,
    })
}
