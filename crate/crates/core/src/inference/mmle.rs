//! Marginal maximum likelihood for the batch standard deviations via the
//! Laplace approximation.
//!
//! With `beta = sigma * z`, the inner problem maximizes
//! `g(alpha, z) = loglik(alpha, sigma z) - |z|^2 / 2` jointly over the fixed
//! terms and `z` by Newton's method. The approximate log marginal likelihood
//! is then `g(alpha_hat, z_hat) - log det(I + D A D) / 2` where `D = diag(sigma)`
//! and `A = X' W X` over the batch columns. The objective is even in every
//! `sigma_b`, smooth through zero, and equals the pinned-coefficient limit at
//! `sigma_b = 0`, so the outer search runs unconstrained over `sigma` and
//! reports `|sigma|`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::{inv_logit, log1p_exp_and_inv_logit, FitData, Layout, ModelSpec, ParameterVector};

const INNER_MAX_ITER: usize = 200;
const INNER_TOL: f64 = 1e-9;

pub struct Laplace<'a> {
    data: &'a FitData,
    layout: Layout,
    batch_of: Vec<usize>,
}

/// Objective value, its gradient in `sigma`, and the conditional mode.
#[derive(Clone, Debug)]
pub struct LaplaceEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// `[fixed | z]` at the inner optimum.
    pub mode: Vec<f64>,
}

struct RowTerms {
    eta: Vec<f64>,
    w: Vec<f64>,
    resid: Vec<f64>,
    g: f64,
}

fn cholesky_with_jitter(mut h: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = (0..h.nrows()).map(|i| h[(i, i)].abs()).fold(1.0, f64::max);
    let mut jitter = 0.0;
    for _ in 0..12 {
        if let Some(c) = Cholesky::new(h.clone()) {
            return Ok(c);
        }
        let add = if jitter == 0.0 { 1e-12 * scale } else { jitter * 9.0 };
        for i in 0..h.nrows() {
            h[(i, i)] += add;
        }
        jitter += add;
    }
    Err(Error::Optimization {
        message: "inner Hessian is not positive definite".into(),
        trace: vec![],
    })
}

impl<'a> Laplace<'a> {
    pub fn new(spec: &ModelSpec, data: &'a FitData) -> Result<Self> {
        let layout = spec.layout();
        if data.index.n_batches() != layout.n_batches() || data.index.n_fixed() != layout.n_fixed {
            return Err(Error::Contract("design index built for a different spec".into()));
        }
        Ok(Laplace {
            data,
            batch_of: layout.batch_of_beta(),
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn inner_dim(&self) -> usize {
        self.layout.n_fixed + self.layout.n_beta
    }

    /// Starting point for the inner problem.
    pub fn initial_mode(&self) -> Vec<f64> {
        vec![0.0; self.inner_dim()]
    }

    fn rows(&self, sigma: &[f64], u: &[f64]) -> RowTerms {
        let idx = &self.data.index;
        let nf = self.layout.n_fixed;
        let n_rows = idx.rows();
        let mut t = RowTerms {
            eta: Vec::with_capacity(n_rows),
            w: Vec::with_capacity(n_rows),
            resid: Vec::with_capacity(n_rows),
            g: -0.5 * u[nf..].iter().map(|z| z * z).sum::<f64>(),
        };
        for r in 0..n_rows {
            let mut eta = 0.0;
            for j in 0..nf {
                eta += u[j] * idx.fixed_covariate(r, j);
            }
            for &k in idx.positions(r) {
                let k = k as usize;
                eta += sigma[self.batch_of[k]] * u[nf + k];
            }
            let y = self.data.outcomes.successes[r];
            let n = self.data.outcomes.trials[r];
            let (l1p, p) = log1p_exp_and_inv_logit(eta);
            t.g += y * eta - n * l1p;
            t.eta.push(eta);
            t.w.push(n * p * (1.0 - p));
            t.resid.push(y - n * p);
        }
        t
    }

    /// Gradient and negative Hessian of `g` in `[fixed | z]`.
    fn grad_hess(&self, sigma: &[f64], u: &[f64], t: &RowTerms) -> (DVector<f64>, DMatrix<f64>) {
        let idx = &self.data.index;
        let nf = self.layout.n_fixed;
        let dim = self.inner_dim();
        let mut grad = DVector::zeros(dim);
        let mut h = DMatrix::zeros(dim, dim);
        let mut cols: Vec<(usize, f64)> = Vec::with_capacity(nf + idx.n_batches());
        for r in 0..idx.rows() {
            cols.clear();
            for j in 0..nf {
                cols.push((j, idx.fixed_covariate(r, j)));
            }
            for &k in idx.positions(r) {
                let k = k as usize;
                cols.push((nf + k, sigma[self.batch_of[k]]));
            }
            let (res, w) = (t.resid[r], t.w[r]);
            for &(a, xa) in &cols {
                grad[a] += res * xa;
                for &(b, xb) in &cols {
                    h[(a, b)] += w * xa * xb;
                }
            }
        }
        for k in 0..self.layout.n_beta {
            grad[nf + k] -= u[nf + k];
            h[(nf + k, nf + k)] += 1.0;
        }
        (grad, h)
    }

    /// Newton iterations on the inner problem starting from `u`.
    fn inner(&self, sigma: &[f64], mut u: Vec<f64>) -> Result<(Vec<f64>, RowTerms, Cholesky<f64, Dyn>)> {
        let mut t = self.rows(sigma, &u);
        for _ in 0..INNER_MAX_ITER {
            let (grad, h) = self.grad_hess(sigma, &u, &t);
            let chol = cholesky_with_jitter(h).map_err(|_| Error::Optimization {
                message: format!("inner Hessian not positive definite at sigma = {sigma:?}"),
                trace: sigma.to_vec(),
            })?;
            let scale = 1.0 + self.data.outcomes.total_trials().sqrt();
            if grad.amax() <= INNER_TOL * scale {
                return Ok((u, t, chol));
            }
            let step = chol.solve(&grad);
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, d)| a + s * d).collect();
                let tt = self.rows(sigma, &trial);
                if tt.g.is_finite() && tt.g >= t.g - 1e-12 * t.g.abs().max(1.0) {
                    u = trial;
                    t = tt;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            if !accepted {
                return Err(Error::Optimization {
                    message: format!("inner Newton step failed at sigma = {sigma:?}"),
                    trace: sigma.to_vec(),
                });
            }
        }
        Err(Error::Optimization {
            message: format!("inner Newton did not converge at sigma = {sigma:?}"),
            trace: sigma.to_vec(),
        })
    }

    /// Evaluates the Laplace objective and its exact gradient at `sigma`,
    /// warm-starting the inner problem from `start`.
    pub fn evaluate(&self, sigma: &[f64], start: &[f64]) -> Result<LaplaceEval> {
        let idx = &self.data.index;
        let nf = self.layout.n_fixed;
        let nk = self.layout.n_beta;
        let nb = self.layout.n_batches();
        let (u, t, chol_h) = self.inner(sigma, start.to_vec())?;
        let z = &u[nf..];

        // A = X'WX over batch columns; M = I + D A D
        let mut a = DMatrix::<f64>::zeros(nk, nk);
        for r in 0..idx.rows() {
            let w = t.w[r];
            for &k in idx.positions(r) {
                for &l in idx.positions(r) {
                    a[(k as usize, l as usize)] += w;
                }
            }
        }
        let sig_k: Vec<f64> = self.batch_of.iter().map(|&b| sigma[b]).collect();
        let mut m = DMatrix::<f64>::identity(nk, nk);
        for k in 0..nk {
            for l in 0..nk {
                m[(k, l)] += sig_k[k] * a[(k, l)] * sig_k[l];
            }
        }
        let chol_m = Cholesky::new(m).ok_or_else(|| Error::Optimization {
            message: format!("I + DAD not positive definite at sigma = {sigma:?}"),
            trace: sigma.to_vec(),
        })?;
        let log_det: f64 = 2.0 * chol_m.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let value = t.g - 0.5 * log_det;

        let minv = chol_m.inverse();
        let mut r_k = vec![0.0; nk];
        for r in 0..idx.rows() {
            for &k in idx.positions(r) {
                r_k[k as usize] += t.resid[r];
            }
        }

        let mut grad = vec![0.0; nb];
        // envelope term and the direct dependence of M on sigma
        for k in 0..nk {
            let b = self.batch_of[k];
            grad[b] += r_k[k] * z[k];
            let mut admk = 0.0;
            for l in 0..nk {
                admk += a[(k, l)] * sig_k[l] * minv[(l, k)];
            }
            grad[b] -= admk;
        }

        // leverages h_r = x_r' D M^{-1} D x_r and weight derivatives
        let mut lev = Vec::with_capacity(idx.rows());
        let mut wprime = Vec::with_capacity(idx.rows());
        for r in 0..idx.rows() {
            let pos = idx.positions(r);
            let mut h = 0.0;
            for &k in pos {
                for &l in pos {
                    let (k, l) = (k as usize, l as usize);
                    h += sig_k[k] * sig_k[l] * minv[(k, l)];
                }
            }
            lev.push(h);
            let p = inv_logit(t.eta[r]);
            wprime.push(t.w[r] * (1.0 - 2.0 * p));
        }

        // dependence of W on the conditional mode
        for b in 0..nb {
            let mut q = DVector::<f64>::zeros(nf + nk);
            for r in 0..idx.rows() {
                let kb = idx.positions(r)[b] as usize;
                let v = t.w[r] * z[kb];
                for j in 0..nf {
                    q[j] -= v * idx.fixed_covariate(r, j);
                }
                for &k in idx.positions(r) {
                    let k = k as usize;
                    q[nf + k] -= sig_k[k] * v;
                }
            }
            for k in 0..nk {
                if self.batch_of[k] == b {
                    q[nf + k] += r_k[k];
                }
            }
            let du = chol_h.solve(&q);
            let mut tr = 0.0;
            for r in 0..idx.rows() {
                let pos = idx.positions(r);
                let mut deta = z[pos[b] as usize];
                for j in 0..nf {
                    deta += idx.fixed_covariate(r, j) * du[j];
                }
                for &k in pos {
                    let k = k as usize;
                    deta += sig_k[k] * du[nf + k];
                }
                tr += wprime[r] * deta * lev[r];
            }
            grad[b] -= 0.5 * tr;
        }

        Ok(LaplaceEval { value, grad, mode: u })
    }

    /// Constrained parameters from `sigma` and an inner mode.
    pub fn parameters(&self, sigma: &[f64], mode: &[f64]) -> ParameterVector {
        let nf = self.layout.n_fixed;
        ParameterVector {
            fixed: mode[..nf].to_vec(),
            beta: mode[nf..]
                .iter()
                .zip(&self.batch_of)
                .map(|(z, &b)| sigma[b] * z)
                .collect(),
            sigma: sigma.iter().map(|s| s.abs()).collect(),
        }
    }
}
