//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the engine's index, density or poststratification
//! code.

#![allow(dead_code)]

use mrp::data::{CellKey, CellRecord, CellTable, Factor, N_CELLS};
use mrp::model::{LogDensity, ModelSpec, ParameterVector};
use mrp::poststrat::{Slice, SubsetQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, Normal};

/// Every level tuple of `factors`, first factor slowest.
fn level_tuples(factors: &[Factor]) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    for f in factors {
        let mut next = Vec::new();
        for prefix in &out {
            for level in 1..=f.cardinality() as u8 {
                let mut t = prefix.clone();
                t.push(level);
                next.push(t);
            }
        }
        out = next;
    }
    out
}

fn factor_level(key: &CellKey, f: Factor) -> u8 {
    match f {
        Factor::Income => key.income,
        Factor::Age => key.age,
        Factor::Ethnicity => key.ethnicity,
        Factor::State => key.state,
    }
}

/// Dense design matrix: intercept, centered state predictor (when enabled),
/// then one indicator column per batch level.
pub fn dense_design(keys: &[CellKey], state_predictor: &[f64], spec: &ModelSpec) -> Vec<Vec<f64>> {
    let tuples: Vec<(Vec<Factor>, Vec<Vec<u8>>)> = spec
        .batches
        .iter()
        .map(|b| (b.factors.clone(), level_tuples(&b.factors)))
        .collect();
    keys.iter()
        .map(|key| {
            let mut row = vec![1.0];
            if spec.state_predictor {
                row.push(state_predictor[key.state as usize - 1] - 0.5);
            }
            for (factors, levels) in &tuples {
                for t in levels {
                    let hit = factors.iter().zip(t).all(|(&f, &l)| factor_level(key, f) == l);
                    row.push(if hit { 1.0 } else { 0.0 });
                }
            }
            row
        })
        .collect()
}

/// Which batch each dense indicator column belongs to.
pub fn batch_of_column(spec: &ModelSpec) -> Vec<usize> {
    spec.batches
        .iter()
        .enumerate()
        .flat_map(|(b, batch)| std::iter::repeat_n(b, level_tuples(&batch.factors).len()))
        .collect()
}

pub fn dense_eta(x: &[Vec<f64>], params: &ParameterVector) -> Vec<f64> {
    let coef: Vec<f64> = params.fixed.iter().chain(&params.beta).copied().collect();
    x.iter()
        .map(|row| row.iter().zip(&coef).map(|(a, b)| a * b).sum())
        .collect()
}

/// Log posterior on the `[fixed | beta | log sigma]` scale, term by term.
pub fn naive_log_posterior(
    params: &ParameterVector,
    x: &[Vec<f64>],
    successes: &[f64],
    trials: &[f64],
    spec: &ModelSpec,
) -> f64 {
    let mut lp = 0.0;
    for ((eta, &y), &n) in dense_eta(x, params).iter().zip(successes).zip(trials) {
        let p = 1.0 / (1.0 + (-eta).exp());
        lp += y * p.ln() + (n - y) * (1.0 - p).ln();
    }
    for (k, b) in batch_of_column(spec).into_iter().enumerate() {
        lp += Normal::new(0.0, params.sigma[b]).unwrap().ln_pdf(params.beta[k]);
    }
    let hyper = Normal::new(0.0, spec.prior_scale_hyper).unwrap();
    for &s in &params.sigma {
        lp += 2f64.ln() + hyper.ln_pdf(s) + s.ln();
    }
    lp
}

/// Central differences with step `h` in every coordinate.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn query_holds(q: &SubsetQuery, key: &CellKey) -> bool {
    let eq = |want: Option<u8>, have: u8| want.is_none_or(|w| w == have);
    let white = q.slice != Slice::White || key.ethnicity == 1;
    eq(q.income, key.income) && eq(q.age, key.age) && eq(q.ethnicity, key.ethnicity) && eq(q.state, key.state) && white
}

/// Weighted mean over every cell satisfying the query; `None` when the
/// subset has no population.
pub fn brute_poststratify(theta: &[f64], table: &CellTable, q: &SubsetQuery) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (cell, t) in table.cells().iter().zip(theta) {
        if query_holds(q, &cell.key) {
            num += cell.population * t;
            den += cell.population;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// A complete cell table with random populations (about 5% zeros) and
/// random per-state predictors.
pub fn random_table(rng: &mut ChaCha8Rng) -> CellTable {
    let shares: Vec<f64> = (0..51).map(|_| rng.random_range(0.2..0.8)).collect();
    let records = (0..N_CELLS)
        .map(|i| {
            let key = CellKey::from_canonical_index(i);
            let population = if rng.random_bool(0.05) { 0.0 } else { rng.random_range(1.0..1e5f64).round() };
            CellRecord {
                key,
                population,
                state_predictor: shares[key.state as usize - 1],
            }
        })
        .collect();
    CellTable::new(records).expect("complete table")
}

pub fn random_query(rng: &mut ChaCha8Rng) -> SubsetQuery {
    let mut pick = |card: u8| rng.random_bool(0.5).then(|| rng.random_range(1..=card));
    SubsetQuery {
        income: pick(5),
        age: pick(4),
        ethnicity: pick(4),
        state: pick(51),
        slice: if rng.random_bool(0.3) { Slice::White } else { Slice::All },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hierarchical intercept: `y ~ Binomial(n, inv_logit(alpha))`,
/// `alpha ~ N(0, sigma)`, `sigma ~ half-normal(1)`. Unconstrained coordinates
/// are `(z, log sigma)` with `alpha = sigma * z`.
pub struct HierIntercept {
    pub y: f64,
    pub n: f64,
}

impl HierIntercept {
    fn log_density(&self, z: f64, rho: f64) -> (f64, [f64; 2]) {
        let sigma = rho.exp();
        let alpha = sigma * z;
        let p = 1.0 / (1.0 + (-alpha).exp());
        let softplus = alpha.max(0.0) + (-alpha.abs()).exp().ln_1p();
        let lp = self.y * alpha - self.n * softplus - 0.5 * z * z - 0.5 * sigma * sigma + rho;
        let dalpha = self.y - self.n * p;
        (lp, [dalpha * sigma - z, dalpha * alpha - sigma * sigma + 1.0])
    }

    /// Posterior mean and sd of alpha and sigma by a 2-D midpoint rule over
    /// `(z, log sigma)`.
    pub fn quadrature(&self) -> [(f64, f64); 2] {
        let (nz, nr) = (1601, 1601);
        let (z0, z1, r0, r1) = (-9.0, 9.0, -12.0, 2.5);
        let (dz, dr) = ((z1 - z0) / nz as f64, (r1 - r0) / nr as f64);
        let mut grid = Vec::with_capacity(nz * nr);
        let mut top = f64::NEG_INFINITY;
        for i in 0..nz {
            let z = z0 + (i as f64 + 0.5) * dz;
            for j in 0..nr {
                let r = r0 + (j as f64 + 0.5) * dr;
                let (lp, _) = self.log_density(z, r);
                top = top.max(lp);
                grid.push((r.exp() * z, r.exp(), lp));
            }
        }
        let mut m = [[0.0; 3]; 2];
        for (alpha, sigma, lp) in grid {
            let w = (lp - top).exp();
            for (k, v) in [alpha, sigma].into_iter().enumerate() {
                m[k][0] += w;
                m[k][1] += w * v;
                m[k][2] += w * v * v;
            }
        }
        m.map(|[w, s1, s2]| {
            let mean = s1 / w;
            (mean, (s2 / w - mean * mean).sqrt())
        })
    }
}

impl LogDensity for HierIntercept {
    fn dim(&self) -> usize {
        2
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (lp, g) = self.log_density(theta[0], theta[1]);
        grad.copy_from_slice(&g);
        lp
    }
}
