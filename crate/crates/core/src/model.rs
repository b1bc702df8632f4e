//! The hierarchical logistic regression: coefficient layout, design index,
//! log posterior and its gradient.
//!
//! Unconstrained parameter layout, used everywhere a flat vector appears:
//! `[fixed terms | batch coefficients | log sigma per batch]`. The fixed terms
//! are the intercept followed, when enabled, by the slope on the centered
//! state predictor (previous Republican share minus 0.5).

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CellKey, CellTable, Factor, SurveyDataset};
use crate::error::{Error, Result};

/// Center of the previous-election share predictor.
pub const PREDICTOR_CENTER: f64 = 0.5;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `log(1 + e^x)` and `1 / (1 + e^-x)` sharing one exponential.
#[inline]
pub(crate) fn log1p_exp_and_inv_logit(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let l = e.ln_1p();
    if x > 0.0 {
        (x + l, 1.0 / (1.0 + e))
    } else {
        (l, e / (1.0 + e))
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// A group of coefficients sharing one zero-mean normal prior.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub name: String,
    /// Indexed factors; level index is row-major in this order.
    pub factors: Vec<Factor>,
}

impl BatchSpec {
    pub fn new(factors: &[Factor]) -> Self {
        let name = factors
            .iter()
            .map(|f| f.name())
            .collect::<Vec<_>>()
            .join(":");
        BatchSpec {
            name,
            factors: factors.to_vec(),
        }
    }

    pub fn levels(&self) -> usize {
        self.factors.iter().map(|f| f.cardinality()).product()
    }

    /// Zero-based level of `key` within this batch. For two factors (a, b)
    /// this is `(a - 1) * |b| + (b - 1)`.
    pub fn level_of(&self, key: &CellKey) -> usize {
        self.factors.iter().fold(0, |acc, &f| {
            acc * f.cardinality() + (key.level(f) as usize - 1)
        })
    }

    /// Category codes for a zero-based level, one per factor.
    pub fn codes_of(&self, mut level: usize) -> Vec<u8> {
        let mut codes = vec![0u8; self.factors.len()];
        for (slot, f) in codes.iter_mut().zip(&self.factors).rev() {
            *slot = (level % f.cardinality()) as u8 + 1;
            level /= f.cardinality();
        }
        codes
    }
}

fn default_true() -> bool {
    true
}

fn default_hyper() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub batches: Vec<BatchSpec>,
    /// Include the slope on the centered previous-election share.
    #[serde(default = "default_true")]
    pub state_predictor: bool,
    /// Scale of the half-normal hyperprior on every batch sd.
    #[serde(default = "default_hyper")]
    pub prior_scale_hyper: f64,
}

impl Default for ModelSpec {
    /// Main effects plus income×state, ethnicity×income and ethnicity×state.
    fn default() -> Self {
        use Factor::*;
        ModelSpec {
            batches: vec![
                BatchSpec::new(&[Income]),
                BatchSpec::new(&[Age]),
                BatchSpec::new(&[Ethnicity]),
                BatchSpec::new(&[State]),
                BatchSpec::new(&[Income, State]),
                BatchSpec::new(&[Ethnicity, Income]),
                BatchSpec::new(&[Ethnicity, State]),
            ],
            state_predictor: true,
            prior_scale_hyper: 1.0,
        }
    }
}

impl ModelSpec {
    pub fn main_effects() -> Self {
        let mut spec = ModelSpec::default();
        spec.batches.truncate(4);
        spec
    }

    /// Intercept only: no batches and no state predictor.
    pub fn intercept_only() -> Self {
        ModelSpec {
            batches: Vec::new(),
            state_predictor: false,
            prior_scale_hyper: 1.0,
        }
    }

    pub fn with_batches(batches: &[&[Factor]]) -> Self {
        ModelSpec {
            batches: batches.iter().map(|f| BatchSpec::new(f)).collect(),
            ..ModelSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_scale_hyper.is_finite() && self.prior_scale_hyper > 0.0) {
            return Err(Error::Spec(format!(
                "prior_scale_hyper must be positive, got {}",
                self.prior_scale_hyper
            )));
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.batches {
            if b.factors.is_empty() {
                return Err(Error::Spec(format!("batch \"{}\" indexes no factor", b.name)));
            }
            let distinct: std::collections::BTreeSet<_> = b.factors.iter().collect();
            if distinct.len() != b.factors.len() {
                return Err(Error::Spec(format!("batch \"{}\" repeats a factor", b.name)));
            }
            if !names.insert(b.name.as_str()) {
                return Err(Error::Spec(format!("duplicate batch name \"{}\"", b.name)));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let spec: ModelSpec = serde_json::from_slice(&bytes)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn batch_index(&self, name: &str) -> Option<usize> {
        self.batches.iter().position(|b| b.name == name)
    }
}

/// Offsets of each block inside the flat unconstrained vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_fixed: usize,
    pub batch_offsets: Vec<usize>,
    pub batch_levels: Vec<usize>,
    pub n_beta: usize,
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let mut offsets = Vec::with_capacity(spec.batches.len());
        let mut levels = Vec::with_capacity(spec.batches.len());
        let mut off = 0;
        for b in &spec.batches {
            offsets.push(off);
            levels.push(b.levels());
            off += b.levels();
        }
        Layout {
            n_fixed: if spec.state_predictor { 2 } else { 1 },
            batch_offsets: offsets,
            batch_levels: levels,
            n_beta: off,
        }
    }

    pub fn n_batches(&self) -> usize {
        self.batch_levels.len()
    }

    pub fn dim(&self) -> usize {
        self.n_fixed + self.n_beta + self.n_batches()
    }

    pub fn beta_start(&self) -> usize {
        self.n_fixed
    }

    pub fn sigma_start(&self) -> usize {
        self.n_fixed + self.n_beta
    }

    /// Batch owning each coefficient.
    pub fn batch_of_beta(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_beta);
        for (b, &k) in self.batch_levels.iter().enumerate() {
            out.extend(std::iter::repeat_n(b, k));
        }
        out
    }

    /// Column names in layout order; sigma columns are named `sigma[batch]`.
    pub fn param_names(&self, spec: &ModelSpec) -> Vec<String> {
        let mut names = vec!["intercept".to_string()];
        if self.n_fixed == 2 {
            names.push("state_predictor".into());
        }
        for b in &spec.batches {
            for level in 0..b.levels() {
                let codes: Vec<String> = b.codes_of(level).iter().map(u8::to_string).collect();
                names.push(format!("{}[{}]", b.name, codes.join(",")));
            }
        }
        for b in &spec.batches {
            names.push(format!("sigma[{}]", b.name));
        }
        names
    }
}

/// Model parameters on the constrained scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub fixed: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let l = spec.layout();
        ParameterVector {
            fixed: vec![0.0; l.n_fixed],
            beta: vec![0.0; l.n_beta],
            sigma: vec![1.0; l.n_batches()],
        }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let l = spec.layout();
        if self.fixed.len() != l.n_fixed
            || self.beta.len() != l.n_beta
            || self.sigma.len() != l.n_batches()
        {
            return Err(Error::Contract(format!(
                "parameter lengths ({}, {}, {}) do not match spec layout ({}, {}, {})",
                self.fixed.len(),
                self.beta.len(),
                self.sigma.len(),
                l.n_fixed,
                l.n_beta,
                l.n_batches()
            )));
        }
        Ok(())
    }

    /// Flat vector `[fixed | beta | log sigma]`.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.fixed.len() + self.beta.len() + self.sigma.len());
        v.extend_from_slice(&self.fixed);
        v.extend_from_slice(&self.beta);
        v.extend(self.sigma.iter().map(|s| s.ln()));
        v
    }

    pub fn from_unconstrained(layout: &Layout, theta: &[f64]) -> Self {
        let (fixed, rest) = theta.split_at(layout.n_fixed);
        let (beta, log_sigma) = rest.split_at(layout.n_beta);
        ParameterVector {
            fixed: fixed.to_vec(),
            beta: beta.to_vec(),
            sigma: log_sigma.iter().map(|x| x.exp()).collect(),
        }
    }

    /// Flat vector `[fixed | beta | sigma]`, the column layout of draw matrices.
    pub fn to_constrained(&self) -> Vec<f64> {
        let mut v = self.fixed.clone();
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.sigma);
        v
    }

    pub fn from_constrained(layout: &Layout, row: &[f64]) -> Self {
        let (fixed, rest) = row.split_at(layout.n_fixed);
        let (beta, sigma) = rest.split_at(layout.n_beta);
        ParameterVector {
            fixed: fixed.to_vec(),
            beta: beta.to_vec(),
            sigma: sigma.to_vec(),
        }
    }
}

/// Precomputed coefficient lookups for a set of rows (respondents or cells).
#[derive(Clone, Debug, PartialEq)]
pub struct DesignIndex {
    n_batches: usize,
    /// Row-major `rows × batches`; each entry is a position in `beta`.
    positions: Vec<u32>,
    /// Centered state predictor per row.
    predictor: Vec<f64>,
    keys: Vec<CellKey>,
    n_fixed: usize,
}

impl DesignIndex {
    pub fn from_keys(keys: &[CellKey], state_predictor: &[f64], spec: &ModelSpec) -> Result<Self> {
        let layout = spec.layout();
        let mut positions = Vec::with_capacity(keys.len() * spec.batches.len());
        let mut predictor = Vec::with_capacity(keys.len());
        for (row, key) in keys.iter().enumerate() {
            if let Some((f, v)) = key.out_of_range() {
                return Err(Error::Index(format!(
                    "row {}: {f} code {v} outside 1..={}",
                    row + 1,
                    f.cardinality()
                )));
            }
            for (b, batch) in spec.batches.iter().enumerate() {
                positions.push((layout.batch_offsets[b] + batch.level_of(key)) as u32);
            }
            let share = state_predictor.get(key.state as usize - 1).ok_or_else(|| {
                Error::Index(format!("row {}: no state predictor for state {}", row + 1, key.state))
            })?;
            predictor.push(share - PREDICTOR_CENTER);
        }
        Ok(DesignIndex {
            n_batches: spec.batches.len(),
            positions,
            predictor,
            keys: keys.to_vec(),
            n_fixed: layout.n_fixed,
        })
    }

    /// One row per poststratification cell, canonical order.
    pub fn for_cells(table: &CellTable, spec: &ModelSpec) -> Result<Self> {
        let keys: Vec<CellKey> = table.cells().iter().map(|c| c.key).collect();
        Self::from_keys(&keys, table.state_predictors(), spec)
    }

    /// One row per respondent.
    pub fn for_survey(data: &SurveyDataset, table: &CellTable, spec: &ModelSpec) -> Result<Self> {
        let keys: Vec<CellKey> = data.responses().iter().map(|r| r.key()).collect();
        Self::from_keys(&keys, table.state_predictors(), spec)
    }

    pub fn rows(&self) -> usize {
        self.keys.len()
    }

    pub fn n_batches(&self) -> usize {
        self.n_batches
    }

    pub fn keys(&self) -> &[CellKey] {
        &self.keys
    }

    pub fn predictor(&self, row: usize) -> f64 {
        self.predictor[row]
    }

    /// Positions in `beta` touched by `row`, one per batch.
    #[inline]
    pub fn positions(&self, row: usize) -> &[u32] {
        &self.positions[row * self.n_batches..(row + 1) * self.n_batches]
    }

    /// Fixed-term covariates for a row: `[1]` or `[1, centered predictor]`.
    #[inline]
    pub fn fixed_covariate(&self, row: usize, j: usize) -> f64 {
        if j == 0 {
            1.0
        } else {
            self.predictor[row]
        }
    }

    pub fn n_fixed(&self) -> usize {
        self.n_fixed
    }

    #[inline]
    pub fn eta(&self, row: usize, fixed: &[f64], beta: &[f64]) -> f64 {
        let mut eta = fixed[0];
        if self.n_fixed == 2 {
            eta += fixed[1] * self.predictor[row];
        }
        for &p in self.positions(row) {
            eta += beta[p as usize];
        }
        eta
    }

    pub fn linear_predictor(&self, fixed: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..self.rows()).map(|r| self.eta(r, fixed, beta)).collect()
    }
}

/// Binomial outcomes per design row; Bernoulli data has all trials equal to 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcomes {
    pub successes: Vec<f64>,
    pub trials: Vec<f64>,
}

impl Outcomes {
    pub fn binary(votes: &[u8]) -> Self {
        Outcomes {
            successes: votes.iter().map(|&v| v as f64).collect(),
            trials: vec![1.0; votes.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn total_trials(&self) -> f64 {
        self.trials.iter().sum()
    }
}

/// Design index and outcomes ready for fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct FitData {
    pub index: DesignIndex,
    pub outcomes: Outcomes,
}

impl FitData {
    pub fn new(index: DesignIndex, outcomes: Outcomes) -> Result<Self> {
        if index.rows() != outcomes.successes.len() || index.rows() != outcomes.trials.len() {
            return Err(Error::Contract(format!(
                "index has {} rows but outcomes have {} successes and {} trials",
                index.rows(),
                outcomes.successes.len(),
                outcomes.trials.len()
            )));
        }
        Ok(FitData { index, outcomes })
    }

    /// Collapses respondents to per-cell binomial counts. The likelihood is
    /// identical to the per-respondent Bernoulli likelihood since every
    /// respondent in a cell shares the linear predictor.
    pub fn aggregate(data: &SurveyDataset, table: &CellTable, spec: &ModelSpec) -> Result<Self> {
        let counts = data.cell_counts();
        let keys: Vec<CellKey> = counts.iter().map(|c| c.0).collect();
        let index = DesignIndex::from_keys(&keys, table.state_predictors(), spec)?;
        let outcomes = Outcomes {
            successes: counts.iter().map(|c| c.1 as f64).collect(),
            trials: counts.iter().map(|c| c.2 as f64).collect(),
        };
        FitData::new(index, outcomes)
    }

    /// Per-respondent rows, mainly for cross-checking [`FitData::aggregate`].
    pub fn per_respondent(data: &SurveyDataset, table: &CellTable, spec: &ModelSpec) -> Result<Self> {
        let index = DesignIndex::for_survey(data, table, spec)?;
        let votes: Vec<u8> = data.responses().iter().map(|r| r.vote).collect();
        FitData::new(index, Outcomes::binary(&votes))
    }

    /// Data with no rows: the posterior is the prior.
    pub fn empty(spec: &ModelSpec) -> Self {
        FitData {
            index: DesignIndex::from_keys(&[], &[0.5; crate::states::N_STATES], spec)
                .expect("empty index"),
            outcomes: Outcomes::default(),
        }
    }
}

/// Bernoulli/binomial log likelihood; writes `y - n p` per row into `resid`.
fn log_lik_resid(
    index: &DesignIndex,
    outcomes: &Outcomes,
    fixed: &[f64],
    beta: &[f64],
    resid: &mut Vec<f64>,
) -> f64 {
    resid.clear();
    let mut ll = 0.0;
    for r in 0..index.rows() {
        let eta = index.eta(r, fixed, beta);
        let y = outcomes.successes[r];
        let n = outcomes.trials[r];
        let (l1p, p) = log1p_exp_and_inv_logit(eta);
        ll += y * eta - n * l1p;
        resid.push(y - n * p);
    }
    ll
}

fn accumulate_grad(index: &DesignIndex, resid: &[f64], g_fixed: &mut [f64], g_beta: &mut [f64]) {
    for (r, &res) in resid.iter().enumerate() {
        g_fixed[0] += res;
        if g_fixed.len() == 2 {
            g_fixed[1] += res * index.predictor(r);
        }
        for &p in index.positions(r) {
            g_beta[p as usize] += res;
        }
    }
}

#[inline]
fn half_normal_logpdf(sigma: f64, scale: f64) -> f64 {
    std::f64::consts::LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * (sigma / scale).powi(2)
}

fn check_dims(layout: &Layout, theta_len: usize, data: &FitData) -> Result<()> {
    if theta_len != layout.dim() {
        return Err(Error::Contract(format!(
            "parameter vector has length {theta_len}, layout needs {}",
            layout.dim()
        )));
    }
    if data.index.n_batches() != layout.n_batches() || data.index.n_fixed() != layout.n_fixed {
        return Err(Error::Contract("design index built for a different spec".into()));
    }
    Ok(())
}

/// A differentiable log density over an unconstrained vector.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// Returns the log density and writes its gradient into `grad`.
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;
}

/// The posterior in the centered parameterization `[fixed | beta | log sigma]`.
///
/// Includes every normalizing constant of the priors so that, without data,
/// the value is the exact log prior density on this scale. The fixed terms
/// have a flat prior.
pub struct Centered<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a FitData,
    layout: Layout,
    batch_of: Vec<usize>,
}

impl<'a> Centered<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a FitData) -> Result<Self> {
        let layout = spec.layout();
        check_dims(&layout, layout.dim(), data)?;
        Ok(Centered {
            spec,
            data,
            batch_of: layout.batch_of_beta(),
            layout,
        })
    }
}

impl LogDensity for Centered<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (fixed, rest) = theta.split_at(l.n_fixed);
        let (beta, log_sigma) = rest.split_at(l.n_beta);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut resid = Vec::with_capacity(self.data.index.rows());
        let mut lp = log_lik_resid(&self.data.index, &self.data.outcomes, fixed, beta, &mut resid);
        {
            let (g_fixed, g_rest) = grad.split_at_mut(l.n_fixed);
            let (g_beta, _) = g_rest.split_at_mut(l.n_beta);
            accumulate_grad(&self.data.index, &resid, g_fixed, g_beta);
        }
        let s0 = l.sigma_start();
        for (k, &b) in self.batch_of.iter().enumerate() {
            let ls = log_sigma[b];
            let inv_var = (-2.0 * ls).exp();
            let bk = beta[k];
            lp += -0.5 * LN_2PI - ls - 0.5 * bk * bk * inv_var;
            grad[l.n_fixed + k] -= bk * inv_var;
            grad[s0 + b] += -1.0 + bk * bk * inv_var;
        }
        let scale = self.spec.prior_scale_hyper;
        for (b, &ls) in log_sigma.iter().enumerate() {
            let sigma = ls.exp();
            lp += half_normal_logpdf(sigma, scale) + ls;
            grad[s0 + b] += -(sigma / scale).powi(2) + 1.0;
        }
        lp
    }
}

/// The same posterior in the non-centered parameterization
/// `[fixed | z | log sigma]` with `beta = sigma * z` and `z ~ N(0, 1)`.
///
/// This is the density the sampler and the MAP optimizer work on; unlike the
/// centered joint density it stays bounded as a batch sd goes to zero.
pub struct NonCentered<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a FitData,
    layout: Layout,
    batch_of: Vec<usize>,
}

impl<'a> NonCentered<'a> {
    pub fn new(spec: &'a ModelSpec, data: &'a FitData) -> Result<Self> {
        let layout = spec.layout();
        check_dims(&layout, layout.dim(), data)?;
        Ok(NonCentered {
            spec,
            data,
            batch_of: layout.batch_of_beta(),
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Maps `[fixed | z | log sigma]` to constrained parameters.
    pub fn constrain(&self, theta: &[f64]) -> ParameterVector {
        let l = &self.layout;
        let (fixed, rest) = theta.split_at(l.n_fixed);
        let (z, log_sigma) = rest.split_at(l.n_beta);
        let sigma: Vec<f64> = log_sigma.iter().map(|x| x.exp()).collect();
        let beta = z
            .iter()
            .zip(&self.batch_of)
            .map(|(zk, &b)| sigma[b] * zk)
            .collect();
        ParameterVector {
            fixed: fixed.to_vec(),
            beta,
            sigma,
        }
    }

    /// Inverse of [`NonCentered::constrain`]; requires every sigma > 0.
    pub fn unconstrain(&self, params: &ParameterVector) -> Vec<f64> {
        let mut v = params.fixed.clone();
        v.extend(
            params
                .beta
                .iter()
                .zip(&self.batch_of)
                .map(|(b, &j)| b / params.sigma[j]),
        );
        v.extend(params.sigma.iter().map(|s| s.ln()));
        v
    }
}

impl LogDensity for NonCentered<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        let (fixed, rest) = theta.split_at(l.n_fixed);
        let (z, log_sigma) = rest.split_at(l.n_beta);
        let sigma: Vec<f64> = log_sigma.iter().map(|x| x.exp()).collect();
        let beta: Vec<f64> = z
            .iter()
            .zip(&self.batch_of)
            .map(|(zk, &b)| sigma[b] * zk)
            .collect();

        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut resid = Vec::with_capacity(self.data.index.rows());
        let mut lp = log_lik_resid(&self.data.index, &self.data.outcomes, fixed, &beta, &mut resid);
        let mut g_beta = vec![0.0; l.n_beta];
        accumulate_grad(&self.data.index, &resid, &mut grad[..l.n_fixed], &mut g_beta);

        let s0 = l.sigma_start();
        for (k, &b) in self.batch_of.iter().enumerate() {
            let zk = z[k];
            lp += -0.5 * LN_2PI - 0.5 * zk * zk;
            grad[l.n_fixed + k] = sigma[b] * g_beta[k] - zk;
            grad[s0 + b] += g_beta[k] * beta[k];
        }
        let scale = self.spec.prior_scale_hyper;
        for (b, &ls) in log_sigma.iter().enumerate() {
            lp += half_normal_logpdf(sigma[b], scale) + ls;
            grad[s0 + b] += -(sigma[b] / scale).powi(2) + 1.0;
        }
        lp
    }
}

/// Log posterior at `params` (centered, log-sigma scale, Jacobian included).
pub fn log_posterior(params: &ParameterVector, data: &FitData, spec: &ModelSpec) -> Result<f64> {
    params.check(spec)?;
    let target = Centered::new(spec, data)?;
    let mut g = vec![0.0; target.dim()];
    Ok(target.logp_grad(&params.to_unconstrained(), &mut g))
}

/// Gradient of [`log_posterior`] in the `[fixed | beta | log sigma]` layout.
pub fn grad_log_posterior(params: &ParameterVector, data: &FitData, spec: &ModelSpec) -> Result<Vec<f64>> {
    params.check(spec)?;
    let target = Centered::new(spec, data)?;
    let mut g = vec![0.0; target.dim()];
    target.logp_grad(&params.to_unconstrained(), &mut g);
    Ok(g)
}

/// Closed-form log prior at `beta = 0` with every sigma at `sigma`, on the
/// log-sigma scale.
pub fn prior_at_zero(spec: &ModelSpec, sigma: f64) -> f64 {
    let l = spec.layout();
    let s = spec.prior_scale_hyper;
    let k = l.n_beta as f64;
    let b = l.n_batches() as f64;
    k * (-0.5 * (2.0 * PI).ln() - sigma.ln())
        + b * ((2.0f64).ln() - 0.5 * (2.0 * PI).ln() - s.ln() - 0.5 * (sigma / s).powi(2) + sigma.ln())
}
