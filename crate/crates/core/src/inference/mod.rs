//! Fitting the model: posterior mode, Laplace marginal maximum likelihood,
//! and full Bayes by Hamiltonian Monte Carlo.

pub mod diagnostics;
pub mod mmle;
pub mod nuts;
pub mod optim;

use std::cell::RefCell;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FitData, ModelSpec, NonCentered, ParameterVector};
pub use diagnostics::ParamSummary;

/// Convergence threshold on the rank-normalized split R-hat.
pub const RHAT_THRESHOLD: f64 = 1.05;
/// Divergence rate above which the sampler reruns with a higher target.
pub const DIVERGENCE_RATE_WARN: f64 = 0.01;
pub const RETRY_TARGET_ACCEPT: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FitKind {
    Map,
    Mmle,
    FullBayes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            samples: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 20080101,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup == 0 || self.samples == 0 || self.max_tree_depth == 0 {
            return Err(Error::Config("sampler counts must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!(
                "target acceptance {} outside (0, 1)",
                self.target_accept
            )));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: SamplerConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sampler config serializes")
    }
}

/// Posterior draws on the constrained scale `[fixed | beta | sigma]`, rows
/// grouped by chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub columns: Vec<String>,
    pub chains: usize,
    pub per_chain: usize,
    /// Row-major, `chains * per_chain` rows.
    pub values: Vec<f64>,
}

impl Draws {
    pub fn rows(&self) -> usize {
        self.chains * self.per_chain
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.columns.len();
        &self.values[i * w..(i + 1) * w]
    }

    /// One column split by chain.
    pub fn column_by_chain(&self, col: usize) -> Vec<Vec<f64>> {
        let w = self.columns.len();
        (0..self.chains)
            .map(|c| {
                (0..self.per_chain)
                    .map(|d| self.values[(c * self.per_chain + d) * w + col])
                    .collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["chain".to_string(), "draw".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for c in 0..self.chains {
            for d in 0..self.per_chain {
                let mut rec = vec![(c + 1).to_string(), (d + 1).to_string()];
                rec.extend(self.row(c * self.per_chain + d).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(Path::new("<draws>"), e))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        if header.get(0) != Some("chain") || header.get(1) != Some("draw") {
            return Err(Error::Schema("chain".into()));
        }
        let columns: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
        let mut values = Vec::new();
        let mut chain_sizes: Vec<usize> = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let chain: usize = rec[0].parse().map_err(|_| Error::Row {
                row: i + 1,
                message: format!("bad chain \"{}\"", &rec[0]),
            })?;
            if chain == 0 || chain > chain_sizes.len() + 1 {
                return Err(Error::Row {
                    row: i + 1,
                    message: format!("chain {chain} out of order"),
                });
            }
            if chain > chain_sizes.len() {
                chain_sizes.push(0);
            }
            chain_sizes[chain - 1] += 1;
            for (j, field) in rec.iter().skip(2).enumerate() {
                values.push(field.parse::<f64>().map_err(|_| Error::Row {
                    row: i + 1,
                    message: format!("bad value \"{field}\" in column {}", columns[j]),
                })?);
            }
        }
        let per_chain = chain_sizes.first().copied().unwrap_or(0);
        if chain_sizes.iter().any(|&n| n != per_chain) {
            return Err(Error::Dataset("chains have unequal draw counts".into()));
        }
        Ok(Draws {
            columns,
            chains: chain_sizes.len(),
            per_chain,
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStats {
    pub step_size: f64,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept_stat: f64,
    pub mean_tree_depth: f64,
    pub max_depth_hits: usize,
    pub leapfrogs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitResult {
    pub kind: FitKind,
    pub spec: ModelSpec,
    pub param_names: Vec<String>,
    /// Mode or marginal-likelihood estimate; absent for full Bayes.
    pub point: Option<ParameterVector>,
    #[serde(skip)]
    pub draws: Option<Draws>,
    /// Per-parameter summaries; empty for point fits.
    pub diagnostics: Vec<ParamSummary>,
    pub divergences: usize,
    pub chain_stats: Vec<ChainStats>,
    /// Optimizer gradient norm at the point and the tolerance it was held to.
    pub grad_norm: Option<f64>,
    pub tolerance: Option<f64>,
    pub iterations: Option<usize>,
    /// Value of the optimized objective (log posterior or log marginal likelihood).
    pub objective: Option<f64>,
    pub sampler: Option<SamplerConfig>,
    pub seed: u64,
    pub chains: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl FitResult {
    fn point_fit(kind: FitKind, spec: &ModelSpec, point: ParameterVector, seed: u64) -> Self {
        FitResult {
            kind,
            spec: spec.clone(),
            param_names: spec.layout().param_names(spec),
            point: Some(point),
            draws: None,
            diagnostics: Vec::new(),
            divergences: 0,
            chain_stats: Vec::new(),
            grad_norm: None,
            tolerance: None,
            iterations: None,
            objective: None,
            sampler: None,
            seed,
            chains: 0,
            converged: true,
            warnings: Vec::new(),
            elapsed: Duration::ZERO,
        }
    }

    /// Parameter vectors to predict from: every draw, or the single point.
    pub fn parameter_sets(&self) -> Vec<ParameterVector> {
        let layout = self.spec.layout();
        match (&self.draws, &self.point) {
            (Some(d), _) => (0..d.rows())
                .map(|i| ParameterVector::from_constrained(&layout, d.row(i)))
                .collect(),
            (None, Some(p)) => vec![p.clone()],
            (None, None) => Vec::new(),
        }
    }

    /// Writes `fit.json`, `diagnostics.json` and, for full Bayes, `draws.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let fit_path = dir.join("fit.json");
        std::fs::write(&fit_path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&fit_path, e))?;
        let diag_path = dir.join("diagnostics.json");
        let report = diagnostics_summary(self);
        std::fs::write(&diag_path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&diag_path, e))?;
        if let Some(d) = &self.draws {
            let path = dir.join("draws.csv");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            d.write_csv(std::io::BufWriter::new(file))?;
        }
        Ok(())
    }

    /// Reads a fit written by [`FitResult::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let fit_path = dir.join("fit.json");
        let text = std::fs::read_to_string(&fit_path).map_err(|e| Error::io(&fit_path, e))?;
        let mut fit: FitResult = serde_json::from_str(&text)?;
        if fit.kind == FitKind::FullBayes {
            let path = dir.join("draws.csv");
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let draws = Draws::read_csv(std::io::BufReader::new(file))?;
            if draws.columns != fit.param_names {
                return Err(Error::Contract("draws.csv columns do not match fit.json".into()));
            }
            fit.draws = Some(draws);
        }
        Ok(fit)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mode of the Laplace-approximate marginal posterior of `log sigma`
/// (half-normal hyperprior plus the log-scale Jacobian), with the fixed terms
/// and batch coefficients at their conditional mode given that sigma.
/// The centered joint density has no mode once a batch has two or more
/// levels. At the returned point the fixed and beta components of
/// [`grad_log_posterior`] vanish.
///
/// [`grad_log_posterior`]: crate::model::grad_log_posterior
pub fn fit_map(data: &FitData, spec: &ModelSpec, tolerance: f64, max_iter: usize, seed: u64) -> Result<FitResult> {
    spec.validate()?;
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let start = Instant::now();
    let lap = mmle::Laplace::new(spec, data)?;
    let nb = lap.layout().n_batches();
    let s2 = spec.prior_scale_hyper.powi(2);
    let mut rng = nuts::chain_rng(seed, 0);
    let rho0: Vec<f64> = (0..nb).map(|_| rng.random_range(-0.1..0.1)).collect();

    let warm = RefCell::new(lap.initial_mode());
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let hyper = |rho: &[f64]| -> f64 { rho.iter().map(|r| r - (2.0 * r).exp() / (2.0 * s2)).sum() };
    let objective = |rho: &[f64], g: &mut [f64]| -> f64 {
        let sigma: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
        let start = warm.borrow().clone();
        match lap.evaluate(&sigma, &start) {
            Ok(e) => {
                for b in 0..nb {
                    g[b] = -(sigma[b] * e.grad[b] - sigma[b] * sigma[b] / s2 + 1.0);
                }
                *warm.borrow_mut() = e.mode;
                -(e.value + hyper(rho))
            }
            Err(err) => {
                *failure.borrow_mut() = Some(err);
                g.iter_mut().for_each(|v| *v = f64::NAN);
                f64::NAN
            }
        }
    };
    let cfg = optim::LbfgsConfig {
        tolerance,
        max_iter,
        ..Default::default()
    };
    let (rho, iterations, converged, grad_norm) = if nb == 0 {
        (Vec::new(), 0, true, 0.0)
    } else {
        match optim::minimize(objective, &rho0, &cfg) {
            Ok(m) => (m.x, m.iterations, m.converged, m.grad_norm),
            Err(e) => return Err(failure.into_inner().unwrap_or(e)),
        }
    };
    let sigma: Vec<f64> = rho.iter().map(|r| r.exp()).collect();
    let best = lap.evaluate(&sigma, &warm.borrow())?;

    let mut fit = FitResult::point_fit(FitKind::Map, spec, lap.parameters(&sigma, &best.mode), seed);
    fit.grad_norm = Some(grad_norm);
    fit.tolerance = Some(tolerance);
    fit.iterations = Some(iterations);
    fit.objective = Some(best.value + hyper(&rho));
    fit.converged = converged;
    if !converged {
        fit.warnings.push(format!(
            "stopped after {iterations} iterations with gradient norm {grad_norm:.3e} > {tolerance:.1e}"
        ));
    }
    fit.elapsed = start.elapsed();
    Ok(fit)
}

/// Laplace marginal maximum likelihood over the batch standard deviations,
/// with a boundary probe that reports a batch sd as exactly zero when the
/// pinned objective is at least as high as the best interior value.
pub fn fit_mmle(data: &FitData, spec: &ModelSpec, tolerance: f64, seed: u64) -> Result<FitResult> {
    spec.validate()?;
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let start = Instant::now();
    let lap = mmle::Laplace::new(spec, data)?;
    let nb = lap.layout().n_batches();
    let mut rng = nuts::chain_rng(seed, 0);
    let s0: Vec<f64> = (0..nb).map(|_| 1.0 + rng.random_range(-0.1..0.1)).collect();

    let warm = RefCell::new(lap.initial_mode());
    let failure: RefCell<Option<Error>> = RefCell::new(None);
    let objective = |s: &[f64], g: &mut [f64]| -> f64 {
        let start = warm.borrow().clone();
        match lap.evaluate(s, &start) {
            Ok(e) => {
                g.iter_mut().zip(&e.grad).for_each(|(gi, v)| *gi = -v);
                *warm.borrow_mut() = e.mode;
                -e.value
            }
            Err(err) => {
                *failure.borrow_mut() = Some(err);
                g.iter_mut().for_each(|v| *v = f64::NAN);
                f64::NAN
            }
        }
    };

    let cfg = optim::LbfgsConfig {
        tolerance,
        max_iter: 1000,
        ..Default::default()
    };
    let (mut sigma, mut iterations, mut converged) = if nb == 0 {
        (Vec::new(), 0, true)
    } else {
        match optim::minimize(objective, &s0, &cfg) {
            Ok(m) => (m.x, m.iterations, m.converged),
            Err(e) => return Err(failure.into_inner().unwrap_or(e)),
        }
    };
    sigma.iter_mut().for_each(|s| *s = s.abs());

    let mut best = lap.evaluate(&sigma, &warm.borrow())?;
    let slack = 1e-9 * best.value.abs().max(1.0);
    let mut zeroed = Vec::new();
    for b in 0..nb {
        if sigma[b] == 0.0 {
            continue;
        }
        let mut trial = sigma.clone();
        trial[b] = 0.0;
        let e = lap.evaluate(&trial, &best.mode)?;
        if e.value >= best.value - slack {
            sigma = trial;
            best = e;
            zeroed.push(b);
        }
    }
    // a pinned batch changes the others little; polish the remaining ones
    if !zeroed.is_empty() && zeroed.len() < nb {
        let free: Vec<usize> = (0..nb).filter(|b| !zeroed.contains(b)).collect();
        let warm = RefCell::new(best.mode.clone());
        let full = sigma.clone();
        let sub = |x: &[f64], g: &mut [f64]| -> f64 {
            let mut s = full.clone();
            for (i, &b) in free.iter().enumerate() {
                s[b] = x[i];
            }
            let start = warm.borrow().clone();
            match lap.evaluate(&s, &start) {
                Ok(e) => {
                    for (i, &b) in free.iter().enumerate() {
                        g[i] = -e.grad[b];
                    }
                    *warm.borrow_mut() = e.mode;
                    -e.value
                }
                Err(_) => {
                    g.iter_mut().for_each(|v| *v = f64::NAN);
                    f64::NAN
                }
            }
        };
        let x0: Vec<f64> = free.iter().map(|&b| sigma[b]).collect();
        let m = optim::minimize(sub, &x0, &cfg)?;
        for (i, &b) in free.iter().enumerate() {
            sigma[b] = m.x[i].abs();
        }
        iterations += m.iterations;
        converged = m.converged;
        best = lap.evaluate(&sigma, &warm.borrow())?;
    }

    let grad_norm = norm(&best.grad);
    let mut fit = FitResult::point_fit(FitKind::Mmle, spec, lap.parameters(&sigma, &best.mode), seed);
    fit.grad_norm = Some(grad_norm);
    fit.tolerance = Some(tolerance);
    fit.iterations = Some(iterations);
    fit.objective = Some(best.value);
    fit.converged = converged && grad_norm <= tolerance;
    if !fit.converged {
        fit.warnings.push(format!(
            "marginal likelihood search stopped with gradient norm {grad_norm:.3e} > {tolerance:.1e}"
        ));
    }
    for b in zeroed {
        fit.warnings.push(format!("sigma[{}] estimated at the zero boundary", spec.batches[b].name));
    }
    fit.elapsed = start.elapsed();
    Ok(fit)
}

fn run_chains(target: &NonCentered<'_>, config: &SamplerConfig, target_accept: f64) -> Result<Vec<nuts::ChainOutput>> {
    let settings: Vec<nuts::ChainSettings> = (0..config.chains)
        .map(|chain| nuts::ChainSettings {
            warmup: config.warmup,
            draws: config.samples,
            target_accept,
            max_depth: config.max_tree_depth,
            seed: config.seed,
            chain,
            init_radius: 2.0,
        })
        .collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = settings
            .iter()
            .map(|s| scope.spawn(move || nuts::run_chain(target, s)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().map_err(|_| Error::Sampler("chain thread panicked".into()))?)
            .collect()
    })
}

/// Full Bayes by multi-chain NUTS on the non-centered posterior.
///
/// The result is flagged not converged when any parameter has R-hat above
/// [`RHAT_THRESHOLD`]. A divergence rate above 1% triggers one rerun at
/// target acceptance 0.95; the warning stays attached either way.
pub fn fit_hmc(data: &FitData, spec: &ModelSpec, config: &SamplerConfig) -> Result<FitResult> {
    spec.validate()?;
    config.validate()?;
    if config.chains < 2 {
        return Err(Error::Config("full Bayes needs at least 2 chains".into()));
    }
    let start = Instant::now();
    let target = NonCentered::new(spec, data)?;
    let total = (config.chains * config.samples) as f64;
    let mut warnings = Vec::new();
    let mut target_accept = config.target_accept;
    let mut outputs = run_chains(&target, config, target_accept)?;
    let divergences: usize = outputs.iter().map(|o| o.divergences).sum();
    if divergences as f64 / total > DIVERGENCE_RATE_WARN {
        warnings.push(format!(
            "{divergences} divergent transitions ({:.2}%) at target acceptance {target_accept}",
            100.0 * divergences as f64 / total
        ));
        if target_accept < RETRY_TARGET_ACCEPT {
            target_accept = RETRY_TARGET_ACCEPT;
            outputs = run_chains(&target, config, target_accept)?;
            let again: usize = outputs.iter().map(|o| o.divergences).sum();
            warnings.push(format!(
                "reran at target acceptance {target_accept}: {again} divergent transitions ({:.2}%)",
                100.0 * again as f64 / total
            ));
        }
    }
    let divergences: usize = outputs.iter().map(|o| o.divergences).sum();

    let layout = spec.layout();
    let names = layout.param_names(spec);
    let width = names.len();
    let mut values = Vec::with_capacity(config.chains * config.samples * width);
    for o in &outputs {
        for q in &o.draws {
            values.extend(target.constrain(q).to_constrained());
        }
    }
    let draws = Draws {
        columns: names.clone(),
        chains: config.chains,
        per_chain: config.samples,
        values,
    };
    let diagnostics: Vec<ParamSummary> = (0..width)
        .map(|j| {
            let cols = draws.column_by_chain(j);
            let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            ParamSummary::from_chains(&names[j], &refs)
        })
        .collect();
    let bad: Vec<&ParamSummary> = diagnostics
        .iter()
        .filter(|d| !(d.rhat <= RHAT_THRESHOLD))
        .collect();
    if !bad.is_empty() {
        let worst = bad
            .iter()
            .max_by(|a, b| a.rhat.total_cmp(&b.rhat))
            .expect("non-empty");
        warnings.push(format!(
            "{} parameters with R-hat > {RHAT_THRESHOLD} (worst {} at {:.3})",
            bad.len(),
            worst.name,
            worst.rhat
        ));
    }
    let hits: usize = outputs.iter().map(|o| o.max_depth_hits).sum();
    if hits > 0 {
        warnings.push(format!("{hits} transitions hit max tree depth {}", config.max_tree_depth));
    }

    Ok(FitResult {
        kind: FitKind::FullBayes,
        spec: spec.clone(),
        param_names: names,
        point: None,
        draws: Some(draws),
        converged: bad.is_empty(),
        diagnostics,
        divergences,
        chain_stats: outputs
            .iter()
            .map(|o| ChainStats {
                step_size: o.step_size,
                divergences: o.divergences,
                warmup_divergences: o.warmup_divergences,
                mean_accept_stat: o.mean_accept_stat,
                mean_tree_depth: o.mean_tree_depth,
                max_depth_hits: o.max_depth_hits,
                leapfrogs: o.leapfrogs,
            })
            .collect(),
        grad_norm: None,
        tolerance: None,
        iterations: None,
        objective: None,
        sampler: Some(SamplerConfig {
            target_accept,
            ..config.clone()
        }),
        seed: config.seed,
        chains: config.chains,
        warnings,
        elapsed: start.elapsed(),
    })
}

/// One row of the machine-readable diagnostic report. Point fits carry only
/// `point`; sampled fits carry the summary columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub point: Option<f64>,
    #[serde(flatten, default)]
    pub summary: Option<ParamSummaryColumns>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummaryColumns {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q975: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    pub mcse_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub kind: FitKind,
    pub converged: bool,
    pub divergences: usize,
    pub warnings: Vec<String>,
    pub rows: Vec<DiagnosticRow>,
}

pub fn diagnostics_summary(fit: &FitResult) -> DiagnosticReport {
    let rows = match &fit.point {
        Some(p) if fit.diagnostics.is_empty() => fit
            .param_names
            .iter()
            .zip(p.to_constrained())
            .map(|(name, v)| DiagnosticRow {
                name: name.clone(),
                point: Some(v),
                summary: None,
            })
            .collect(),
        _ => fit
            .diagnostics
            .iter()
            .map(|d| DiagnosticRow {
                name: d.name.clone(),
                point: None,
                summary: Some(ParamSummaryColumns {
                    mean: d.mean,
                    sd: d.sd,
                    q025: d.q025,
                    q25: d.q25,
                    q50: d.q50,
                    q75: d.q75,
                    q975: d.q975,
                    rhat: d.rhat,
                    ess_bulk: d.ess_bulk,
                    ess_tail: d.ess_tail,
                    mcse_mean: d.mcse_mean,
                }),
            })
            .collect(),
    };
    DiagnosticReport {
        kind: fit.kind,
        converged: fit.converged,
        divergences: fit.divergences,
        warnings: fit.warnings.clone(),
        rows,
    }
}
