//! Convergence diagnostics: rank-normalized split R-hat, bulk/tail effective
//! sample size and Monte Carlo standard errors.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Splits every chain into halves, dropping the middle draw of odd chains.
fn split_chains(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces values by normal scores of their pooled average ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (c, chain) in chains.iter().enumerate() {
        for (i, &v) in chain.iter().enumerate() {
            all.push((v, c, i));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = all.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average of 1-based ranks i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for entry in &all[i..=j] {
            out[entry.1][entry.2] = z;
        }
        i = j + 1;
    }
    out
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let b_over_n = sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    if w == 0.0 {
        return if var_plus == 0.0 { f64::NAN } else { f64::INFINITY };
    }
    (var_plus / w).sqrt()
}

fn fold(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let med = quantile(&pooled, 0.5);
    chains
        .iter()
        .map(|c| c.iter().map(|v| (v - med).abs()).collect())
        .collect()
}

/// Rank-normalized split R-hat: the larger of the bulk and tail (folded)
/// statistics. NaN when every draw is identical.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    if chains.is_empty() || chains[0].len() < 4 {
        return f64::NAN;
    }
    let bulk = rhat_basic(&rank_normalize(&split_chains(chains)));
    let folded = fold(chains);
    let folded_refs: Vec<&[f64]> = folded.iter().map(Vec::as_slice).collect();
    let tail = rhat_basic(&rank_normalize(&split_chains(&folded_refs)));
    bulk.max(tail)
}

/// Biased autocovariance of `x` at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for t in 0..n - lag {
        s += (x[t] - m) * (x[t + lag] - m);
    }
    s / n as f64
}

/// Effective sample size with Geyer's initial monotone sequence over
/// multiple chains of equal length.
pub fn ess_chains(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov_at = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let mean_var = acov_at(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if var_plus == 0.0 {
        return f64::NAN;
    }
    let rho = |acov: f64| 1.0 - (mean_var - acov) / var_plus;
    let mut rho_hat = vec![0.0; n];
    let mut even = 1.0;
    rho_hat[0] = even;
    let mut odd = rho(acov_at(1));
    rho_hat[1] = odd;
    let mut s = 1;
    while s < n - 4 && even + odd > 0.0 {
        even = rho(acov_at(s + 1));
        odd = rho(acov_at(s + 2));
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut t = 1;
    while t + 3 <= max_s {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho_hat[..max_s].iter().sum::<f64>() + rho_hat[max_s + 1];
    (total / tau).min(total * total.log10())
}

/// Bulk ESS: rank-normalized split chains.
pub fn ess_bulk(chains: &[&[f64]]) -> f64 {
    ess_chains(&rank_normalize(&split_chains(chains)))
}

/// Tail ESS: the smaller ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[&[f64]]) -> f64 {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let mut ess = f64::INFINITY;
    for q in [0.05, 0.95] {
        let cut = quantile(&pooled, q);
        let ind: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|&v| (v <= cut) as u8 as f64).collect())
            .collect();
        let refs: Vec<&[f64]> = ind.iter().map(Vec::as_slice).collect();
        ess = ess.min(ess_chains(&split_chains(&refs)));
    }
    ess
}

/// ESS of the raw (not rank-normalized) split chains; used for MCSE of the mean.
pub fn ess_mean(chains: &[&[f64]]) -> f64 {
    ess_chains(&split_chains(chains))
}

/// Monte Carlo standard error of the posterior mean.
pub fn mcse_mean(chains: &[&[f64]]) -> f64 {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    (sample_var(&pooled) / ess_mean(chains)).sqrt()
}

/// Monte Carlo standard error of the posterior sd, by the delta method on
/// the squared deviations.
pub fn mcse_sd(chains: &[&[f64]]) -> f64 {
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let mu = mean(&pooled);
    let sq: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| c.iter().map(|v| (v - mu).powi(2)).collect())
        .collect();
    let refs: Vec<&[f64]> = sq.iter().map(Vec::as_slice).collect();
    let sq_pooled: Vec<f64> = sq.iter().flatten().copied().collect();
    let var = mean(&sq_pooled);
    let mcse_var = (sample_var(&sq_pooled) / ess_mean(&refs)).sqrt();
    mcse_var / (2.0 * var.sqrt())
}

/// JSON has no NaN; serde_json writes it as null, read back here as NaN.
fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub sd: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q025: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q25: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q50: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q75: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub q975: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub rhat: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub ess_bulk: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub ess_tail: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mcse_mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mcse_sd: f64,
}

impl ParamSummary {
    pub fn from_chains(name: &str, chains: &[&[f64]]) -> Self {
        let mut pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
        let mu = mean(&pooled);
        let sd = sample_var(&pooled).sqrt();
        pooled.sort_by(f64::total_cmp);
        ParamSummary {
            name: name.to_string(),
            mean: mu,
            sd,
            q025: quantile_sorted(&pooled, 0.025),
            q25: quantile_sorted(&pooled, 0.25),
            q50: quantile_sorted(&pooled, 0.5),
            q75: quantile_sorted(&pooled, 0.75),
            q975: quantile_sorted(&pooled, 0.975),
            rhat: split_rhat(chains),
            ess_bulk: ess_bulk(chains),
            ess_tail: ess_tail(chains),
            mcse_mean: mcse_mean(chains),
            mcse_sd: mcse_sd(chains),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid_chains(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn refs(c: &[Vec<f64>]) -> Vec<&[f64]> {
        c.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn iid_draws_look_converged() {
        let c = iid_chains(4, 1000, 1);
        let r = refs(&c);
        let rhat = split_rhat(&r);
        assert!(rhat < 1.01, "rhat {rhat}");
        let ess = ess_bulk(&r);
        assert!(ess > 3000.0 && ess < 5000.0, "ess {ess}");
    }

    #[test]
    fn ar1_chain_has_reduced_ess() {
        // AR(1) with phi = 0.9: integrated autocorrelation time (1+phi)/(1-phi) = 19
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..5000)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let ess = ess_mean(&refs(&chains));
        let expected = 20000.0 / 19.0;
        assert!((ess / expected - 1.0).abs() < 0.25, "ess {ess} vs {expected}");
    }

    #[test]
    fn constant_chain_is_flagged() {
        let mut c = iid_chains(3, 1000, 3);
        c.push(vec![2.5; 1000]);
        let r = refs(&c);
        let s = ParamSummary::from_chains("x", &r);
        assert!(s.rhat > 1.05, "rhat {}", s.rhat);
        assert!(s.ess_bulk < 0.05 * 4000.0, "ess {}", s.ess_bulk);
    }

    #[test]
    fn shifted_chain_is_flagged() {
        let mut c = iid_chains(4, 500, 4);
        c[2].iter_mut().for_each(|v| *v += 3.0);
        assert!(split_rhat(&refs(&c)) > 1.3);
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }
}
