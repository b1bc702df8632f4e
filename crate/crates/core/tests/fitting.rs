use mrp::data::{CellKey, Factor};
use mrp::inference::diagnostics::quantile;
use mrp::inference::{
    diagnostics_summary, fit_hmc, fit_map, fit_mmle, FitKind, FitResult, ParamSummary, SamplerConfig,
};
use mrp::model::{grad_log_posterior, inv_logit, DesignIndex, FitData, ModelSpec, Outcomes};
use mrp::replication::simulate::{simulate_survey, synthetic_cell_table, SyntheticConfig};
use nalgebra::{Matrix3, Vector3};
use statrs::distribution::{ContinuousCDF, Normal};

fn binomial_data(spec: &ModelSpec, keys: &[CellKey], successes: &[f64], trials: &[f64]) -> FitData {
    let index = DesignIndex::from_keys(keys, &[0.5; 51], spec).unwrap();
    FitData::new(
        index,
        Outcomes {
            successes: successes.to_vec(),
            trials: trials.to_vec(),
        },
    )
    .unwrap()
}

fn quick_sampler(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 4,
        warmup: 500,
        samples: 500,
        seed,
        ..Default::default()
    }
}

#[test]
fn map_of_empty_data_is_the_prior_mode() {
    for scale in [1.0, 2.5] {
        let spec = ModelSpec {
            prior_scale_hyper: scale,
            ..ModelSpec::main_effects()
        };
        let fit = fit_map(&FitData::empty(&spec), &spec, 1e-8, 1000, 3).unwrap();
        let p = fit.point.unwrap();
        assert!(p.beta.iter().all(|b| b.abs() < 1e-12));
        // d/d(log s) [log s - s^2 / (2 scale^2)] = 0 at s = scale
        for s in p.sigma {
            assert!((s - scale).abs() < 1e-6, "{s} vs {scale}");
        }
    }
}

#[test]
fn map_intercept_only_recovers_the_proportion() {
    let spec = ModelSpec::intercept_only();
    let keys = vec![CellKey::new(1, 1, 1, 1); 10];
    let votes = [1, 1, 0, 1, 0, 1, 1, 0, 0, 1];
    let index = DesignIndex::from_keys(&keys, &[0.5; 51], &spec).unwrap();
    let data = FitData::new(index, Outcomes::binary(&votes)).unwrap();
    let fit = fit_map(&data, &spec, 1e-8, 1000, 1).unwrap();
    let p = inv_logit(fit.point.unwrap().fixed[0]);
    assert!((p - 0.6).abs() < 1e-8, "{p}");
}

#[test]
fn map_point_zeroes_the_coefficient_gradient() {
    let spec = ModelSpec::default();
    let table = synthetic_cell_table(4);
    let (survey, _) = simulate_survey(&SyntheticConfig::new(2000, 4), &table, &spec).unwrap();
    let data = FitData::aggregate(&survey, &table, &spec).unwrap();
    let fit = fit_map(&data, &spec, 1e-5, 20000, 4).unwrap();
    assert!(fit.converged, "{:?}", fit.warnings);
    assert!(fit.grad_norm.unwrap() <= 1e-5);
    let point = fit.point.unwrap();
    let g = grad_log_posterior(&point, &data, &spec).unwrap();
    let l = spec.layout();
    let worst = g[..l.sigma_start()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-6, "largest coefficient gradient {worst}");
}

/// Laplace objective of a single two-level batch with an intercept, by a
/// direct Newton solve over (alpha, z1, z2).
fn toy_laplace(sigma: f64, y: [f64; 2], n: [f64; 2]) -> f64 {
    let mut u = Vector3::zeros();
    let eval = |u: &Vector3<f64>| {
        let mut g = -0.5 * (u[1] * u[1] + u[2] * u[2]);
        let mut grad = Vector3::new(0.0, -u[1], -u[2]);
        let mut h = Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 1.0));
        let mut w = [0.0; 2];
        for k in 0..2 {
            let eta = u[0] + sigma * u[k + 1];
            let p = 1.0 / (1.0 + (-eta).exp());
            g += y[k] * eta - n[k] * (1.0 + eta.exp()).ln();
            let x = [1.0, if k == 0 { sigma } else { 0.0 }, if k == 1 { sigma } else { 0.0 }];
            w[k] = n[k] * p * (1.0 - p);
            for a in 0..3 {
                grad[a] += (y[k] - n[k] * p) * x[a];
                for b in 0..3 {
                    h[(a, b)] += w[k] * x[a] * x[b];
                }
            }
        }
        (g, grad, h, w)
    };
    for _ in 0..100 {
        let (_, grad, h, _) = eval(&u);
        if grad.amax() < 1e-13 {
            break;
        }
        u += h.lu().solve(&grad).unwrap();
    }
    let (g, _, _, w) = eval(&u);
    g - 0.5 * w.iter().map(|wk| (1.0 + sigma * sigma * wk).ln()).sum::<f64>()
}

#[test]
fn mmle_matches_grid_argmax_on_a_two_level_toy() {
    let spec = ModelSpec {
        state_predictor: false,
        ..ModelSpec::with_batches(&[&[Factor::Ethnicity]])
    };
    let (y, n) = ([30.0, 12.0], [40.0, 40.0]);
    let keys = [CellKey::new(1, 1, 1, 1), CellKey::new(1, 1, 2, 1)];
    let data = binomial_data(&spec, &keys, &y, &n);
    let fit = fit_mmle(&data, &spec, 1e-8, 0).unwrap();
    let sigma = fit.point.unwrap().sigma[0];

    let step = 1e-3;
    let (best, _) = (1..=3000)
        .map(|i| i as f64 * step)
        .map(|s| (s, toy_laplace(s, y, n)))
        .fold((0.0, f64::NEG_INFINITY), |acc, (s, v)| if v > acc.1 { (s, v) } else { acc });
    assert!((sigma - best).abs() <= step, "mmle {sigma} vs grid {best}");
    assert!((fit.objective.unwrap() - toy_laplace(sigma, y, n)).abs() < 1e-9);
}

#[test]
fn mmle_of_empty_data_sits_at_zero() {
    let spec = ModelSpec::default();
    let fit = fit_mmle(&FitData::empty(&spec), &spec, 1e-5, 0).unwrap();
    assert!(fit.point.unwrap().sigma.iter().all(|&s| s == 0.0));
}

#[test]
fn hmc_without_data_reproduces_the_half_normal_prior() {
    let spec = ModelSpec::main_effects();
    let fit = fit_hmc(&FitData::empty(&spec), &spec, &quick_sampler(9)).unwrap();
    let draws = fit.draws.as_ref().unwrap();
    let n = draws.rows();
    let half_normal = Normal::new(0.0, 1.0).unwrap();
    let critical = 1.628 / (n as f64).sqrt(); // alpha = 0.01
    let start = spec.layout().sigma_start();
    for b in 0..spec.batches.len() {
        let mut x: Vec<f64> = (0..n).map(|i| draws.row(i)[start + b]).collect();
        x.sort_by(f64::total_cmp);
        let d = x
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = 2.0 * half_normal.cdf(v) - 1.0;
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < critical, "batch {b}: KS distance {d} >= {critical}");
    }
}

fn small_simulated(n: usize, seed: u64) -> (ModelSpec, FitData) {
    let spec = ModelSpec::main_effects();
    let table = synthetic_cell_table(seed);
    let (survey, _) = simulate_survey(&SyntheticConfig::new(n, seed), &table, &spec).unwrap();
    let data = FitData::aggregate(&survey, &table, &spec).unwrap();
    (spec, data)
}

#[test]
fn hmc_is_bit_identical_for_a_fixed_seed() {
    let (spec, data) = small_simulated(300, 5);
    let cfg = SamplerConfig {
        chains: 2,
        warmup: 150,
        samples: 100,
        seed: 77,
        ..Default::default()
    };
    let a = fit_hmc(&data, &spec, &cfg).unwrap();
    let b = fit_hmc(&data, &spec, &cfg).unwrap();
    let bits = |f: &FitResult| f.draws.as_ref().unwrap().values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = fit_hmc(&data, &spec, &SamplerConfig { seed: 78, ..cfg }).unwrap();
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn diagnostic_reports_follow_the_fit_kind() {
    let (spec, data) = small_simulated(300, 6);
    let cfg = SamplerConfig {
        chains: 2,
        warmup: 150,
        samples: 100,
        seed: 6,
        ..Default::default()
    };
    let hmc = fit_hmc(&data, &spec, &cfg).unwrap();
    let report = diagnostics_summary(&hmc);
    assert_eq!(report.kind, FitKind::FullBayes);
    assert_eq!(report.rows.len(), spec.layout().dim());
    assert!(report.rows.iter().all(|r| r.summary.is_some() && r.point.is_none()));

    let map = fit_map(&data, &spec, 1e-5, 20000, 6).unwrap();
    let json = serde_json::to_value(diagnostics_summary(&map)).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), spec.layout().dim());
    for row in rows {
        assert!(row.get("point").is_some());
        for key in ["q025", "q25", "q50", "q75", "q975", "rhat"] {
            assert!(row.get(key).is_none(), "{key} present in a MAP report");
        }
    }

    // a chain stuck at a value above every other draw
    let draws = hmc.draws.as_ref().unwrap();
    let mut chains = draws.column_by_chain(0);
    let stuck = chains.iter().flatten().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) + 1.0;
    chains[0].iter_mut().for_each(|v| *v = stuck);
    let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    let bad = ParamSummary::from_chains("intercept", &refs);
    let healthy = &hmc.diagnostics[0];
    assert!(bad.rhat > 1.05, "R-hat {}", bad.rhat);
    assert!(bad.ess_bulk < 0.2 * healthy.ess_bulk, "ESS {} vs {}", bad.ess_bulk, healthy.ess_bulk);
}

#[test]
fn map_sits_inside_the_central_99_percent_of_hmc_draws() {
    let spec = ModelSpec::default();
    let table = synthetic_cell_table(2000);
    let (survey, truth) = simulate_survey(&SyntheticConfig::new(2000, 2000), &table, &spec).unwrap();
    let data = FitData::aggregate(&survey, &table, &spec).unwrap();
    let map = fit_map(&data, &spec, 1e-5, 20000, 1).unwrap();
    let hmc = fit_hmc(&data, &spec, &SamplerConfig::default()).unwrap();
    assert!(hmc.converged, "{:?}", hmc.warnings);
    let point = map.point.unwrap().to_constrained();
    let draws = hmc.draws.as_ref().unwrap();
    let truth = truth.params.to_constrained();
    let mut outside_truth = Vec::new();
    for (j, name) in hmc.param_names.iter().enumerate() {
        let col: Vec<f64> = (0..draws.rows()).map(|i| draws.row(i)[j]).collect();
        let (lo, hi) = (quantile(&col, 0.005), quantile(&col, 0.995));
        assert!(point[j] >= lo && point[j] <= hi, "{name}: MAP {} outside [{lo}, {hi}]", point[j]);
        if (point[j] - truth[j]).abs() > 3.0 * hmc.diagnostics[j].sd {
            outside_truth.push(name.clone());
        }
    }
    // With several hundred parameters a handful of 3-sd misses is expected
    // by chance; systematic bias would show up as many.
    assert!(outside_truth.len() <= 5, "mode more than 3 sd from truth for {outside_truth:?}");
}
