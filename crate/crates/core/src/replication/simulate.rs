//! Synthetic surveys with known ground truth.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    CellKey, CellRecord, CellTable, SourceMeta, SurveyDataset, SurveyResponse, N_AGE, N_CELLS, N_ETHNICITY,
    N_INCOME,
};
use crate::error::{Error, Result};
use crate::model::{inv_logit, DesignIndex, ModelSpec, ParameterVector};
use crate::poststrat::{self, CellPredictions, EstimateRow, EstimateSeries, Slice, SubsetQuery};
use crate::states::{DC, N_STATES};

pub const PEW_2008_N: usize = 19_170;
pub const ANNENBERG_2004_N: usize = 43_970;

/// Sample sizes of the two named presets.
pub fn preset_n(name: &str) -> Result<usize> {
    match name {
        "pew2008-scale" => Ok(PEW_2008_N),
        "annenberg2004-scale" => Ok(ANNENBERG_2004_N),
        other => Err(Error::Config(format!(
            "unknown preset \"{other}\" (expected pew2008-scale or annenberg2004-scale)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truth {
    Given(ParameterVector),
    /// Coefficients drawn from the model's own prior structure with the given
    /// batch sds (defaults from [`default_truth_sigma`] when absent).
    Generated { seed: u64, sigma: Option<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingDesign {
    CellProportional,
    /// Relative sampling weight per cell in canonical order, multiplied by N_j.
    Weights(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub truth: Truth,
    pub n: usize,
    pub design: SamplingDesign,
    /// Sd of an independent per-cell logit-scale perturbation of the survey
    /// response probabilities.
    pub bias_scale: f64,
    pub seed: u64,
    pub survey_name: String,
}

impl SyntheticConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        SyntheticConfig {
            truth: Truth::Generated { seed, sigma: None },
            n,
            design: SamplingDesign::CellProportional,
            bias_scale: 0.0,
            seed,
            survey_name: "synthetic".into(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Ok(SyntheticConfig {
            survey_name: name.to_string(),
            ..SyntheticConfig::new(preset_n(name)?, seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("sample size must be positive".into()));
        }
        if !(self.bias_scale >= 0.0 && self.bias_scale.is_finite()) {
            return Err(Error::Config(format!("bias scale must be >= 0, got {}", self.bias_scale)));
        }
        Ok(())
    }
}

/// Truth sds used when none are configured: larger for the main effects than
/// for the interactions.
pub fn default_truth_sigma(spec: &ModelSpec) -> Vec<f64> {
    spec.batches
        .iter()
        .map(|b| match b.factors.len() {
            1 => 0.4,
            _ => 0.2,
        })
        .collect()
}

pub fn generate_truth(spec: &ModelSpec, seed: u64, sigma: Option<&[f64]>) -> Result<ParameterVector> {
    let layout = spec.layout();
    let sigma: Vec<f64> = match sigma {
        Some(s) if s.len() == layout.n_batches() => s.to_vec(),
        Some(s) => {
            return Err(Error::Config(format!(
                "truth sigma has {} entries, spec has {} batches",
                s.len(),
                layout.n_batches()
            )))
        }
        None => default_truth_sigma(spec),
    };
    if sigma.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::Config("truth sigma entries must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x7472757468);
    let mut fixed = vec![0.2 * rng.sample::<f64, _>(StandardNormal)];
    if layout.n_fixed == 2 {
        fixed.push(4.0 + 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    let beta = layout
        .batch_of_beta()
        .iter()
        .map(|&b| sigma[b] * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(ParameterVector {
        fixed,
        beta,
        sigma,
    })
}

/// Ground truth behind a synthetic survey.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRecord {
    pub params: ParameterVector,
    /// Population Pr(y = 1) per cell, canonical order, without survey bias.
    pub theta: Vec<f64>,
    /// Logit-scale survey bias per cell.
    pub bias: Vec<f64>,
    /// Poststratified value over the whole population.
    pub population: f64,
    /// Poststratified (state, income, slice) values.
    pub series: EstimateSeries,
}

impl TruthRecord {
    pub fn predictions(&self) -> CellPredictions {
        CellPredictions {
            n_draws: 1,
            theta: self.theta.clone(),
        }
    }
}

fn truth_series(theta: &[f64], table: &CellTable, name: &str) -> Result<EstimateSeries> {
    let preds = CellPredictions {
        n_draws: 1,
        theta: theta.to_vec(),
    };
    let mut rows = Vec::with_capacity(N_STATES * 2 * N_INCOME);
    for state in 1..=N_STATES as u8 {
        for slice in Slice::BOTH {
            for income in 1..=N_INCOME as u8 {
                let est = poststrat::poststratify(&preds, table, &SubsetQuery::state_income(state, income, slice))?;
                rows.push(EstimateRow {
                    survey_id: name.to_string(),
                    state,
                    income,
                    slice,
                    mean: est.draws[0],
                    q25: None,
                    q75: None,
                    q025: None,
                    q975: None,
                    raw_p: None,
                    raw_n: 0,
                });
            }
        }
    }
    Ok(EstimateSeries {
        rows,
        state_weights: None,
    }
    .with_state_weights(table))
}

/// Draws respondents' cells in proportion to `N_j` (times any design
/// weights), then votes from the cell probability plus survey bias.
pub fn simulate_survey(config: &SyntheticConfig, table: &CellTable, spec: &ModelSpec) -> Result<(SurveyDataset, TruthRecord)> {
    config.validate()?;
    spec.validate()?;
    let params = match &config.truth {
        Truth::Given(p) => {
            p.check(spec)?;
            p.clone()
        }
        Truth::Generated { seed, sigma } => generate_truth(spec, *seed, sigma.as_deref())?,
    };
    let weights: Vec<f64> = match &config.design {
        SamplingDesign::CellProportional => table.cells().iter().map(|c| c.population).collect(),
        SamplingDesign::Weights(w) => {
            if w.len() != N_CELLS {
                return Err(Error::Config(format!("design weights need {N_CELLS} entries, got {}", w.len())));
            }
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Config("design weights must be finite and >= 0".into()));
            }
            table.cells().iter().zip(w).map(|(c, v)| c.population * v).collect()
        }
    };
    let sampler = WeightedIndex::new(&weights)
        .map_err(|e| Error::Config(format!("degenerate sampling weights: {e}")))?;

    let index = DesignIndex::for_cells(table, spec)?;
    let eta: Vec<f64> = index.linear_predictor(&params.fixed, &params.beta);
    let theta: Vec<f64> = eta.iter().map(|&e| inv_logit(e)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bias: Vec<f64> = if config.bias_scale > 0.0 {
        let normal = Normal::new(0.0, config.bias_scale).expect("valid scale");
        (0..N_CELLS).map(|_| normal.sample(&mut rng)).collect()
    } else {
        vec![0.0; N_CELLS]
    };
    let responses = (0..config.n)
        .map(|_| {
            let j = sampler.sample(&mut rng);
            let key = CellKey::from_canonical_index(j);
            let p = inv_logit(eta[j] + bias[j]);
            SurveyResponse {
                vote: rng.random_bool(p) as u8,
                income: key.income,
                age: key.age,
                ethnicity: key.ethnicity,
                state: key.state,
                survey_id: config.survey_name.clone(),
            }
        })
        .collect();
    let dataset = SurveyDataset::new(
        responses,
        SourceMeta {
            survey_name: config.survey_name.clone(),
            field_dates: None,
            provenance: Some(format!("synthetic, seed {}", config.seed)),
            dropped_undecided: 0,
            dropped_malformed: 0,
        },
    )?;

    let preds = CellPredictions {
        n_draws: 1,
        theta: theta.clone(),
    };
    let population = poststrat::poststratify(&preds, table, &SubsetQuery::everyone())?.draws[0];
    let series = truth_series(&theta, table, &config.survey_name)?;
    Ok((
        dataset,
        TruthRecord {
            params,
            theta,
            bias,
            population,
            series,
        },
    ))
}

fn dirichlet(rng: &mut ChaCha8Rng, alpha: &[f64]) -> Vec<f64> {
    let g: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|x| x / s).collect()
}

/// A plausible census grid: state sizes spread over two orders of magnitude,
/// state-specific ethnic, age and income mixes, and a previous-election
/// share per state. Cell counts are whole numbers.
pub fn synthetic_cell_table(seed: u64) -> CellTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x63656c6c73);
    let mut records = Vec::with_capacity(N_CELLS);
    let mut state_rows = Vec::with_capacity(N_STATES);
    for state in 1..=N_STATES as u8 {
        let size = (15.0 + 0.9 * rng.sample::<f64, _>(StandardNormal)).exp();
        let share = if state == DC {
            0.1
        } else {
            (0.5 + 0.09 * rng.sample::<f64, _>(StandardNormal)).clamp(0.25, 0.75)
        };
        let white = 0.45 + 0.45 * rng.random::<f64>();
        let rest = dirichlet(&mut rng, &[3.0, 3.0, 1.5]);
        let eth = [white, (1.0 - white) * rest[0], (1.0 - white) * rest[1], (1.0 - white) * rest[2]];
        let age = dirichlet(&mut rng, &[20.0, 25.0, 25.0, 18.0]);
        let income: Vec<Vec<f64>> = (0..N_ETHNICITY)
            .map(|e| {
                let tilt: f64 = if e == 0 { 1.3 } else { 0.8 };
                let base: Vec<f64> = (0..N_INCOME).map(|i| 8.0 * tilt.powi(i as i32 - 2)).collect();
                dirichlet(&mut rng, &base)
            })
            .collect();
        state_rows.push((state, size, share, eth, age, income));
    }
    for (state, size, share, eth, age, income) in &state_rows {
        for e in 0..N_ETHNICITY {
            for a in 0..N_AGE {
                for i in 0..N_INCOME {
                    records.push(CellRecord {
                        key: CellKey::new(i as u8 + 1, a as u8 + 1, e as u8 + 1, *state),
                        population: (size * eth[e] * age[a] * income[e][i]).round(),
                        state_predictor: *share,
                    });
                }
            }
        }
    }
    CellTable::new(records).expect("synthetic table satisfies the invariants")
}
