//! Cell predictions and census-weighted subset estimates.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CellKey, CellTable, SurveyDataset, N_CELLS, N_INCOME, WHITE};
use crate::error::{Error, Result};
use crate::inference::diagnostics::quantile_sorted;
use crate::inference::{FitKind, FitResult};
use crate::model::{inv_logit, DesignIndex, ModelSpec, ParameterVector};
use crate::states::N_STATES;

/// Predicted Pr(y = 1) for all 4080 cells, one block of cells per draw
/// (a single block for point fits).
#[derive(Clone, Debug, PartialEq)]
pub struct CellPredictions {
    pub n_draws: usize,
    /// Draw-major: `theta[d * N_CELLS + canonical_index]`.
    pub theta: Vec<f64>,
}

impl CellPredictions {
    /// Point predictions from one vector of cell probabilities.
    pub fn from_point(theta: Vec<f64>) -> Result<Self> {
        if theta.len() != N_CELLS {
            return Err(Error::Contract(format!("expected {N_CELLS} cell predictions, got {}", theta.len())));
        }
        Ok(CellPredictions { n_draws: 1, theta })
    }

    pub fn draw(&self, d: usize) -> &[f64] {
        &self.theta[d * N_CELLS..(d + 1) * N_CELLS]
    }

    pub fn get(&self, d: usize, key: CellKey) -> f64 {
        self.theta[d * N_CELLS + key.canonical_index()]
    }
}

/// Cell probabilities for one parameter vector, in canonical cell order.
pub fn cell_thetas(index: &DesignIndex, params: &ParameterVector) -> Vec<f64> {
    (0..index.rows())
        .map(|r| inv_logit(index.eta(r, &params.fixed, &params.beta)))
        .collect()
}

fn check_spec(fit: &FitResult, spec: &ModelSpec) -> Result<()> {
    if &fit.spec != spec {
        return Err(Error::Contract("fit was produced under a different model spec".into()));
    }
    Ok(())
}

pub fn predict_cells(fit: &FitResult, table: &CellTable, spec: &ModelSpec) -> Result<CellPredictions> {
    check_spec(fit, spec)?;
    let index = DesignIndex::for_cells(table, spec)?;
    let sets = fit.parameter_sets();
    if sets.is_empty() {
        return Err(Error::Contract("fit has neither draws nor a point estimate".into()));
    }
    let mut theta = Vec::with_capacity(sets.len() * N_CELLS);
    for p in &sets {
        p.check(spec)?;
        theta.extend(cell_thetas(&index, p));
    }
    Ok(CellPredictions {
        n_draws: sets.len(),
        theta,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    #[default]
    All,
    White,
}

impl Slice {
    pub const BOTH: [Slice; 2] = [Slice::All, Slice::White];

    pub fn label(self) -> &'static str {
        match self {
            Slice::All => "all",
            Slice::White => "white",
        }
    }
}

impl std::str::FromStr for Slice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Slice::All),
            "white" => Ok(Slice::White),
            other => Err(Error::Config(format!("unknown slice \"{other}\""))),
        }
    }
}

/// Conjunction of per-factor equalities; `None` leaves a factor free.
/// The white slice adds `ethnicity = 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetQuery {
    pub income: Option<u8>,
    pub age: Option<u8>,
    pub ethnicity: Option<u8>,
    pub state: Option<u8>,
    #[serde(default)]
    pub slice: Slice,
}

impl SubsetQuery {
    pub fn everyone() -> Self {
        SubsetQuery::default()
    }

    pub fn state(state: u8) -> Self {
        SubsetQuery {
            state: Some(state),
            ..Default::default()
        }
    }

    pub fn state_income(state: u8, income: u8, slice: Slice) -> Self {
        SubsetQuery {
            state: Some(state),
            income: Some(income),
            slice,
            ..Default::default()
        }
    }

    pub fn matches(&self, key: &CellKey) -> bool {
        self.income.is_none_or(|v| v == key.income)
            && self.age.is_none_or(|v| v == key.age)
            && self.ethnicity.is_none_or(|v| v == key.ethnicity)
            && self.state.is_none_or(|v| v == key.state)
            && (self.slice == Slice::All || key.ethnicity == WHITE)
    }

    /// Cells selected with their census weights; fails on an empty subset or
    /// zero total weight.
    pub fn weights(&self, table: &CellTable) -> Result<Vec<(usize, f64)>> {
        let w: Vec<(usize, f64)> = table
            .cells()
            .iter()
            .enumerate()
            .filter(|(_, c)| self.matches(&c.key))
            .map(|(i, c)| (i, c.population))
            .collect();
        if w.is_empty() {
            return Err(Error::Query(format!("{self} selects no cells")));
        }
        if w.iter().map(|x| x.1).sum::<f64>() <= 0.0 {
            return Err(Error::Query(format!("{self} has zero total population")));
        }
        Ok(w)
    }
}

impl std::fmt::Display for SubsetQuery {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        for (name, v) in [
            ("income", self.income),
            ("age", self.age),
            ("ethnicity", self.ethnicity),
            ("state", self.state),
        ] {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        }
        if self.slice == Slice::White {
            parts.push("whites only".into());
        }
        if parts.is_empty() {
            write!(f, "query (everyone)")
        } else {
            write!(f, "query ({})", parts.join(", "))
        }
    }
}

fn weighted_mean(theta: &[f64], weights: &[(usize, f64)]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &(j, n) in weights {
        num += n * theta[j];
        den += n;
    }
    num / den
}

/// Summary over draws of a poststratified quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub draws: Vec<f64>,
}

impl Estimate {
    pub fn mean(&self) -> f64 {
        self.draws.iter().sum::<f64>() / self.draws.len() as f64
    }

    /// Type-7 quantile over draws.
    pub fn quantile(&self, q: f64) -> f64 {
        let mut v = self.draws.clone();
        v.sort_by(f64::total_cmp);
        quantile_sorted(&v, q)
    }
}

/// `sum_S N_j theta_j / sum_S N_j`, per draw.
pub fn poststratify(preds: &CellPredictions, table: &CellTable, query: &SubsetQuery) -> Result<Estimate> {
    if preds.theta.len() != preds.n_draws * N_CELLS {
        return Err(Error::Contract("prediction block size does not match draw count".into()));
    }
    let w = query.weights(table)?;
    Ok(Estimate {
        draws: (0..preds.n_draws).map(|d| weighted_mean(preds.draw(d), &w)).collect(),
    })
}

/// Unweighted respondent proportion for a subset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RawEstimate {
    Empty,
    Observed { proportion: f64, n: usize },
}

impl RawEstimate {
    pub fn proportion(&self) -> Option<f64> {
        match self {
            RawEstimate::Empty => None,
            RawEstimate::Observed { proportion, .. } => Some(*proportion),
        }
    }

    pub fn n(&self) -> usize {
        match self {
            RawEstimate::Empty => 0,
            RawEstimate::Observed { n, .. } => *n,
        }
    }
}

pub fn raw_subset_estimate(data: &SurveyDataset, query: &SubsetQuery) -> RawEstimate {
    let (mut yes, mut n) = (0usize, 0usize);
    for r in data.responses() {
        if query.matches(&r.key()) {
            yes += r.vote as usize;
            n += 1;
        }
    }
    if n == 0 {
        RawEstimate::Empty
    } else {
        RawEstimate::Observed {
            proportion: yes as f64 / n as f64,
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub survey_id: String,
    pub state: u8,
    pub income: u8,
    pub slice: Slice,
    pub mean: f64,
    pub q25: Option<f64>,
    pub q75: Option<f64>,
    pub q025: Option<f64>,
    pub q975: Option<f64>,
    pub raw_p: Option<f64>,
    pub raw_n: usize,
}

/// Per (state, income, slice) estimates. Rows are ordered by state, then
/// slice (all before white), then income.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimateSeries {
    pub rows: Vec<EstimateRow>,
    /// Census population of each state, used to pool across states; not part
    /// of the CSV.
    pub state_weights: Option<Vec<f64>>,
}

pub const SERIES_COLUMNS: [&str; 11] = [
    "survey_id", "state", "income", "slice", "mean", "q25", "q75", "q025", "q975", "raw_p", "raw_n",
];

/// Formats a float so that parsing it back gives the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn parse_opt(s: &str, row: usize, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Row {
        row,
        message: format!("bad {col} value \"{s}\""),
    })
}

impl EstimateSeries {
    pub fn get(&self, state: u8, income: u8, slice: Slice) -> Option<&EstimateRow> {
        self.rows
            .iter()
            .find(|r| r.state == state && r.income == income && r.slice == slice)
    }

    /// The five income points of a state's curve, if all are present.
    pub fn curve(&self, state: u8, slice: Slice) -> Option<[f64; N_INCOME]> {
        let mut out = [f64::NAN; N_INCOME];
        for r in self.rows.iter().filter(|r| r.state == state && r.slice == slice) {
            if (1..=N_INCOME as u8).contains(&r.income) {
                out[r.income as usize - 1] = r.mean;
            }
        }
        out.iter().all(|v| !v.is_nan()).then_some(out)
    }

    pub fn states(&self) -> Vec<u8> {
        let mut s: Vec<u8> = self.rows.iter().map(|r| r.state).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn slices(&self) -> Vec<Slice> {
        let mut s: Vec<Slice> = self.rows.iter().map(|r| r.slice).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SERIES_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.survey_id.clone(),
                r.state.to_string(),
                r.income.to_string(),
                r.slice.label().to_string(),
                fmt_f64(r.mean),
                fmt_opt(r.q25),
                fmt_opt(r.q75),
                fmt_opt(r.q025),
                fmt_opt(r.q975),
                fmt_opt(r.raw_p),
                r.raw_n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<estimates>"), e))?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        for col in SERIES_COLUMNS {
            if !header.iter().any(|h| h == col) {
                return Err(Error::Schema(col.into()));
            }
        }
        let pos = |c: &str| header.iter().position(|h| h == c).expect("checked");
        let p: Vec<usize> = SERIES_COLUMNS.iter().map(|c| pos(c)).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let int = |k: usize| -> Result<u64> {
                rec[p[k]].parse::<u64>().map_err(|_| Error::Row {
                    row,
                    message: format!("bad {} value \"{}\"", SERIES_COLUMNS[k], &rec[p[k]]),
                })
            };
            let opt = |k: usize| parse_opt(&rec[p[k]], row, SERIES_COLUMNS[k]);
            let mean = opt(4)?.ok_or_else(|| Error::Row {
                row,
                message: "missing mean".into(),
            })?;
            rows.push(EstimateRow {
                survey_id: rec[p[0]].to_string(),
                state: int(1)? as u8,
                income: int(2)? as u8,
                slice: rec[p[3]].parse().map_err(|_| Error::Row {
                    row,
                    message: format!("bad slice \"{}\"", &rec[p[3]]),
                })?,
                mean,
                q25: opt(5)?,
                q75: opt(6)?,
                q025: opt(7)?,
                q975: opt(8)?,
                raw_p: opt(9)?,
                raw_n: int(10)? as usize,
            });
        }
        Ok(EstimateSeries {
            rows,
            state_weights: None,
        })
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    /// Attaches census state totals for pooling across states.
    pub fn with_state_weights(mut self, table: &CellTable) -> Self {
        self.state_weights = Some((1..=N_STATES as u8).map(|s| table.state_total(s)).collect());
        self
    }
}

/// Group definitions for the 510 (state, slice, income) estimates.
fn series_groups(table: &CellTable) -> Result<Vec<(u8, Slice, u8, Vec<(usize, f64)>)>> {
    let mut groups = Vec::with_capacity(N_STATES * 2 * N_INCOME);
    for state in 1..=N_STATES as u8 {
        for slice in Slice::BOTH {
            for income in 1..=N_INCOME as u8 {
                let q = SubsetQuery::state_income(state, income, slice);
                groups.push((state, slice, income, q.weights(table)?));
            }
        }
    }
    Ok(groups)
}

/// Poststratified (state, income, slice) estimates for a fit. Full-Bayes
/// fits are aggregated draw by draw and summarized afterwards; point fits
/// give a single value with empty interval columns.
pub fn estimate_series(
    fit: &FitResult,
    table: &CellTable,
    data: Option<&SurveyDataset>,
    survey_id: &str,
) -> Result<EstimateSeries> {
    let index = DesignIndex::for_cells(table, &fit.spec)?;
    let groups = series_groups(table)?;
    let sets = fit.parameter_sets();
    if sets.is_empty() {
        return Err(Error::Contract("fit has neither draws nor a point estimate".into()));
    }
    let mut per_group: Vec<Vec<f64>> = vec![Vec::with_capacity(sets.len()); groups.len()];
    for p in &sets {
        let theta = cell_thetas(&index, p);
        for (g, (.., w)) in per_group.iter_mut().zip(&groups) {
            g.push(weighted_mean(&theta, w));
        }
    }
    let sampled = fit.kind == FitKind::FullBayes;
    let rows = groups
        .iter()
        .zip(per_group)
        .map(|((state, slice, income, _), mut vals)| {
            let est = Estimate { draws: vals.clone() };
            let mean = est.mean();
            let (q25, q75, q025, q975) = if sampled {
                vals.sort_by(f64::total_cmp);
                (
                    Some(quantile_sorted(&vals, 0.25)),
                    Some(quantile_sorted(&vals, 0.75)),
                    Some(quantile_sorted(&vals, 0.025)),
                    Some(quantile_sorted(&vals, 0.975)),
                )
            } else {
                (None, None, None, None)
            };
            let raw = data
                .map(|d| raw_subset_estimate(d, &SubsetQuery::state_income(*state, *income, *slice)))
                .unwrap_or(RawEstimate::Empty);
            EstimateRow {
                survey_id: survey_id.to_string(),
                state: *state,
                income: *income,
                slice: *slice,
                mean,
                q25,
                q75,
                q025,
                q975,
                raw_p: raw.proportion(),
                raw_n: raw.n(),
            }
        })
        .collect();
    Ok(EstimateSeries { rows, state_weights: None }.with_state_weights(table))
}

/// Per-draw poststratified value of one query, computed without storing the
/// full prediction matrix.
pub fn query_draws(fit: &FitResult, table: &CellTable, query: &SubsetQuery) -> Result<Estimate> {
    let index = DesignIndex::for_cells(table, &fit.spec)?;
    let w = query.weights(table)?;
    let sets = fit.parameter_sets();
    if sets.is_empty() {
        return Err(Error::Contract("fit has neither draws nor a point estimate".into()));
    }
    Ok(Estimate {
        draws: sets
            .iter()
            .map(|p| weighted_mean(&cell_thetas(&index, p), &w))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CellRecord, Factor, SourceMeta, SurveyResponse};
    use proptest::prelude::*;

    fn table_with(pop: impl Fn(usize) -> f64) -> CellTable {
        CellTable::new(
            CellKey::all()
                .enumerate()
                .map(|(i, key)| CellRecord {
                    key,
                    population: pop(i),
                    state_predictor: 0.3 + 0.005 * key.state as f64,
                })
                .collect(),
        )
        .unwrap()
    }

    fn point_fit(spec: &ModelSpec, params: ParameterVector) -> FitResult {
        FitResult {
            kind: FitKind::Map,
            spec: spec.clone(),
            param_names: spec.layout().param_names(spec),
            point: Some(params),
            draws: None,
            diagnostics: vec![],
            divergences: 0,
            chain_stats: vec![],
            grad_norm: None,
            tolerance: None,
            iterations: None,
            objective: None,
            sampler: None,
            seed: 0,
            chains: 0,
            converged: true,
            warnings: vec![],
            elapsed: Default::default(),
        }
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let spec = ModelSpec::default();
        let fit = point_fit(&spec, ParameterVector::zeros(&spec));
        let preds = predict_cells(&fit, &table_with(|_| 1.0), &spec).unwrap();
        assert_eq!(preds.theta.len(), N_CELLS);
        assert!(preds.theta.iter().all(|&t| t == 0.5));
    }

    #[test]
    fn intercept_only_constant() {
        let spec = ModelSpec::intercept_only();
        let mut p = ParameterVector::zeros(&spec);
        p.fixed[0] = (0.7f64 / 0.3).ln();
        let preds = predict_cells(&point_fit(&spec, p), &table_with(|_| 1.0), &spec).unwrap();
        assert!(preds.theta.iter().all(|&t| (t - 0.7).abs() < 1e-15));
    }

    #[test]
    fn spec_mismatch_is_contract_error() {
        let spec = ModelSpec::default();
        let fit = point_fit(&spec, ParameterVector::zeros(&spec));
        let other = ModelSpec::main_effects();
        assert!(matches!(
            predict_cells(&fit, &table_with(|_| 1.0), &other),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn two_cell_arithmetic() {
        // only cells (1,1,1,1) and (2,1,1,1) populated within state 1 income-free query
        let table = table_with(|i| match i {
            0 => 1.0,
            1 => 3.0,
            _ if i < 80 => 0.0,
            _ => 1.0,
        });
        let mut theta = vec![0.5; N_CELLS];
        theta[0] = 0.0;
        theta[1] = 1.0;
        let preds = CellPredictions::from_point(theta).unwrap();
        let est = poststratify(&preds, &table, &SubsetQuery::state(1)).unwrap();
        assert_eq!(est.draws, vec![0.75]);
    }

    #[test]
    fn empty_or_weightless_subset_is_query_error() {
        let table = table_with(|i| if CellKey::from_canonical_index(i).state == 3 && CellKey::from_canonical_index(i).ethnicity == 4 { 0.0 } else { 1.0 });
        let preds = CellPredictions::from_point(vec![0.5; N_CELLS]).unwrap();
        let q = SubsetQuery {
            state: Some(3),
            ethnicity: Some(4),
            ..Default::default()
        };
        assert!(matches!(poststratify(&preds, &table, &q), Err(Error::Query(_))));
        let contradictory = SubsetQuery {
            ethnicity: Some(2),
            slice: Slice::White,
            ..Default::default()
        };
        assert!(matches!(poststratify(&preds, &table, &contradictory), Err(Error::Query(_))));
    }

    fn dataset(votes: &[(u8, u8, u8, u8, u8)]) -> SurveyDataset {
        SurveyDataset::new(
            votes
                .iter()
                .map(|&(vote, income, age, ethnicity, state)| SurveyResponse {
                    vote,
                    income,
                    age,
                    ethnicity,
                    state,
                    survey_id: "t".into(),
                })
                .collect(),
            SourceMeta::default(),
        )
        .unwrap()
    }

    #[test]
    fn raw_estimates() {
        let d = dataset(&[(1, 1, 1, 1, 1), (1, 1, 1, 1, 2), (0, 1, 1, 1, 1), (1, 2, 1, 1, 2)]);
        assert_eq!(
            raw_subset_estimate(&d, &SubsetQuery::everyone()),
            RawEstimate::Observed { proportion: 0.75, n: 4 }
        );
        assert_eq!(raw_subset_estimate(&d, &SubsetQuery::state(9)), RawEstimate::Empty);
    }

    #[test]
    fn series_csv_round_trip() {
        let spec = ModelSpec::main_effects();
        let mut p = ParameterVector::zeros(&spec);
        for (i, b) in p.beta.iter_mut().enumerate() {
            *b = ((i * 37) % 11) as f64 / 10.0 - 0.5;
        }
        let table = table_with(|i| 1.0 + (i % 7) as f64);
        let d = dataset(&[(1, 1, 1, 1, 1), (0, 2, 1, 2, 2)]);
        let series = estimate_series(&point_fit(&spec, p), &table, Some(&d), "sim").unwrap();
        assert_eq!(series.rows.len(), 510);
        let mut buf = Vec::new();
        series.write_csv(&mut buf).unwrap();
        let back = EstimateSeries::read_csv(&buf[..]).unwrap();
        assert_eq!(back.rows, series.rows);
        let r = series.get(1, 1, Slice::White).unwrap();
        assert_eq!((r.raw_p, r.raw_n), (Some(1.0), 1));
        assert!(r.q025.is_none());
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(0.0f64..1000.0, N_CELLS),
            proptest::collection::vec(0.001f64..0.999, N_CELLS),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn state_estimate_is_weighted_combination_of_ethnicity_estimates((pop, theta) in arb_instance(), state in 1u8..=51) {
            let table = table_with(|i| pop[i] + 1.0);
            let preds = CellPredictions::from_point(theta).unwrap();
            let whole = poststratify(&preds, &table, &SubsetQuery::state(state)).unwrap().draws[0];
            let mut num = 0.0;
            let mut den = 0.0;
            for e in 1..=4u8 {
                let q = SubsetQuery { state: Some(state), ethnicity: Some(e), ..Default::default() };
                let n: f64 = q.weights(&table).unwrap().iter().map(|w| w.1).sum();
                num += n * poststratify(&preds, &table, &q).unwrap().draws[0];
                den += n;
            }
            prop_assert!((whole - num / den).abs() < 1e-12);
        }

        #[test]
        fn population_estimate_is_invariant_to_partition((pop, theta) in arb_instance()) {
            let table = table_with(|i| pop[i] + 1.0);
            let preds = CellPredictions::from_point(theta).unwrap();
            let all = poststratify(&preds, &table, &SubsetQuery::everyone()).unwrap().draws[0];
            let mut num = 0.0;
            for s in 1..=51u8 {
                num += table.state_total(s) * poststratify(&preds, &table, &SubsetQuery::state(s)).unwrap().draws[0];
            }
            prop_assert!((all - num / table.total_population()).abs() < 1e-12);
        }

        #[test]
        fn increasing_a_cell_increases_the_estimate((pop, theta) in arb_instance(), cell in 0usize..N_CELLS, bump in 1e-6f64..0.5) {
            let table = table_with(|i| pop[i] + 1.0);
            let key = CellKey::from_canonical_index(cell);
            let q = SubsetQuery { state: Some(key.state), income: Some(key.income), ..Default::default() };
            let before = poststratify(&CellPredictions::from_point(theta.clone()).unwrap(), &table, &q).unwrap().draws[0];
            let mut up = theta;
            up[cell] += bump;
            let after = poststratify(&CellPredictions::from_point(up).unwrap(), &table, &q).unwrap().draws[0];
            prop_assert!(after > before);
        }

        #[test]
        fn constant_theta_gives_constant_estimate((pop, _) in arb_instance(), c in 0.01f64..0.99, state in 1u8..=51, f in 0usize..4) {
            let table = table_with(|i| pop[i] + 1.0);
            let preds = CellPredictions::from_point(vec![c; N_CELLS]).unwrap();
            let mut q = SubsetQuery::state(state);
            match Factor::ALL[f] {
                Factor::Income => q.income = Some(2),
                Factor::Age => q.age = Some(3),
                Factor::Ethnicity => q.slice = Slice::White,
                Factor::State => {}
            }
            let est = poststratify(&preds, &table, &q).unwrap().draws[0];
            prop_assert!((est - c).abs() < 1e-14);
        }
    }
}
