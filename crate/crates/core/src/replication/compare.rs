//! Paired comparison of two estimate series.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::N_INCOME;
use crate::error::{Error, Result};
use crate::poststrat::{EstimateSeries, Slice};
use crate::replication::smoothness::{smoothness_diagnostic, SmoothnessReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedEstimate {
    pub state: u8,
    pub income: u8,
    pub slice: Slice,
    pub a: f64,
    pub b: f64,
    /// `b - a`.
    pub diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub pairs: Vec<PairedEstimate>,
    pub mean_diff: f64,
    pub mean_abs_diff: f64,
    pub max_abs_diff: f64,
    pub smoothness_a: SmoothnessReport,
    pub smoothness_b: SmoothnessReport,
    /// Share of states whose income-5 minus income-1 gap has the same sign in
    /// both runs, on the all-voters curve (whites when that is all there is).
    pub sign_agreement: f64,
    pub sign_agreement_by_slice: Vec<(Slice, f64)>,
}

type Key = (u8, u8, Slice);

fn index(s: &EstimateSeries) -> BTreeMap<Key, f64> {
    s.rows.iter().map(|r| ((r.state, r.income, r.slice), r.mean)).collect()
}

fn fmt_keys(keys: &[Key]) -> String {
    let shown: Vec<String> = keys
        .iter()
        .take(10)
        .map(|(s, i, sl)| format!("(state {s}, income {i}, {})", sl.label()))
        .collect();
    let more = if keys.len() > 10 {
        format!(" and {} more", keys.len() - 10)
    } else {
        String::new()
    };
    format!("{}{more}", shown.join(", "))
}

pub fn compare_runs(a: &EstimateSeries, b: &EstimateSeries) -> Result<ComparisonReport> {
    let ia = index(a);
    let ib = index(b);
    let only_a: Vec<Key> = ia.keys().filter(|k| !ib.contains_key(k)).copied().collect();
    let only_b: Vec<Key> = ib.keys().filter(|k| !ia.contains_key(k)).copied().collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        let mut parts = Vec::new();
        if !only_a.is_empty() {
            parts.push(format!("missing from b: {}", fmt_keys(&only_a)));
        }
        if !only_b.is_empty() {
            parts.push(format!("missing from a: {}", fmt_keys(&only_b)));
        }
        return Err(Error::KeyMismatch(parts.join("; ")));
    }
    if ia.is_empty() {
        return Err(Error::Dataset("nothing to compare".into()));
    }
    let pairs: Vec<PairedEstimate> = ia
        .iter()
        .map(|(&(state, income, slice), &va)| {
            let vb = ib[&(state, income, slice)];
            PairedEstimate {
                state,
                income,
                slice,
                a: va,
                b: vb,
                diff: vb - va,
            }
        })
        .collect();
    let n = pairs.len() as f64;
    let mean_diff = pairs.iter().map(|p| p.diff).sum::<f64>() / n;
    let mean_abs_diff = pairs.iter().map(|p| p.diff.abs()).sum::<f64>() / n;
    let max_abs_diff = pairs.iter().map(|p| p.diff.abs()).fold(0.0, f64::max);

    let top = N_INCOME as u8;
    let slices = a.slices();
    let sign_agreement_by_slice: Vec<(Slice, f64)> = slices
        .iter()
        .map(|&slice| {
            let states = a.states();
            let agree = states
                .iter()
                .filter(|&&s| {
                    let ga = ia.get(&(s, top, slice)).zip(ia.get(&(s, 1, slice))).map(|(h, l)| h - l);
                    let gb = ib.get(&(s, top, slice)).zip(ib.get(&(s, 1, slice))).map(|(h, l)| h - l);
                    matches!((ga, gb), (Some(x), Some(y)) if x.signum() == y.signum())
                })
                .count();
            (slice, agree as f64 / states.len() as f64)
        })
        .collect();
    let sign_agreement = sign_agreement_by_slice
        .iter()
        .find(|(s, _)| *s == Slice::All)
        .or(sign_agreement_by_slice.first())
        .map(|x| x.1)
        .unwrap_or(f64::NAN);

    Ok(ComparisonReport {
        pairs,
        mean_diff,
        mean_abs_diff,
        max_abs_diff,
        smoothness_a: smoothness_diagnostic(a)?,
        smoothness_b: smoothness_diagnostic(b)?,
        sign_agreement,
        sign_agreement_by_slice,
    })
}

impl ComparisonReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["state", "income", "slice", "a", "b", "diff"])?;
        for p in &self.pairs {
            w.write_record([
                p.state.to_string(),
                p.income.to_string(),
                p.slice.label().to_string(),
                format!("{:?}", p.a),
                format!("{:?}", p.b),
                format!("{:?}", p.diff),
            ])?;
        }
        w.flush().map_err(|e| Error::io(Path::new("<comparison>"), e))?;
        Ok(())
    }

    /// Writes `comparison.json` and `comparison.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = dir.join("comparison.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join("comparison.csv");
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}
