//! Jumpiness of income curves: mean squared second difference.

use serde::{Deserialize, Serialize};

use crate::data::N_INCOME;
use crate::error::{Error, Result};
use crate::poststrat::{EstimateSeries, Slice};
use crate::states::abbreviation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveSmoothness {
    pub state: u8,
    pub slice: Slice,
    pub jumpiness: f64,
    /// Sign changes between consecutive nonzero first differences.
    pub monotone_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    pub curves: Vec<CurveSmoothness>,
    /// Weighted mean jumpiness over every (state, slice) curve.
    pub pooled: f64,
    pub pooled_by_slice: Vec<(Slice, f64)>,
    pub monotone_violations: usize,
    /// "population" when state census totals were available, else "equal".
    pub weighting: String,
}

/// `(1/3) * sum_{k=2..4} (c[k+1] - 2 c[k] + c[k-1])^2`.
pub fn curve_jumpiness(c: &[f64; N_INCOME]) -> f64 {
    (1..N_INCOME - 1)
        .map(|k| (c[k + 1] - 2.0 * c[k] + c[k - 1]).powi(2))
        .sum::<f64>()
        / (N_INCOME - 2) as f64
}

pub fn monotone_violations(c: &[f64; N_INCOME]) -> usize {
    let signs: Vec<f64> = c
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d != 0.0)
        .map(f64::signum)
        .collect();
    signs.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn smoothness_diagnostic(series: &EstimateSeries) -> Result<SmoothnessReport> {
    let states = series.states();
    let slices = series.slices();
    if states.is_empty() {
        return Err(Error::Dataset("estimate series is empty".into()));
    }
    let weight = |s: u8| -> f64 {
        series
            .state_weights
            .as_ref()
            .and_then(|w| w.get(s as usize - 1).copied())
            .unwrap_or(1.0)
    };
    let mut curves = Vec::with_capacity(states.len() * slices.len());
    for &state in &states {
        for &slice in &slices {
            let c = series.curve(state, slice).ok_or_else(|| {
                let have: Vec<u8> = series
                    .rows
                    .iter()
                    .filter(|r| r.state == state && r.slice == slice)
                    .map(|r| r.income)
                    .collect();
                let missing: Vec<u8> = (1..=N_INCOME as u8).filter(|i| !have.contains(i)).collect();
                Error::Dataset(format!(
                    "state {state} ({}) slice {} is missing income point(s) {missing:?}",
                    abbreviation(state).unwrap_or("?"),
                    slice.label()
                ))
            })?;
            curves.push(CurveSmoothness {
                state,
                slice,
                jumpiness: curve_jumpiness(&c),
                monotone_violations: monotone_violations(&c),
            });
        }
    }
    let pool = |filter: &dyn Fn(&CurveSmoothness) -> bool| -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for c in curves.iter().filter(|c| filter(c)) {
            num += weight(c.state) * c.jumpiness;
            den += weight(c.state);
        }
        num / den
    };
    let pooled_by_slice = slices.iter().map(|&s| (s, pool(&|c| c.slice == s))).collect();
    Ok(SmoothnessReport {
        pooled: pool(&|_| true),
        pooled_by_slice,
        monotone_violations: curves.iter().map(|c| c.monotone_violations).sum(),
        weighting: if series.state_weights.is_some() { "population" } else { "equal" }.into(),
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poststrat::EstimateRow;
    use proptest::prelude::*;

    fn series(curves: &[(u8, [f64; 5])]) -> EstimateSeries {
        let rows = curves
            .iter()
            .flat_map(|(s, c)| {
                c.iter().enumerate().map(move |(i, &m)| EstimateRow {
                    survey_id: "t".into(),
                    state: *s,
                    income: i as u8 + 1,
                    slice: Slice::All,
                    mean: m,
                    q25: None,
                    q75: None,
                    q025: None,
                    q975: None,
                    raw_p: None,
                    raw_n: 0,
                })
            })
            .collect();
        EstimateSeries {
            rows,
            state_weights: None,
        }
    }

    #[test]
    fn flat_and_linear_curves_are_smooth() {
        assert_eq!(curve_jumpiness(&[0.4; 5]), 0.0);
        assert!(curve_jumpiness(&[0.3, 0.35, 0.4, 0.45, 0.5]) < 1e-30);
    }

    #[test]
    fn zigzag() {
        let c = [0.3, 0.5, 0.3, 0.5, 0.3];
        assert!((curve_jumpiness(&c) - 0.16).abs() < 1e-15);
        assert_eq!(monotone_violations(&c), 3);
        assert_eq!(monotone_violations(&[0.1, 0.2, 0.2, 0.3, 0.4]), 0);
    }

    #[test]
    fn pooled_uses_population_weights() {
        let mut s = series(&[(1, [0.3, 0.5, 0.3, 0.5, 0.3]), (2, [0.5; 5])]);
        assert!((smoothness_diagnostic(&s).unwrap().pooled - 0.08).abs() < 1e-15);
        let mut w = vec![1.0; 51];
        w[0] = 3.0;
        s.state_weights = Some(w);
        let r = smoothness_diagnostic(&s).unwrap();
        assert!((r.pooled - 0.12).abs() < 1e-15);
        assert_eq!(r.weighting, "population");
    }

    #[test]
    fn missing_point_names_state() {
        let mut s = series(&[(32, [0.3, 0.5, 0.3, 0.5, 0.3])]);
        s.rows.remove(2);
        let msg = smoothness_diagnostic(&s).unwrap_err().to_string();
        assert!(msg.contains("state 32 (NY)") && msg.contains("[3]"), "{msg}");
    }

    proptest! {
        #[test]
        fn shift_invariant_and_quadratic_in_scale(c in proptest::array::uniform5(-1.0f64..1.0), shift in -5.0f64..5.0, k in 0.1f64..10.0) {
            let base = curve_jumpiness(&c);
            let shifted = curve_jumpiness(&c.map(|x| x + shift));
            prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + base));
            let scaled = curve_jumpiness(&c.map(|x| k * x));
            prop_assert!((scaled - k * k * base).abs() < 1e-9 * (1.0 + scaled));
        }
    }
}
