//! C ABI over the mrp engine.
//!
//! Objects cross the boundary as opaque handles released with the matching
//! `*_free`. Every fallible call returns an [`MrpStatus`]; on failure the
//! message is available from [`mrp_last_error`] on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mrp::data::{load_cell_table, CellTable, SurveyDataset};
use mrp::inference::{FitResult, SamplerConfig};
use mrp::model::ModelSpec;
use mrp::pipeline::{ingest, run_fit, FitOptions, Method};
use mrp::poststrat::{estimate_series, query_draws, EstimateSeries, Slice, SubsetQuery};
use mrp::replication::simulate::{simulate_survey, synthetic_cell_table, SyntheticConfig};
use mrp::Error;

pub struct MrpCells(CellTable);
pub struct MrpSurvey(SurveyDataset);
pub struct MrpFit(FitResult);
pub struct MrpSeries(EstimateSeries);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidInput = 5,
    Query = 6,
    FitFailed = 7,
    NotConverged = 8,
    Integrity = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MrpMethod {
    Map = 0,
    Mmle = 1,
    Hmc = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MrpSamplerSettings {
    pub chains: u32,
    pub warmup: u32,
    pub samples: u32,
    pub target_accept: f64,
    pub max_tree_depth: u32,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MrpStatus {
    match e {
        Error::Io { .. } => MrpStatus::Io,
        Error::Csv(_) | Error::Json(_) | Error::Schema(_) | Error::Row { .. } => MrpStatus::Parse,
        Error::Query(_) => MrpStatus::Query,
        Error::Optimization { .. } | Error::Sampler(_) => MrpStatus::FitFailed,
        Error::Integrity(_) | Error::Staging(_) => MrpStatus::Integrity,
        Error::Stage { source, .. } => status_of(source),
        _ => MrpStatus::InvalidInput,
    }
}

struct Fail(MrpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MrpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MrpStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail(MrpStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Fail(MrpStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(MrpStatus::NullArgument, format!("{name} is null")))
}

fn out_ptr<T>(out: *mut T, name: &str) -> Result<(), Fail> {
    if out.is_null() {
        Err(Fail(MrpStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Engine version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrp_version() -> *const c_char {
    concat!("mrp ", env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn mrp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn mrp_sampler_defaults() -> MrpSamplerSettings {
    let d = SamplerConfig::default();
    MrpSamplerSettings {
        chains: d.chains as u32,
        warmup: d.warmup as u32,
        samples: d.samples as u32,
        target_accept: d.target_accept,
        max_tree_depth: d.max_tree_depth as u32,
        seed: d.seed,
    }
}

#[no_mangle]
pub unsafe extern "C" fn mrp_cells_load(path: *const c_char, out: *mut *mut MrpCells) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let table = load_cell_table(&path_arg(path, "path")?)?;
        *out = boxed(MrpCells(table));
        Ok(())
    })
}

/// A synthetic census table with whole-number cell counts.
#[no_mangle]
pub unsafe extern "C" fn mrp_cells_synthetic(seed: u64, out: *mut *mut MrpCells) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = boxed(MrpCells(synthetic_cell_table(seed)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_cells_free(cells: *mut MrpCells) {
    if !cells.is_null() {
        drop(Box::from_raw(cells));
    }
}

/// `schema_path` may be null for the default column layout.
#[no_mangle]
pub unsafe extern "C" fn mrp_survey_load(
    path: *const c_char,
    schema_path: *const c_char,
    cells_path: *const c_char,
    out: *mut *mut MrpSurvey,
) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let schema = if schema_path.is_null() {
            None
        } else {
            Some(path_arg(schema_path, "schema_path")?)
        };
        let (data, _) = ingest(&path_arg(path, "path")?, schema.as_deref(), &path_arg(cells_path, "cells_path")?)?;
        *out = boxed(MrpSurvey(data));
        Ok(())
    })
}

/// Simulates `n` respondents from a truth generated with `seed`.
#[no_mangle]
pub unsafe extern "C" fn mrp_survey_simulate(
    cells: *const MrpCells,
    n: usize,
    seed: u64,
    bias_scale: f64,
    out: *mut *mut MrpSurvey,
) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cells = handle(cells, "cells")?;
        let mut cfg = SyntheticConfig::new(n, seed);
        cfg.bias_scale = bias_scale;
        let (data, _) = simulate_survey(&cfg, &cells.0, &ModelSpec::default())?;
        *out = boxed(MrpSurvey(data));
        Ok(())
    })
}

/// Respondent count, or 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mrp_survey_len(survey: *const MrpSurvey) -> usize {
    survey.as_ref().map_or(0, |s| s.0.n())
}

#[no_mangle]
pub unsafe extern "C" fn mrp_survey_free(survey: *mut MrpSurvey) {
    if !survey.is_null() {
        drop(Box::from_raw(survey));
    }
}

/// Fits the default model. `settings` may be null for the defaults;
/// `tolerance <= 0` picks the method default. A fit that finishes without
/// converging is still returned through `out`, with status `NotConverged`.
#[no_mangle]
pub unsafe extern "C" fn mrp_fit(
    survey: *const MrpSurvey,
    cells: *const MrpCells,
    method: MrpMethod,
    settings: *const MrpSamplerSettings,
    tolerance: f64,
    out: *mut *mut MrpFit,
) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let survey = handle(survey, "survey")?;
        let cells = handle(cells, "cells")?;
        let s = settings.as_ref().copied().unwrap_or_else(|| mrp_sampler_defaults());
        let opts = FitOptions {
            method: match method {
                MrpMethod::Map => Method::Map,
                MrpMethod::Mmle => Method::Mmle,
                MrpMethod::Hmc => Method::Hmc,
            },
            tolerance: (tolerance > 0.0).then_some(tolerance),
            sampler: SamplerConfig {
                chains: s.chains as usize,
                warmup: s.warmup as usize,
                samples: s.samples as usize,
                target_accept: s.target_accept,
                max_tree_depth: s.max_tree_depth as usize,
                seed: s.seed,
            },
            ..Default::default()
        };
        let fit = run_fit(&survey.0, &cells.0, &ModelSpec::default(), &opts)?;
        let converged = fit.converged;
        let warnings = fit.warnings.join("; ");
        *out = boxed(MrpFit(fit));
        if converged {
            Ok(())
        } else {
            Err(Fail(MrpStatus::NotConverged, format!("fit did not converge: {warnings}")))
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_fit_converged(fit: *const MrpFit) -> bool {
    fit.as_ref().is_some_and(|f| f.0.converged)
}

/// Writes fit.json, diagnostics.json and (full Bayes) draws.csv into `dir`.
#[no_mangle]
pub unsafe extern "C" fn mrp_fit_save(fit: *const MrpFit, dir: *const c_char) -> MrpStatus {
    guard(|| {
        let fit = handle(fit, "fit")?;
        let dir = path_arg(dir, "dir")?;
        std::fs::create_dir_all(&dir).map_err(|e| Fail(MrpStatus::Io, format!("{}: {e}", dir.display())))?;
        fit.0.save(&dir)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_fit_free(fit: *mut MrpFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// The 510 state by income by slice estimates. `survey` may be null, which
/// leaves the raw columns empty.
#[no_mangle]
pub unsafe extern "C" fn mrp_estimate(
    fit: *const MrpFit,
    cells: *const MrpCells,
    survey: *const MrpSurvey,
    out: *mut *mut MrpSeries,
) -> MrpStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let fit = handle(fit, "fit")?;
        let cells = handle(cells, "cells")?;
        let data = survey.as_ref().map(|s| &s.0);
        let id = data.map_or("survey", |d| d.source_meta.survey_name.as_str());
        *out = boxed(MrpSeries(estimate_series(&fit.0, &cells.0, data, id)?));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_series_len(series: *const MrpSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.rows.len())
}

/// Mean estimate for one state, income and slice (`white_only` selects the
/// white slice).
#[no_mangle]
pub unsafe extern "C" fn mrp_series_get(
    series: *const MrpSeries,
    state: u8,
    income: u8,
    white_only: bool,
    out_mean: *mut f64,
) -> MrpStatus {
    guard(|| {
        out_ptr(out_mean, "out_mean")?;
        let series = handle(series, "series")?;
        let slice = if white_only { Slice::White } else { Slice::All };
        let row = series.0.get(state, income, slice).ok_or_else(|| {
            Fail(
                MrpStatus::Query,
                format!("no estimate for state {state}, income {income}, {}", slice.label()),
            )
        })?;
        *out_mean = row.mean;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_series_write_csv(series: *const MrpSeries, path: *const c_char) -> MrpStatus {
    guard(|| {
        let series = handle(series, "series")?;
        series.0.write_csv_file(&path_arg(path, "path")?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mrp_series_free(series: *mut MrpSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Poststratified estimate for an arbitrary subset. A level of 0 leaves that
/// factor free. For point fits all three outputs equal the point value;
/// otherwise `out_lo` and `out_hi` bound the central 95% interval. `out_lo`
/// and `out_hi` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mrp_query(
    fit: *const MrpFit,
    cells: *const MrpCells,
    income: u8,
    age: u8,
    ethnicity: u8,
    state: u8,
    white_only: bool,
    out_mean: *mut f64,
    out_lo: *mut f64,
    out_hi: *mut f64,
) -> MrpStatus {
    guard(|| {
        out_ptr(out_mean, "out_mean")?;
        let fit = handle(fit, "fit")?;
        let cells = handle(cells, "cells")?;
        let level = |v: u8| (v != 0).then_some(v);
        let q = SubsetQuery {
            income: level(income),
            age: level(age),
            ethnicity: level(ethnicity),
            state: level(state),
            slice: if white_only { Slice::White } else { Slice::All },
        };
        let est = query_draws(&fit.0, &cells.0, &q)?;
        *out_mean = est.mean();
        if let Some(lo) = out_lo.as_mut() {
            *lo = est.quantile(0.025);
        }
        if let Some(hi) = out_hi.as_mut() {
            *hi = est.quantile(0.975);
        }
        Ok(())
    })
}
