//! End-to-end run: ingest, fit, poststratify, figure, manifest.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_cell_table, load_survey, validate_compatibility, CellTable, SchemaConfig, SurveyDataset};
use crate::error::{Error, Result};
use crate::figure::{write_figure, FigureOptions};
use crate::inference::{fit_hmc, fit_map, fit_mmle, FitResult, SamplerConfig};
use crate::model::{FitData, ModelSpec};
use crate::poststrat::estimate_series;
use crate::replication::manifest;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Mmle,
    #[default]
    Hmc,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(Method::Map),
            "mmle" => Ok(Method::Mmle),
            "hmc" | "nuts" | "full-bayes" => Ok(Method::Hmc),
            other => Err(Error::Config(format!("unknown method \"{other}\" (map, mmle, hmc)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub method: Method,
    /// Gradient-norm tolerance for the optimizers; defaults per method.
    pub tolerance: Option<f64>,
    /// Iteration cap for MAP.
    pub max_iter: usize,
    pub sampler: SamplerConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            method: Method::Hmc,
            tolerance: None,
            max_iter: 20_000,
            sampler: SamplerConfig::default(),
        }
    }
}

impl Method {
    /// Both optimizers differentiate a Laplace objective whose inner solve
    /// leaves gradient error near 1e-6.
    pub fn default_tolerance(self) -> f64 {
        1e-5
    }
}

impl FitOptions {
    pub fn tolerance(&self) -> f64 {
        self.tolerance.unwrap_or_else(|| self.method.default_tolerance())
    }
}

/// Aggregates the survey to cell counts and fits it. Optimizers take their
/// jitter seed from the sampler config.
pub fn run_fit(data: &SurveyDataset, table: &CellTable, spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let fd = FitData::aggregate(data, table, spec)?;
    let seed = opts.sampler.seed;
    match opts.method {
        Method::Map => fit_map(&fd, spec, opts.tolerance(), opts.max_iter, seed),
        Method::Mmle => fit_mmle(&fd, spec, opts.tolerance(), seed),
        Method::Hmc => fit_hmc(&fd, spec, &opts.sampler),
    }
}

/// A pipeline run description. Relative paths resolve against the directory
/// of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub survey: PathBuf,
    pub cells: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub model_spec: Option<PathBuf>,
    #[serde(default)]
    pub sampler_config: Option<PathBuf>,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Overrides the seed in the sampler config.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub survey_id: Option<String>,
    #[serde(default)]
    pub figure: FigureOptions,
    #[serde(default)]
    pub allow_unconverged: bool,
    /// Preregistration mode: the run refuses to start unless this pre-run
    /// manifest exists and still matches its inputs.
    #[serde(default)]
    pub pre_manifest: Option<PathBuf>,
}

fn default_max_iter() -> usize {
    FitOptions::default().max_iter
}

impl PipelineConfig {
    pub fn new(survey: impl Into<PathBuf>, cells: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            survey: survey.into(),
            cells: cells.into(),
            output_dir: output_dir.into(),
            schema: None,
            model_spec: None,
            sampler_config: None,
            method: Method::default(),
            tolerance: None,
            max_iter: default_max_iter(),
            seed: None,
            survey_id: None,
            figure: FigureOptions::default(),
            allow_unconverged: false,
            pre_manifest: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.survey);
        fix(&mut cfg.cells);
        fix(&mut cfg.output_dir);
        for p in [&mut cfg.schema, &mut cfg.model_spec, &mut cfg.sampler_config, &mut cfg.pre_manifest]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn schema_config(&self) -> Result<SchemaConfig> {
        self.schema
            .as_deref()
            .map(SchemaConfig::from_json_file)
            .unwrap_or_else(|| Ok(SchemaConfig::default()))
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let spec = match &self.model_spec {
            Some(p) => ModelSpec::from_json_file(p)?,
            None => ModelSpec::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fit_options(&self) -> Result<FitOptions> {
        let mut sampler = match &self.sampler_config {
            Some(p) => SamplerConfig::from_json_file(p)?,
            None => SamplerConfig::default(),
        };
        if let Some(seed) = self.seed {
            sampler.seed = seed;
        }
        Ok(FitOptions {
            method: self.method,
            tolerance: self.tolerance,
            max_iter: self.max_iter,
            sampler,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    /// Output files in the order written, relative to `output_dir`.
    pub outputs: Vec<String>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

pub const LOCK_FILE: &str = ".mrp.lock";

struct RunDir {
    dir: PathBuf,
    written: Vec<String>,
    done: bool,
}

impl RunDir {
    fn lock(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lock = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "{} is locked by another run (remove {} if that run is gone)",
                        dir.display(),
                        lock.display()
                    ))
                } else {
                    Error::io(&lock, e)
                }
            })?;
        Ok(RunDir {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            done: false,
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.done {
            for name in &self.written {
                let _ = std::fs::remove_file(self.dir.join(name));
            }
        }
        let _ = std::fs::remove_file(self.dir.join(LOCK_FILE));
    }
}

/// Runs every stage into `cfg.output_dir`. On failure the files this run
/// wrote are removed and the error names the stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    let timestamp = None;
    run_pipeline_at(cfg, timestamp)
}

/// [`run_pipeline`] with a fixed manifest timestamp.
pub fn run_pipeline_at(cfg: &PipelineConfig, timestamp: Option<&str>) -> Result<RunSummary> {
    if let Some(pre) = &cfg.pre_manifest {
        manifest::check_pre_manifest(pre).map_err(|e| e.in_stage("manifest"))?;
    }
    let mut run = RunDir::lock(&cfg.output_dir)?;

    let (data, table) = (|| {
        let schema = cfg.schema_config()?;
        let data = load_survey(&cfg.survey, &schema)?;
        let table = load_cell_table(&cfg.cells)?;
        let report = validate_compatibility(&data, &table);
        let path = run.path("compat.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok::<_, Error>((data, table))
    })()
    .map_err(|e| e.in_stage("ingest"))?;

    let fit = (|| {
        let spec = cfg.model()?;
        let opts = cfg.fit_options()?;
        let fit = run_fit(&data, &table, &spec, &opts)?;
        run.written.extend(["fit.json".to_string(), "diagnostics.json".to_string()]);
        if fit.draws.is_some() {
            run.written.push("draws.csv".into());
        }
        fit.save(&cfg.output_dir)?;
        if !fit.converged && !cfg.allow_unconverged {
            let detail = if fit.warnings.is_empty() {
                String::new()
            } else {
                format!(": {}", fit.warnings.join("; "))
            };
            return Err(Error::Sampler(format!(
                "fit did not converge{detail} (allow_unconverged keeps the outputs)"
            )));
        }
        Ok(fit)
    })()
    .map_err(|e| e.in_stage("fit"))?;

    let series = (|| {
        let id = cfg
            .survey_id
            .clone()
            .unwrap_or_else(|| data.source_meta.survey_name.clone());
        let series = estimate_series(&fit, &table, Some(&data), &id)?;
        series.write_csv_file(&run.path("estimates.csv"))?;
        Ok::<_, Error>(series)
    })()
    .map_err(|e| e.in_stage("poststratify"))?;

    (|| {
        let svg = run.path("figure.svg");
        run.written.push("figure.csv".into());
        write_figure(&series, Some(&table), &cfg.figure, &svg)
    })()
    .map_err(|e| e.in_stage("figure"))?;

    if let Some(pre) = &cfg.pre_manifest {
        let outputs: Vec<(String, String)> = run.written.iter().map(|n| (n.clone(), n.clone())).collect();
        let out = run.path("manifest.json");
        manifest::write_post_manifest(pre, &out, &outputs, timestamp).map_err(|e| e.in_stage("manifest"))?;
    }

    run.done = true;
    Ok(RunSummary {
        output_dir: cfg.output_dir.clone(),
        outputs: run.written.clone(),
        converged: fit.converged,
        warnings: fit.warnings.clone(),
    })
}

/// Loads a survey and cell table and checks them against each other.
pub fn ingest(survey: &Path, schema: Option<&Path>, cells: &Path) -> Result<(SurveyDataset, CellTable)> {
    let schema = schema
        .map(SchemaConfig::from_json_file)
        .transpose()?
        .unwrap_or_default();
    Ok((load_survey(survey, &schema)?, load_cell_table(cells)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_cell_table_csv;
    use crate::replication::simulate::{simulate_survey, synthetic_cell_table, SyntheticConfig};

    fn inputs(dir: &Path, n: usize) -> PipelineConfig {
        let table = synthetic_cell_table(5);
        write_cell_table_csv(&table, &dir.join("cells.csv")).unwrap();
        let spec = ModelSpec::default();
        let (data, _) = simulate_survey(&SyntheticConfig::new(n, 9), &table, &spec).unwrap();
        crate::data::write_survey_csv(&data, &dir.join("survey.csv")).unwrap();
        let mut cfg = PipelineConfig::new(dir.join("survey.csv"), dir.join("cells.csv"), dir.join("out"));
        cfg.method = Method::Mmle;
        cfg
    }

    #[test]
    fn writes_all_outputs_and_releases_lock() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = inputs(dir.path(), 1500);
        let summary = run_pipeline(&cfg).unwrap();
        for f in ["compat.json", "fit.json", "diagnostics.json", "estimates.csv", "figure.svg", "figure.csv"] {
            assert!(cfg.output_dir.join(f).exists(), "{f}");
            assert!(summary.outputs.iter().any(|o| o == f));
        }
        assert!(!cfg.output_dir.join(LOCK_FILE).exists());
        assert!(!cfg.output_dir.join("draws.csv").exists());
    }

    #[test]
    fn failure_names_stage_and_cleans_up() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = inputs(dir.path(), 300);
        cfg.method = Method::Map;
        cfg.max_iter = 2;
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "fit", .. }), "{err}");
        let left: Vec<_> = std::fs::read_dir(&cfg.output_dir).unwrap().collect();
        assert!(left.is_empty(), "{left:?}");

        cfg.allow_unconverged = true;
        assert!(!run_pipeline(&cfg).unwrap().converged);
    }

    #[test]
    fn held_lock_blocks_a_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = inputs(dir.path(), 300);
        std::fs::create_dir_all(&cfg.output_dir).unwrap();
        std::fs::write(cfg.output_dir.join(LOCK_FILE), "").unwrap();
        assert!(run_pipeline(&cfg).unwrap_err().to_string().contains("locked"));
        assert!(cfg.output_dir.join(LOCK_FILE).exists());
    }

    #[test]
    fn missing_pre_manifest_stops_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = inputs(dir.path(), 300);
        cfg.pre_manifest = Some(dir.path().join("pre.json"));
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(matches!(&err, Error::Stage { stage: "manifest", source } if matches!(**source, Error::Staging(_))), "{err}");
        assert!(!cfg.output_dir.exists());
    }

    #[test]
    fn config_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"survey":"s.csv","cells":"/abs/c.csv","output_dir":"out","method":"map"}"#).unwrap();
        let cfg = PipelineConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg.survey, dir.path().join("s.csv"));
        assert_eq!(cfg.cells, PathBuf::from("/abs/c.csv"));
        assert_eq!(cfg.method, Method::Map);
        std::fs::write(&path, r#"{"survey":"s.csv","cells":"c.csv","output_dir":"o","bogus":1}"#).unwrap();
        assert!(PipelineConfig::from_json_file(&path).is_err());
    }
}
