use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mrp::data::{load_cell_table, validate_compatibility, write_cell_table_csv, write_survey_csv, CompatStatus};
use mrp::figure::{write_figure, FigureOptions, PanelOrder};
use mrp::inference::FitResult;
use mrp::model::ModelSpec;
use mrp::pipeline::{ingest, run_fit, run_pipeline, Method, PipelineConfig};
use mrp::poststrat::{estimate_series, EstimateSeries, Slice};
use mrp::replication::compare::compare_runs;
use mrp::replication::manifest::{verify_manifest, write_post_manifest, write_pre_manifest, PreInputs};
use mrp::replication::simulate::{
    default_truth_sigma, preset_n, simulate_survey, synthetic_cell_table, SyntheticConfig, Truth,
};
use mrp::states::StateFilter;
use mrp::{Error, Result};

#[derive(Parser)]
#[command(name = "mrp", version, about = "Multilevel regression and poststratification of vote choice by income and state")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a survey against a cell table; write the canonical survey CSV and a compatibility report.
    Ingest {
        #[arg(long)]
        survey: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        cells: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit the model and write fit.json, diagnostics.json and draws.csv.
    Fit(FitArgs),
    /// Poststratify a saved fit to per state, income and slice estimates.
    Poststratify {
        #[arg(long)]
        fit_dir: PathBuf,
        #[arg(long)]
        cells: PathBuf,
        /// Survey for the raw proportions column.
        #[arg(long)]
        survey: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value = "survey")]
        survey_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw the state-grid figure (SVG plus CSV) from an estimates CSV.
    Figure {
        #[arg(long)]
        estimates: PathBuf,
        /// Cell table, for ordering panels by previous vote share.
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// all-51, states-50 or contiguous-48.
        #[arg(long, default_value = "all-51")]
        filter: StateFilter,
        #[arg(long, value_delimiter = ',', default_value = "all,white")]
        slices: Vec<Slice>,
        #[arg(long)]
        title: Option<String>,
    },
    /// Simulate a survey with known truth.
    Simulate {
        /// Cell table; defaults to a synthetic table built from --cells-seed.
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        cells_seed: u64,
        /// pew2008-scale or annenberg2004-scale.
        #[arg(long, conflicts_with = "n")]
        preset: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, env = "MRP_SEED", default_value_t = 1)]
        seed: u64,
        /// Sd of the per-cell nonresponse bias on the logit scale.
        #[arg(long, default_value_t = 0.0)]
        bias_scale: f64,
        /// Batch names whose true sd is set to zero.
        #[arg(long, value_delimiter = ',')]
        zero_batch: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare two estimate CSVs.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Cell table for population-weighted pooling.
        #[arg(long)]
        cells: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Preregistration manifests.
    #[command(subcommand)]
    Manifest(ManifestCommand),
    /// Run the whole pipeline from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long, env = "MRP_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        allow_unconverged: bool,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Pipeline config JSON supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    survey: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    cells: Option<PathBuf>,
    #[arg(long)]
    model_spec: Option<PathBuf>,
    #[arg(long)]
    sampler_config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long, env = "MRP_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    target_accept: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    allow_unconverged: bool,
}

#[derive(Subcommand)]
enum ManifestCommand {
    /// Hash config (and optionally data) files before a run.
    Pre {
        /// label=path, repeatable.
        #[arg(long = "input", required = true, value_parser = parse_labelled)]
        inputs: Vec<(String, String)>,
        #[arg(long = "data", value_parser = parse_labelled)]
        data: Vec<(String, String)>,
        #[arg(long, default_value = "")]
        statement: String,
        #[arg(long)]
        timestamp: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extend a pre-run manifest with output hashes.
    Post {
        #[arg(long)]
        pre: PathBuf,
        #[arg(long = "output", value_parser = parse_labelled)]
        outputs: Vec<(String, String)>,
        #[arg(long)]
        timestamp: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recheck every hash in a post-run manifest.
    Verify { manifest: PathBuf },
}

fn parse_labelled(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((l, p)) if !l.is_empty() && !p.is_empty() => Ok((l.to_string(), p.to_string())),
        _ => Ok((
            Path::new(s)
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .ok_or_else(|| format!("expected label=path, got \"{s}\""))?,
            s.to_string(),
        )),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn fit_command(a: FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| {
                v.clone()
                    .ok_or_else(|| Error::Config(format!("--{flag} is required without --config")))
            };
            PipelineConfig::new(need(&a.survey, "survey")?, need(&a.cells, "cells")?, need(&a.out_dir, "out-dir")?)
        }
    };
    if let Some(v) = a.survey {
        cfg.survey = v;
    }
    if let Some(v) = a.cells {
        cfg.cells = v;
    }
    if let Some(v) = a.out_dir {
        cfg.output_dir = v;
    }
    if a.schema.is_some() {
        cfg.schema = a.schema;
    }
    if a.model_spec.is_some() {
        cfg.model_spec = a.model_spec;
    }
    if a.sampler_config.is_some() {
        cfg.sampler_config = a.sampler_config;
    }
    if let Some(m) = a.method {
        cfg.method = m;
    }
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if a.tolerance.is_some() {
        cfg.tolerance = a.tolerance;
    }
    if let Some(m) = a.max_iter {
        cfg.max_iter = m;
    }
    let mut opts = cfg.fit_options()?;
    if let Some(v) = a.chains {
        opts.sampler.chains = v;
    }
    if let Some(v) = a.warmup {
        opts.sampler.warmup = v;
    }
    if let Some(v) = a.samples {
        opts.sampler.samples = v;
    }
    if let Some(v) = a.target_accept {
        opts.sampler.target_accept = v;
    }
    opts.sampler.validate()?;

    let (data, table) = ingest(&cfg.survey, cfg.schema.as_deref(), &cfg.cells)?;
    let spec = cfg.model()?;
    let fit = run_fit(&data, &table, &spec, &opts)?;
    mkdir(&cfg.output_dir)?;
    fit.save(&cfg.output_dir)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{:?} fit of {} respondents in {:.1}s, converged: {}",
        fit.kind,
        data.n(),
        fit.elapsed.as_secs_f64(),
        fit.converged
    );
    if !fit.converged && !a.allow_unconverged {
        return Err(Error::Sampler("fit did not converge (pass --allow-unconverged to accept it)".into()));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            survey,
            schema,
            cells,
            out_dir,
        } => {
            let (data, table) = ingest(&survey, schema.as_deref(), &cells)?;
            let report = validate_compatibility(&data, &table);
            mkdir(&out_dir)?;
            write_survey_csv(&data, &out_dir.join("survey.csv"))?;
            write_json(&out_dir.join("compat.json"), &report)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} respondents kept, {} undecided dropped, {} malformed dropped; compatibility {}",
                data.n(),
                data.source_meta.dropped_undecided,
                data.source_meta.dropped_malformed,
                if report.status == CompatStatus::Pass { "pass" } else { "warn" }
            );
        }
        Command::Fit(a) => fit_command(a)?,
        Command::Poststratify {
            fit_dir,
            cells,
            survey,
            schema,
            survey_id,
            out,
        } => {
            let fit = FitResult::load(&fit_dir)?;
            let table = load_cell_table(&cells)?;
            let data = match survey {
                Some(s) => Some(ingest(&s, schema.as_deref(), &cells)?.0),
                None => None,
            };
            let series = estimate_series(&fit, &table, data.as_ref(), &survey_id)?;
            series.write_csv_file(&out)?;
            println!("{} estimates written to {}", series.rows.len(), out.display());
        }
        Command::Figure {
            estimates,
            cells,
            out,
            filter,
            slices,
            title,
        } => {
            let series = EstimateSeries::read_csv_file(&estimates)?;
            let table = cells.as_deref().map(load_cell_table).transpose()?;
            let opts = FigureOptions {
                filter,
                slices,
                order: if table.is_some() {
                    PanelOrder::PreviousShare
                } else {
                    PanelOrder::StateIndex
                },
                title,
                ..Default::default()
            };
            write_figure(&series, table.as_ref(), &opts, &out)?;
            println!("{} and {}", out.display(), out.with_extension("csv").display());
        }
        Command::Simulate {
            cells,
            cells_seed,
            preset,
            n,
            seed,
            bias_scale,
            zero_batch,
            out_dir,
        } => {
            mkdir(&out_dir)?;
            let table = match &cells {
                Some(p) => load_cell_table(p)?,
                None => {
                    let t = synthetic_cell_table(cells_seed);
                    write_cell_table_csv(&t, &out_dir.join("cells.csv"))?;
                    t
                }
            };
            let spec = ModelSpec::default();
            let n = match (preset.as_deref(), n) {
                (Some(p), _) => preset_n(p)?,
                (None, Some(n)) => n,
                (None, None) => return Err(Error::Config("give --preset or --n".into())),
            };
            let mut config = SyntheticConfig::new(n, seed);
            if let Some(p) = &preset {
                config.survey_name = p.clone();
            }
            config.bias_scale = bias_scale;
            if !zero_batch.is_empty() {
                let mut sigma = default_truth_sigma(&spec);
                for name in &zero_batch {
                    let b = spec
                        .batch_index(name)
                        .ok_or_else(|| Error::Config(format!("no batch named \"{name}\"")))?;
                    sigma[b] = 0.0;
                }
                config.truth = Truth::Generated {
                    seed,
                    sigma: Some(sigma),
                };
            }
            let (data, truth) = simulate_survey(&config, &table, &spec)?;
            write_survey_csv(&data, &out_dir.join("survey.csv"))?;
            truth.series.write_csv_file(&out_dir.join("truth.csv"))?;
            write_json(&out_dir.join("truth.json"), &truth.params)?;
            write_json(&out_dir.join("simulation.json"), &config)?;
            println!("{} respondents simulated into {}", data.n(), out_dir.display());
        }
        Command::Compare { a, b, cells, out_dir } => {
            let mut sa = EstimateSeries::read_csv_file(&a)?;
            let mut sb = EstimateSeries::read_csv_file(&b)?;
            if let Some(c) = cells {
                let table = load_cell_table(&c)?;
                sa = sa.with_state_weights(&table);
                sb = sb.with_state_weights(&table);
            }
            let report = compare_runs(&sa, &sb)?;
            mkdir(&out_dir)?;
            report.save(&out_dir)?;
            println!(
                "mean |b - a| {:.4}, max {:.4}, sign agreement {:.3}, pooled jumpiness {:.3e} vs {:.3e}",
                report.mean_abs_diff,
                report.max_abs_diff,
                report.sign_agreement,
                report.smoothness_a.pooled,
                report.smoothness_b.pooled
            );
        }
        Command::Manifest(m) => match m {
            ManifestCommand::Pre {
                inputs,
                data,
                statement,
                timestamp,
                out,
            } => {
                let pre = PreInputs {
                    configs: inputs,
                    data,
                    statement,
                };
                write_pre_manifest(&out, &pre, timestamp.as_deref())?;
                println!("{}", out.display());
            }
            ManifestCommand::Post {
                pre,
                outputs,
                timestamp,
                out,
            } => {
                write_post_manifest(&pre, &out, &outputs, timestamp.as_deref())?;
                println!("{}", out.display());
            }
            ManifestCommand::Verify { manifest } => {
                let report = verify_manifest(&manifest)?;
                for m in &report.mismatches {
                    eprintln!("mismatch: {}: expected {}, found {}", m.label, m.expected, m.found);
                }
                let checked = report.checked;
                report.into_result()?;
                println!("{checked} entries verified");
            }
        },
        Command::Run {
            config,
            method,
            seed,
            output_dir,
            allow_unconverged,
        } => {
            let mut cfg = PipelineConfig::from_json_file(&config)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if seed.is_some() {
                cfg.seed = seed;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            cfg.allow_unconverged |= allow_unconverged;
            let summary = run_pipeline(&cfg)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} files written to {}", summary.outputs.len(), summary.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

