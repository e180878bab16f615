//! Batch command-line driver: `fit`, `predict`, `accuracy` and `simulate`
//! over a JSON run configuration.
//!
//! Every output embeds the resolved configuration and master seed: JSON
//! files carry `config` and `seed` fields, CSV files start with a
//! `# saeplug ...` comment line. The output directory and thread count are
//! left out of the embedded configuration since they do not affect results.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::accuracy::{self, AccuracyConfig, BootstrapPlan, Estimator};
use crate::error::{Error, Result};
use crate::frame::{self, LongFrame, Schema};
use crate::gbt::{self, CvOutcome, GbFeatures, GbHyperparams, GbModel, SearchSpace};
use crate::lmm::{self, Covariates, LmmFit};
use crate::predictor::{self, FittedModel, PredictorSpec, ThetaSpec};
use crate::rng;
use crate::simulation::{self, McConfig, ScenarioKind, ScenarioSpec, SyntheticDesign};

#[derive(Debug, Parser)]
#[command(name = "saeplug", version, about = "Plug-in small-area prediction with bootstrap accuracy estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the configured models on the sampled rows.
    Fit(RunArgs),
    /// Plug-in predictions of every configured target.
    Predict(RunArgs),
    /// Bootstrap RMSE / QAPE estimates of every predictor and target.
    Accuracy(RunArgs),
    /// Monte Carlo study of predictors (and optionally accuracy estimators).
    Simulate(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// CSV data source. Relative paths are resolved against the configuration
/// file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub schema: Schema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    #[serde(default)]
    pub space: SearchSpace,
    #[serde(default = "default_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
}

fn default_candidates() -> usize {
    20
}

fn default_folds() -> usize {
    5
}

/// Gradient boosting: fixed hyperparameters, or a random search scored by
/// K-fold cross-validation with folds grouped by unit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbConfig {
    #[serde(default)]
    pub hyperparams: GbHyperparams,
    #[serde(default)]
    pub features: GbFeatures,
    #[serde(default)]
    pub search: Option<SearchConfig>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub lmm: Option<Covariates>,
    #[serde(default)]
    pub gb: Option<GbConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracySection {
    pub b: usize,
    pub c: usize,
    pub estimators: Vec<Estimator>,
    pub qape_orders: Vec<f64>,
    pub q_ef: f64,
    /// Model regenerating bootstrap populations; defaults to `model.lmm`.
    pub generator: Option<Covariates>,
}

impl Default for AccuracySection {
    fn default() -> Self {
        let d = AccuracyConfig::default();
        Self {
            b: d.b,
            c: d.c,
            estimators: d.estimators,
            qape_orders: d.qape_orders,
            q_ef: d.q_ef,
            generator: None,
        }
    }
}

impl AccuracySection {
    fn config(&self) -> AccuracyConfig {
        AccuracyConfig {
            b: self.b,
            c: self.c,
            estimators: self.estimators.clone(),
            qape_orders: self.qape_orders.clone(),
            q_ef: self.q_ef,
        }
    }
}

/// Where the simulation's frame and scenarios come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSource {
    /// Synthetic auxiliaries; scenarios calibrated on a reference response.
    Synthetic {
        #[serde(default)]
        design: SyntheticDesign,
        #[serde(default = "simulation::default_reference")]
        reference: ScenarioSpec,
    },
    /// Scenarios calibrated by REML on a CSV population with responses.
    Calibrate { data: DataConfig },
    /// Explicit scenarios on a CSV frame or a synthetic design.
    Explicit {
        #[serde(default)]
        data: Option<DataConfig>,
        #[serde(default)]
        design: SyntheticDesign,
        specs: Vec<ScenarioSpec>,
    },
}

impl Default for ScenarioSource {
    fn default() -> Self {
        ScenarioSource::Synthetic {
            design: SyntheticDesign::default(),
            reference: simulation::default_reference(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Monte Carlo settings; its seed is replaced by the run seed.
    pub mc: McConfig,
    pub scenarios: Vec<ScenarioKind>,
    pub source: ScenarioSource,
    /// Also run the study of bootstrap accuracy estimators.
    pub estimator_study: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            mc: McConfig::default(),
            scenarios: ScenarioKind::ALL.to_vec(),
            source: ScenarioSource::default(),
            estimator_study: false,
        }
    }
}

/// Top-level JSON configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub thetas: Vec<ThetaSpec>,
    #[serde(default)]
    pub accuracy: Option<AccuracySection>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

/// A loaded configuration with its resolution context.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Run {
    /// Load `args.config` and apply flag overrides.
    pub fn load(args: &RunArgs) -> Result<Self> {
        let text = fs::read_to_string(&args.config).map_err(|e| Error::io(&args.config, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)?;
        if let Some(seed) = args.seed {
            config.seed = seed;
        }
        let base_dir = args
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let out_dir = match (&args.out, &config.out) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => base_dir.join(o),
            (None, None) => return Err(Error::Config("no output directory (--out or \"out\")".into())),
        };
        config.out = None;
        Ok(Self {
            config,
            base_dir,
            out_dir,
        })
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn load_data(&self, data: &DataConfig) -> Result<LongFrame> {
        let path = self.resolve(&data.path);
        if !path.exists() {
            return Err(Error::io(&path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        frame::load_frame(&path, &data.schema)
    }

    fn sample_frame(&self) -> Result<LongFrame> {
        let data = self
            .config
            .data
            .as_ref()
            .ok_or_else(|| Error::Config("configuration has no data block".into()))?;
        self.load_data(data)
    }

    fn header(&self, command: &str) -> Result<String> {
        Ok(format!(
            "# saeplug {command} seed={} config={}",
            self.config.seed,
            serde_json::to_string(&self.config)?
        ))
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, value: serde_json::Value) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(&value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_csv(&self, name: &str, command: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut buf = Vec::new();
        writeln!(buf, "{}", self.header(command)?).expect("write to memory");
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header)?;
            for r in rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(name, e))?;
        }
        self.write(name, &buf)
    }
}

/// Models fitted on the sample, with GB hyperparameters resolved.
#[derive(Debug, Clone)]
pub struct FittedModels {
    pub lmm: Option<LmmFit>,
    pub gb: Option<(GbModel, GbFeatures, GbHyperparams, Option<CvOutcome>)>,
}

impl FittedModels {
    /// Predictor specifications with any tuned hyperparameters fixed.
    pub fn predictor_specs(&self) -> Vec<PredictorSpec> {
        let mut specs = Vec::new();
        if let Some(fit) = &self.lmm {
            specs.push(PredictorSpec::Lmm {
                covariates: fit.covariates.clone(),
            });
        }
        if let Some((_, features, hp, _)) = &self.gb {
            specs.push(PredictorSpec::Gb {
                hyperparams: hp.clone(),
                features: features.clone(),
            });
        }
        specs
    }

    pub fn models(&self) -> Vec<FittedModel> {
        let mut out = Vec::new();
        if let Some(fit) = &self.lmm {
            out.push(FittedModel::Lmm(fit.clone()));
        }
        if let Some((model, features, _, _)) = &self.gb {
            out.push(FittedModel::Gb {
                model: model.clone(),
                features: features.clone(),
            });
        }
        out
    }
}

/// Unit index of every row, for grouping CV folds by unit.
fn unit_groups(frame: &LongFrame, rows: &[usize]) -> Vec<usize> {
    let mut ids = std::collections::BTreeMap::new();
    rows.iter()
        .map(|&i| {
            let r = &frame.rows()[i];
            let next = ids.len();
            *ids.entry((r.domain.clone(), r.unit.clone())).or_insert(next)
        })
        .collect()
}

/// Fit the configured models on `frame`'s sampled rows.
pub fn fit_models(model: &ModelConfig, frame: &LongFrame, seed: u64) -> Result<FittedModels> {
    if model.lmm.is_none() && model.gb.is_none() {
        return Err(Error::Config("no model configured (model.lmm or model.gb)".into()));
    }
    let lmm = model
        .lmm
        .as_ref()
        .map(|c| lmm::fit_reml(frame, c))
        .transpose()?;
    let gb = match &model.gb {
        None => None,
        Some(cfg) => {
            let (x, names) = cfg.features.matrix(frame)?;
            let rows = frame.sampled_indices();
            let x_s = x.select_rows(&rows);
            let y_s = frame.sampled_responses();
            let (hp, cv) = match &cfg.search {
                None => (cfg.hyperparams.clone(), None),
                Some(search) => {
                    search.space.validate()?;
                    let candidates = gbt::random_search(
                        &search.space,
                        search.n_candidates,
                        rng::derive_seed(seed, "gb-search", &[]),
                    )?;
                    let cv = gbt::tune_cv(
                        &x_s,
                        &y_s,
                        &unit_groups(frame, &rows),
                        &names,
                        &candidates,
                        search.n_folds,
                        rng::derive_seed(seed, "gb-cv", &[]),
                    )?;
                    (cv.best.clone(), Some(cv))
                }
            };
            let model = gbt::fit_gb(&x_s, &y_s, &names, &hp, rng::derive_seed(seed, "gb-final", &[]))?;
            Some((model, cfg.features.clone(), hp, cv))
        }
    };
    Ok(FittedModels { lmm, gb })
}

fn fmt_opt(p: Option<f64>) -> String {
    p.map(|v| v.to_string()).unwrap_or_default()
}

pub fn cmd_fit(run: &Run) -> Result<Vec<PathBuf>> {
    let frame = run.sample_frame()?;
    let seed = run.config.seed;
    let fitted = fit_models(&run.config.model, &frame, seed)?;
    let mut written = Vec::new();
    let mut report = json!({
        "config": run.config,
        "seed": seed,
        "n_rows": frame.n_rows(),
        "n_sampled": frame.n_sampled(),
    });
    if let Some(fit) = &fitted.lmm {
        written.push(run.write_json("lmm_fit.json", json!({ "config": run.config, "seed": seed, "fit": fit }))?);
        report["lmm"] = json!({
            "beta_names": fit.beta_names,
            "beta": fit.beta,
            "sigma2_u": fit.sigma2_u,
            "sigma2_e": fit.sigma2_e,
            "reml_loglik": fit.reml_loglik,
            "converged": fit.converged,
            "iterations": fit.iterations,
        });
    }
    if let Some((model, features, hp, cv)) = &fitted.gb {
        written.push(run.write_json(
            "gb_model.json",
            json!({ "config": run.config, "seed": seed, "features": features, "model": model }),
        )?);
        report["gb"] = json!({
            "hyperparams": hp,
            "n_trees": model.trees.len(),
            "cv": cv,
        });
    }
    written.push(run.write_json("fit_report.json", report)?);
    Ok(written)
}

pub fn cmd_predict(run: &Run) -> Result<Vec<PathBuf>> {
    if run.config.thetas.is_empty() {
        return Err(Error::Config("no targets configured (thetas)".into()));
    }
    let frame = run.sample_frame()?;
    let fitted = fit_models(&run.config.model, &frame, run.config.seed)?;
    let mut rows = Vec::new();
    for model in fitted.models() {
        let values = model.fitted_unobserved(&frame)?;
        let composed = predictor::compose_population(&frame, &values)?;
        for spec in &run.config.thetas {
            let theta = predictor::characteristic(spec, &composed, &spec.mask(&frame)?)?;
            rows.push(vec![
                model.kind().label().to_string(),
                spec.statistic.name().to_string(),
                fmt_opt(spec.statistic.order()),
                spec.domain.to_string(),
                spec.period.to_string(),
                theta.to_string(),
            ]);
        }
    }
    let path = run.write_csv(
        "predictions.csv",
        "predict",
        &["predictor", "statistic", "p", "domain", "period", "theta_hat"],
        &rows,
    )?;
    Ok(vec![path])
}

pub fn cmd_accuracy(run: &Run) -> Result<Vec<PathBuf>> {
    if run.config.thetas.is_empty() {
        return Err(Error::Config("no targets configured (thetas)".into()));
    }
    let section = run.config.accuracy.clone().unwrap_or_default();
    let acc = section.config();
    acc.validate()?;
    let frame = run.sample_frame()?;
    let seed = run.config.seed;
    let fitted = fit_models(&run.config.model, &frame, rng::derive_seed(seed, "fit", &[]))?;
    let generator = section
        .generator
        .clone()
        .or_else(|| run.config.model.lmm.clone())
        .ok_or_else(|| Error::Config("accuracy needs accuracy.generator or model.lmm".into()))?;
    let plan = BootstrapPlan::new(
        &frame,
        &frame.sample_flags(),
        &generator,
        &fitted.predictor_specs(),
        &run.config.thetas,
    )?;
    let gen = plan.fit_generator(&frame.sampled_responses())?;
    if !gen.converged {
        return Err(Error::Bootstrap("generating model fit did not converge".into()));
    }
    let est = accuracy::estimate_accuracy(&plan, &gen, &acc, rng::derive_seed(seed, "accuracy", &[]))?;
    let label = |c: &accuracy::AccuracyCell| format!("{} {}", c.predictor.label(), c.theta);
    let cells: Vec<serde_json::Value> = est
        .cells
        .iter()
        .map(|c| {
            json!({
                "predictor": label(c),
                "kind": c.predictor.label(),
                "theta": c.theta,
                "estimator": c.estimator,
                "measure": c.measure,
                "p": c.p,
                "value": c.value,
            })
        })
        .collect();
    let json_path = run.write_json(
        "accuracy.json",
        json!({
            "config": run.config,
            "seed": seed,
            "B": acc.b,
            "C": acc.c,
            "failures": est.failures,
            "negative_mse": est.negative_mse,
            "correction_skipped": est.correction_skipped,
            "cells": cells,
        }),
    )?;
    let rows: Vec<Vec<String>> = est
        .cells
        .iter()
        .map(|c| {
            vec![
                label(c),
                c.estimator.name().to_string(),
                c.measure.clone(),
                fmt_opt(c.p),
                c.value.to_string(),
                acc.b.to_string(),
                acc.c.to_string(),
                seed.to_string(),
            ]
        })
        .collect();
    let csv_path = run.write_csv(
        "accuracy.csv",
        "accuracy",
        &["predictor", "estimator", "measure", "p", "value", "B", "C", "seed"],
        &rows,
    )?;
    if est.correction_skipped {
        eprintln!("warning: residual-bootstrap correction skipped (zero-spread pool)");
    }
    Ok(vec![json_path, csv_path])
}

/// Frame and scenario specifications for a simulation run.
pub fn resolve_scenarios(run: &Run, sim: &SimulationConfig) -> Result<(LongFrame, Vec<ScenarioSpec>)> {
    let seed = run.config.seed;
    let (frame, available) = match &sim.source {
        ScenarioSource::Synthetic { design, reference } => simulation::desk_setup(design, reference, seed)?,
        ScenarioSource::Calibrate { data } => {
            let population = run.load_data(data)?;
            let specs = simulation::calibrate_scenarios(&population, &simulation::default_lmm_columns())?;
            (population, specs)
        }
        ScenarioSource::Explicit { data, design, specs } => {
            let frame = match data {
                Some(d) => run.load_data(d)?,
                None => simulation::synthetic_frame(design, rng::derive_seed(seed, "desk-frame", &[]))?,
            };
            (frame, specs.clone())
        }
    };
    let specs = sim
        .scenarios
        .iter()
        .map(|k| {
            available
                .iter()
                .find(|s| s.kind == *k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("scenario {k} not available from the source")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frame, specs))
}

pub fn cmd_simulate(run: &Run) -> Result<Vec<PathBuf>> {
    let sim = run.config.simulation.clone().unwrap_or_default();
    if sim.scenarios.is_empty() {
        return Err(Error::Config("no scenarios requested".into()));
    }
    let mc = McConfig {
        seed: run.config.seed,
        ..sim.mc.clone()
    };
    let (frame, specs) = resolve_scenarios(run, &sim)?;
    let mut pred_rows = Vec::new();
    let mut est_rows = Vec::new();
    let mut summary = Vec::new();
    for spec in &specs {
        let study = simulation::mc_predictors(&mc, spec, &frame)?;
        for r in &study.rows {
            let name = format!("{} {}", r.predictor.label(), r.theta);
            let m = &r.measures;
            let mut push = |measure: &str, p: Option<f64>, v: f64| {
                pred_rows.push(vec![
                    spec.kind.name().to_string(),
                    name.clone(),
                    measure.to_string(),
                    fmt_opt(p),
                    v.to_string(),
                ]);
            };
            push("rB", None, m.rb);
            push("rRMSE", None, m.rrmse);
            push("RMSE", None, m.rmse);
            for &(p, q) in &m.qape {
                push("QAPE", Some(p), q);
            }
        }
        let mut entry = json!({ "scenario": spec, "predictor_failures": study.failures });
        if sim.estimator_study {
            let est = simulation::mc_accuracy_estimators(&mc, spec, &frame)?;
            for r in &est.rows {
                est_rows.push(vec![
                    spec.kind.name().to_string(),
                    format!("{} {}", r.predictor.label(), r.theta),
                    r.estimator.name().to_string(),
                    r.measure.clone(),
                    fmt_opt(r.p),
                    r.truth.to_string(),
                    r.mean_estimate.to_string(),
                    r.rb.to_string(),
                    r.rrmse.to_string(),
                ]);
            }
            entry["estimator_failures"] = json!(est.failures);
            entry["negative_mse"] = json!(est.negative_mse);
            entry["corrections_skipped"] = json!(est.corrections_skipped);
        }
        summary.push(entry);
    }
    let mut written = vec![run.write_csv(
        "sim_predictors.csv",
        "simulate",
        &["scenario", "predictor", "measure", "p", "value"],
        &pred_rows,
    )?];
    if sim.estimator_study {
        written.push(run.write_csv(
            "sim_estimators.csv",
            "simulate",
            &["scenario", "predictor", "estimator", "measure", "p", "truth", "mean_estimate", "rB", "rRMSE"],
            &est_rows,
        )?);
    }
    written.push(run.write_json(
        "sim_report.json",
        json!({ "config": run.config, "seed": run.config.seed, "scenarios": summary }),
    )?);
    Ok(written)
}

/// Execute a parsed command line, returning the files written.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    type Cmd = fn(&Run) -> Result<Vec<PathBuf>>;
    let (args, cmd): (&RunArgs, Cmd) = match &cli.command {
        Command::Fit(a) => (a, cmd_fit),
        Command::Predict(a) => (a, cmd_predict),
        Command::Accuracy(a) => (a, cmd_accuracy),
        Command::Simulate(a) => (a, cmd_simulate),
    };
    let run = Run::load(args)?;
    match args.threads {
        None => cmd(&run),
        Some(0) => Err(Error::Config("--threads must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| cmd(&run)),
    }
}
