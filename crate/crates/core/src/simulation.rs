//! Monte Carlo harness: the LM / NLM scenario generators, a synthetic
//! auxiliary generator, and the studies of predictor accuracy and of
//! bootstrap accuracy-estimator quality.
//!
//! The panel sample is drawn once per run and held fixed; every iteration
//! regenerates the whole population (so the target `θ(k)` changes with `k`)
//! and refits every predictor on the same generated sample.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accuracy::{self, AccuracyConfig, BootstrapPlan, Estimator};
use crate::error::{Error, Result};
use crate::frame::{self, LongFrame, UnitRecord};
use crate::gbt::{GbFeatures, GbHyperparams};
use crate::lmm::{self, Covariates, RemlProblem};
use crate::predictor::{Layout, PredictorKind, PredictorSpec, PreparedPredictor, ResolvedTheta, Statistic, ThetaSpec};
use crate::rng;
use crate::stats;

/// Redraws allowed per Monte Carlo iteration.
pub const MAX_ITERATION_ATTEMPTS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "NLM1")]
    Nlm1,
    #[serde(rename = "NLM10")]
    Nlm10,
    #[serde(rename = "NLM20")]
    Nlm20,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [
        ScenarioKind::Lm,
        ScenarioKind::Nlm1,
        ScenarioKind::Nlm10,
        ScenarioKind::Nlm20,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Lm => "LM",
            ScenarioKind::Nlm1 => "NLM1",
            ScenarioKind::Nlm10 => "NLM10",
            ScenarioKind::Nlm20 => "NLM20",
        }
    }

    /// Standard-deviation divisor `a`.
    pub fn divisor(&self) -> f64 {
        match self {
            ScenarioKind::Lm | ScenarioKind::Nlm1 => 1.0,
            ScenarioKind::Nlm10 => 10.0,
            ScenarioKind::Nlm20 => 20.0,
        }
    }

    pub fn is_linear(&self) -> bool {
        *self == ScenarioKind::Lm
    }

    /// Number of fixed-effect terms (3 linear, or 3 logs and 3 products).
    pub fn n_terms(&self) -> usize {
        if self.is_linear() {
            3
        } else {
            6
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The auxiliaries named `x1`, `x4`, `x7`.
pub fn default_lmm_columns() -> [String; 3] {
    ["x1".into(), "x4".into(), "x7".into()]
}

/// Data-generating scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub beta_pop: Vec<f64>,
    pub sigma2_u_pop: f64,
    pub sigma2_e_pop: f64,
    pub a: f64,
    /// Frame auxiliaries playing the roles of `x1`, `x4`, `x7`.
    #[serde(default = "default_lmm_columns")]
    pub columns: [String; 3],
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.a != self.kind.divisor() {
            return Err(Error::Config(format!(
                "scenario {} requires a = {}, got {}",
                self.kind,
                self.kind.divisor(),
                self.a
            )));
        }
        if self.beta_pop.len() != self.kind.n_terms() {
            return Err(Error::Config(format!(
                "scenario {} needs {} coefficients, got {}",
                self.kind,
                self.kind.n_terms(),
                self.beta_pop.len()
            )));
        }
        if !(self.sigma2_u_pop >= 0.0 && self.sigma2_e_pop >= 0.0) {
            return Err(Error::Config("scenario variances must be non-negative".into()));
        }
        if self.beta_pop.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("scenario coefficients must be finite".into()));
        }
        Ok(())
    }

    /// The same coefficients and variances under another NLM divisor.
    pub fn with_kind(&self, kind: ScenarioKind) -> Result<Self> {
        if kind.is_linear() != self.kind.is_linear() {
            return Err(Error::Config(format!("cannot turn {} into {kind}", self.kind)));
        }
        Ok(Self {
            kind,
            a: kind.divisor(),
            ..self.clone()
        })
    }
}

/// Fixed-effect design of `kind` on every row of `frame`.
pub fn scenario_design(kind: ScenarioKind, frame: &LongFrame, columns: &[String; 3]) -> Result<DMatrix<f64>> {
    let idx = columns
        .iter()
        .map(|c| frame.aux_index(c))
        .collect::<Result<Vec<_>>>()?;
    let n = frame.n_rows();
    if kind.is_linear() {
        return Ok(DMatrix::from_fn(n, 3, |i, j| frame.rows()[i].x[idx[j]]));
    }
    let mut x = DMatrix::zeros(n, 6);
    for (i, row) in frame.rows().iter().enumerate() {
        let mut l = [0.0; 3];
        for (k, &c) in idx.iter().enumerate() {
            let v = row.x[c];
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Domain(format!(
                    "row {} ({}, {}, {}): {} = {v} must be positive for log terms",
                    i + 1,
                    row.domain,
                    row.unit,
                    row.period,
                    columns[k]
                )));
            }
            l[k] = v.ln();
        }
        let terms = [l[0], l[1], l[2], l[0] * l[1], l[0] * l[2], l[1] * l[2]];
        for (j, t) in terms.into_iter().enumerate() {
            x[(i, j)] = t;
        }
    }
    Ok(x)
}

/// A scenario bound to a frame: fixed part precomputed, draws cheap.
#[derive(Debug, Clone)]
pub struct ScenarioGenerator {
    fixed: Vec<f64>,
    sd_u: f64,
    sd_e: f64,
    domain_of_row: Vec<usize>,
    n_domains: usize,
}

impl ScenarioGenerator {
    pub fn new(spec: &ScenarioSpec, frame: &LongFrame) -> Result<Self> {
        spec.validate()?;
        let x = scenario_design(spec.kind, frame, &spec.columns)?;
        let fixed = x * DVector::from_column_slice(&spec.beta_pop);
        Ok(Self {
            fixed: fixed.iter().copied().collect(),
            sd_u: spec.sigma2_u_pop.sqrt() / spec.a,
            sd_e: spec.sigma2_e_pop.sqrt() / spec.a,
            domain_of_row: frame.domain_of_row().to_vec(),
            n_domains: frame.n_domains(),
        })
    }

    pub fn fixed(&self) -> &[f64] {
        &self.fixed
    }

    /// One population. Standard normals are drawn identically for every
    /// scenario, so equal seeds give common random numbers across kinds.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let (effects, residuals) = lmm::standard_draws(rng, self.n_domains, self.fixed.len());
        lmm::compose_draw(&self.fixed, &self.domain_of_row, self.sd_u, self.sd_e, &effects, &residuals)
    }
}

/// Generate one population response vector under `spec`.
pub fn generate_scenario(spec: &ScenarioSpec, frame: &LongFrame, seed: u64) -> Result<Vec<f64>> {
    let gen = ScenarioGenerator::new(spec, frame)?;
    Ok(gen.draw(&mut rng::stream(seed, "scenario", &[])))
}

/// REML estimates of `kind`'s mean structure (no intercept) on the whole
/// population of `frame`.
pub fn calibrate_params(frame: &LongFrame, kind: ScenarioKind, columns: &[String; 3]) -> Result<ScenarioSpec> {
    let y = frame.full_responses()?;
    let x = scenario_design(kind, frame, columns)?;
    let problem = RemlProblem::new(x, frame.domain_of_row())?;
    let est = problem.fit(&y)?;
    Ok(ScenarioSpec {
        kind,
        beta_pop: est.beta,
        sigma2_u_pop: est.sigma2_u,
        sigma2_e_pop: est.sigma2_e,
        a: kind.divisor(),
        columns: columns.clone(),
    })
}

/// Log-normal marginal of one synthetic auxiliary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxMarginal {
    pub name: String,
    pub median: f64,
    /// Standard deviation of the log between domains.
    pub domain_log_sd: f64,
    /// Standard deviation of the log between units of a domain.
    pub unit_log_sd: f64,
    /// Standard deviation of the period-to-period log change of a unit.
    pub period_log_sd: f64,
}

impl AuxMarginal {
    pub fn new(name: &str, median: f64, domain_log_sd: f64, unit_log_sd: f64, period_log_sd: f64) -> Self {
        Self {
            name: name.into(),
            median,
            domain_log_sd,
            unit_log_sd,
            period_log_sd,
        }
    }
}

/// Balanced synthetic population layout with positive auxiliaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDesign {
    pub n_domains: usize,
    pub units_per_domain: usize,
    pub n_periods: u32,
    pub aux: Vec<AuxMarginal>,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            n_domains: 10,
            units_per_domain: 20,
            n_periods: 3,
            aux: vec![
                AuxMarginal::new("x1", 30_000.0, 0.2, 0.9, 0.02),
                AuxMarginal::new("x4", 380.0, 0.01, 0.01, 0.005),
                AuxMarginal::new("x7", 3.0, 0.2, 0.6, 0.25),
            ],
        }
    }
}

impl SyntheticDesign {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains < 2 || self.units_per_domain < 1 || self.n_periods < 1 {
            return Err(Error::Config(
                "synthetic design needs >= 2 domains, >= 1 unit and >= 1 period".into(),
            ));
        }
        if self.aux.is_empty() {
            return Err(Error::Config("synthetic design has no auxiliaries".into()));
        }
        for a in &self.aux {
            let sds = [a.domain_log_sd, a.unit_log_sd, a.period_log_sd];
            if !(a.median > 0.0 && a.median.is_finite()) || sds.iter().any(|s| s.is_nan() || *s < 0.0) {
                return Err(Error::Config(format!("auxiliary '{}' has an invalid marginal", a.name)));
            }
        }
        Ok(())
    }
}

/// Unsampled synthetic frame (no responses). Domains are `D01, D02, ...`,
/// units `D01-U01, ...`; rows ordered by period, domain, unit.
pub fn synthetic_frame(design: &SyntheticDesign, seed: u64) -> Result<LongFrame> {
    design.validate()?;
    let mut rng = rng::stream(seed, "synthetic-aux", &[]);
    let width = |n: usize| n.to_string().len().max(2);
    let (dw, uw) = (width(design.n_domains), width(design.units_per_domain));
    let n_units = design.n_domains * design.units_per_domain;
    let p = design.aux.len();
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let domain_shift: Vec<Vec<f64>> = (0..design.n_domains)
        .map(|_| design.aux.iter().map(|a| a.domain_log_sd * normal()).collect())
        .collect();
    // log x of each unit in period 1, then a random walk across periods.
    let mut logs: Vec<Vec<f64>> = (0..n_units)
        .map(|u| {
            let d = u / design.units_per_domain;
            design
                .aux
                .iter()
                .enumerate()
                .map(|(j, a)| a.median.ln() + domain_shift[d][j] + a.unit_log_sd * normal())
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(n_units * design.n_periods as usize);
    for t in 1..=design.n_periods {
        if t > 1 {
            for unit in logs.iter_mut() {
                for (j, a) in design.aux.iter().enumerate() {
                    unit[j] += a.period_log_sd * normal();
                }
            }
        }
        for (u, unit) in logs.iter().enumerate() {
            let d = u / design.units_per_domain;
            let domain = format!("D{:0dw$}", d + 1);
            rows.push(UnitRecord {
                unit: format!("{domain}-U{:0uw$}", u % design.units_per_domain + 1),
                domain,
                period: t,
                y: None,
                x: (0..p).map(|j| unit[j].exp()).collect(),
                in_sample: false,
            });
        }
    }
    LongFrame::new(design.aux.iter().map(|a| a.name.clone()).collect(), rows)
}

/// Reference "real" population used to calibrate the scenarios: an NLM
/// response with the given coefficients and variances.
pub fn reference_population(frame: &LongFrame, reference: &ScenarioSpec, seed: u64) -> Result<LongFrame> {
    let y = generate_scenario(reference, frame, rng::derive_seed(seed, "reference", &[]))?;
    frame.with_responses(&y)
}

/// Coefficients of the built-in reference response.
pub fn default_reference() -> ScenarioSpec {
    ScenarioSpec {
        kind: ScenarioKind::Nlm1,
        beta_pop: vec![-1838.53, -724.16, -549.68, 444.18, 0.02, 100.93],
        sigma2_u_pop: 62_500.0,
        sigma2_e_pop: 160_000.0,
        a: 1.0,
        columns: default_lmm_columns(),
    }
}

/// Calibrate all four scenarios on a population with responses: LM by
/// REML on the linear terms, NLM1 by REML on the log terms, NLM10 and
/// NLM20 reusing the NLM1 estimates with their divisors.
pub fn calibrate_scenarios(population: &LongFrame, columns: &[String; 3]) -> Result<Vec<ScenarioSpec>> {
    let lm = calibrate_params(population, ScenarioKind::Lm, columns)?;
    let nlm = calibrate_params(population, ScenarioKind::Nlm1, columns)?;
    Ok(vec![
        lm,
        nlm.clone(),
        nlm.with_kind(ScenarioKind::Nlm10)?,
        nlm.with_kind(ScenarioKind::Nlm20)?,
    ])
}

/// Desk-scale setup: a synthetic frame (no responses) and the four
/// scenarios calibrated on a reference population generated over it.
pub fn desk_setup(design: &SyntheticDesign, reference: &ScenarioSpec, seed: u64) -> Result<(LongFrame, Vec<ScenarioSpec>)> {
    let frame = synthetic_frame(design, rng::derive_seed(seed, "desk-frame", &[]))?;
    let population = reference_population(&frame, reference, seed)?;
    let scenarios = calibrate_scenarios(&population, &reference.columns)?;
    Ok((frame, scenarios))
}

/// Default covariates of the random-intercept model used by the predictor
/// and by the bootstrap: `x1, x4, x7` without intercept.
pub fn default_lmm_covariates() -> Covariates {
    Covariates::new(&["x1", "x4", "x7"], false)
}

/// The two predictor kinds at their desk-scale defaults.
pub fn default_predictors() -> Vec<PredictorSpec> {
    vec![
        PredictorSpec::Lmm {
            covariates: default_lmm_covariates(),
        },
        PredictorSpec::Gb {
            hyperparams: GbHyperparams::default(),
            features: GbFeatures {
                columns: Some(vec!["x1".into(), "x4".into(), "x7".into()]),
                include_period: true,
                one_hot_domain: false,
            },
        },
    ]
}

/// Mean and median of domain `D01` in the last period.
pub fn default_thetas(n_periods: u32) -> Vec<ThetaSpec> {
    let d = frame::DomainFilter::Id("D01".into());
    vec![
        ThetaSpec::new(Statistic::Mean, d.clone(), n_periods),
        ThetaSpec::new(Statistic::Median, d, n_periods),
    ]
}

/// Monte Carlo run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub k: usize,
    pub b: usize,
    pub c: usize,
    pub fraction: f64,
    pub thetas: Vec<ThetaSpec>,
    pub predictors: Vec<PredictorSpec>,
    /// Random-intercept model regenerating bootstrap populations.
    pub generator: Covariates,
    pub estimators: Vec<Estimator>,
    pub qape_orders: Vec<f64>,
    pub q_ef: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            k: 200,
            b: 200,
            c: 1,
            fraction: 0.2,
            thetas: default_thetas(3),
            predictors: default_predictors(),
            generator: default_lmm_covariates(),
            estimators: vec![Estimator::Param, Estimator::Rb, Estimator::RbCor],
            qape_orders: vec![0.5, 0.99],
            q_ef: accuracy::DEFAULT_Q_EF,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.b < 1 {
            return Err(Error::Config("K and B must be >= 1".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} not in (0, 1]", self.fraction)));
        }
        if self.thetas.is_empty() || self.predictors.is_empty() {
            return Err(Error::Config("Monte Carlo needs targets and predictors".into()));
        }
        if let Some(p) = self.qape_orders.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("QAPE order {p} not in (0, 1)")));
        }
        Ok(())
    }

    pub fn accuracy_config(&self) -> AccuracyConfig {
        AccuracyConfig {
            b: self.b,
            c: self.c,
            estimators: self.estimators.clone(),
            qape_orders: self.qape_orders.clone(),
            q_ef: self.q_ef,
        }
    }
}

/// rB, rRMSE (both in %), RMSE and QAPEs of estimates against targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measures {
    pub rb: f64,
    pub rrmse: f64,
    pub rmse: f64,
    /// `(p, QAPE_p)` pairs.
    pub qape: Vec<(f64, f64)>,
}

impl Measures {
    pub fn compute(estimates: &[f64], truths: &[f64], qape_orders: &[f64]) -> Result<Self> {
        if estimates.len() != truths.len() || estimates.is_empty() {
            return Err(Error::Shape("estimates and truths must be non-empty and equal length".into()));
        }
        let errors: Vec<f64> = estimates.iter().zip(truths).map(|(e, t)| e - t).collect();
        let mean_truth = stats::mean(truths);
        let rmse = stats::mean_square(&errors).sqrt();
        Ok(Self {
            rb: stats::mean(&errors) / mean_truth * 100.0,
            rrmse: rmse / mean_truth * 100.0,
            rmse,
            qape: qape_orders
                .iter()
                .map(|&p| (p, stats::abs_quantile(&errors, p)))
                .collect(),
        })
    }
}

/// Measures of one predictor for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRow {
    pub predictor: PredictorKind,
    pub theta: ThetaSpec,
    pub measures: Measures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorStudy {
    pub scenario: ScenarioKind,
    pub k: usize,
    pub rows: Vec<PredictorRow>,
    /// Iterations redrawn after a failed refit.
    pub failures: usize,
}

/// Quality of one accuracy estimator against the Monte Carlo truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub predictor: PredictorKind,
    pub theta: ThetaSpec,
    pub estimator: Estimator,
    pub measure: String,
    pub p: Option<f64>,
    /// Empirical RMSE or QAPE of the predictor across iterations.
    pub truth: f64,
    pub mean_estimate: f64,
    pub rb: f64,
    pub rrmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStudy {
    pub scenario: ScenarioKind,
    pub k: usize,
    pub b: usize,
    pub c: usize,
    pub rows: Vec<EstimatorRow>,
    pub failures: usize,
    pub negative_mse: usize,
    pub corrections_skipped: usize,
}

/// Shared per-run state: fixed sample layout, prepared predictors, targets.
struct Harness {
    gen: ScenarioGenerator,
    layout: Layout,
    predictors: Vec<PreparedPredictor>,
    thetas: Vec<ResolvedTheta>,
}

struct Iteration {
    population: Vec<f64>,
    truth: Vec<f64>,
    /// `[predictor][theta]`
    predictions: Vec<Vec<f64>>,
    failures: usize,
}

impl Harness {
    fn new(config: &McConfig, spec: &ScenarioSpec, frame: &LongFrame) -> Result<Self> {
        config.validate()?;
        let gen = ScenarioGenerator::new(spec, frame)?;
        let flags = frame::panel_sample_flags(frame, config.fraction, rng::derive_seed(config.seed, "mc-sample", &[]))?;
        let layout = Layout::from_flags(&flags);
        let predictors = config
            .predictors
            .iter()
            .map(|p| PreparedPredictor::new(p, frame, &layout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            gen,
            layout,
            predictors,
            thetas: ResolvedTheta::resolve(&config.thetas, frame)?,
        })
    }

    fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.layout.n_rows];
        for &i in &self.layout.sampled {
            flags[i] = true;
        }
        flags
    }

    fn attempt(&self, seed: u64, k: usize, attempt: u64) -> Result<Iteration> {
        let mut rng = rng::stream(seed, "mc-population", &[k as u64, attempt]);
        let population = self.gen.draw(&mut rng);
        let fit_seed: u64 = rng.random();
        let truth = self
            .thetas
            .iter()
            .map(|t| t.evaluate(&population))
            .collect::<Result<Vec<_>>>()?;
        let y_s = self.layout.take_sampled(&population);
        let predictions = self
            .predictors
            .iter()
            .enumerate()
            .map(|(j, p)| p.predict(&self.layout, &y_s, &self.thetas, rng::derive_seed(fit_seed, "refit", &[j as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(Iteration {
            population,
            truth,
            predictions,
            failures: attempt as usize,
        })
    }

    /// Run iteration `k`, redrawing on failure; `extra` runs on the
    /// successful draw and a failure there also triggers a redraw.
    fn iterate<T>(
        &self,
        seed: u64,
        k: usize,
        extra: impl Fn(&Iteration, u64) -> Result<T>,
    ) -> Result<(Iteration, T)> {
        let mut last = None;
        for attempt in 0..MAX_ITERATION_ATTEMPTS {
            let outcome = self
                .attempt(seed, k, attempt)
                .and_then(|it| extra(&it, rng::derive_seed(seed, "mc-extra", &[k as u64, attempt])).map(|t| (it, t)));
            match outcome {
                Ok(v) => return Ok(v),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Bootstrap(format!(
            "Monte Carlo iteration {k} failed {MAX_ITERATION_ATTEMPTS} times; last error: {}",
            last.expect("at least one attempt")
        )))
    }
}

/// Accuracy of every predictor for every target over `config.k` generated
/// populations.
pub fn mc_predictors(config: &McConfig, spec: &ScenarioSpec, frame: &LongFrame) -> Result<PredictorStudy> {
    let h = Harness::new(config, spec, frame)?;
    let iterations = (0..config.k)
        .into_par_iter()
        .map(|k| h.iterate(config.seed, k, |_, _| Ok(())).map(|(it, _)| it))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (p, kind) in h.predictors.iter().map(PreparedPredictor::kind).enumerate() {
        for (j, theta) in h.thetas.iter().enumerate() {
            let est: Vec<f64> = iterations.iter().map(|it| it.predictions[p][j]).collect();
            let truth: Vec<f64> = iterations.iter().map(|it| it.truth[j]).collect();
            rows.push(PredictorRow {
                predictor: kind,
                theta: theta.spec.clone(),
                measures: Measures::compute(&est, &truth, &config.qape_orders)?,
            });
        }
    }
    Ok(PredictorStudy {
        scenario: spec.kind,
        k: config.k,
        rows,
        failures: iterations.iter().map(|it| it.failures).sum(),
    })
}

/// Bias and accuracy of the requested bootstrap estimators against the
/// empirical RMSE / QAPE of each predictor across the `K` iterations.
pub fn mc_accuracy_estimators(config: &McConfig, spec: &ScenarioSpec, frame: &LongFrame) -> Result<EstimatorStudy> {
    let acc = config.accuracy_config();
    acc.validate()?;
    let h = Harness::new(config, spec, frame)?;
    let plan = BootstrapPlan::new(frame, &h.flags(), &config.generator, &config.predictors, &config.thetas)?;
    let results = (0..config.k)
        .into_par_iter()
        .map(|k| {
            h.iterate(config.seed, k, |it, seed| {
                let y_s = h.layout.take_sampled(&it.population);
                let gen = plan.fit_generator(&y_s)?;
                accuracy::estimate_accuracy(&plan, &gen, &acc, seed)
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let kinds: Vec<PredictorKind> = h.predictors.iter().map(PreparedPredictor::kind).collect();
    // Empirical truth per (predictor, theta, measure, p).
    let mut truth: BTreeMap<(usize, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for p in 0..kinds.len() {
        for j in 0..h.thetas.len() {
            let errors: Vec<f64> = results
                .iter()
                .map(|(it, _)| it.predictions[p][j] - it.truth[j])
                .collect();
            let rmse = stats::mean_square(&errors).sqrt();
            let qapes = config
                .qape_orders
                .iter()
                .map(|&q| stats::abs_quantile(&errors, q))
                .collect();
            truth.insert((p, j), (rmse, qapes));
        }
    }

    let first = &results[0].1.cells;
    let mut rows = Vec::with_capacity(first.len());
    for (c, cell) in first.iter().enumerate() {
        let (p, j) = (cell.predictor_index, cell.theta_index);
        let (rmse, qapes) = &truth[&(p, j)];
        let target = match cell.p {
            None => *rmse,
            Some(q) => {
                let idx = config.qape_orders.iter().position(|o| *o == q).expect("known order");
                qapes[idx]
            }
        };
        let est: Vec<f64> = results.iter().map(|(_, a)| a.cells[c].value).collect();
        let m = Measures::compute(&est, &vec![target; est.len()], &[])?;
        rows.push(EstimatorRow {
            predictor: cell.predictor,
            theta: cell.theta.clone(),
            estimator: cell.estimator,
            measure: cell.measure.clone(),
            p: cell.p,
            truth: target,
            mean_estimate: stats::mean(&est),
            rb: m.rb,
            rrmse: m.rrmse,
        });
    }
    Ok(EstimatorStudy {
        scenario: spec.kind,
        k: config.k,
        b: config.b,
        c: config.c,
        rows,
        failures: results.iter().map(|(it, a)| it.failures + a.failures).sum(),
        negative_mse: results.iter().map(|(_, a)| a.negative_mse).sum(),
        corrections_skipped: results.iter().filter(|(_, a)| a.correction_skipped).count(),
    })
}
