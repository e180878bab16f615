//! Plug-in prediction: observed sample responses are kept, model-fitted
//! values fill in the unobserved rows, and the target characteristic is
//! evaluated on the combined vector.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{DomainFilter, LongFrame};
use crate::gbt::{self, GbFeatures, GbHyperparams, GbModel};
use crate::lmm::{self, Covariates, LmmFit, RemlProblem};
use crate::stats;

/// Characteristic evaluated on a subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Mean,
    Median,
    Total,
    /// Quantile of the given order in `(0, 1)`.
    Quantile(f64),
}

impl Statistic {
    /// Evaluate on `values`. Median and quantiles use the lower order
    /// statistic of rank `ceil(p * m)`.
    pub fn evaluate(&self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::Evaluation("characteristic of an empty subset".into()));
        }
        Ok(match *self {
            Statistic::Mean => stats::mean(values),
            Statistic::Total => stats::sum(values.iter().copied()),
            Statistic::Median => stats::quantile(values, 0.5),
            Statistic::Quantile(p) => stats::quantile(values, p),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Total => "total",
            Statistic::Quantile(_) => "quantile",
        }
    }

    pub fn order(&self) -> Option<f64> {
        match *self {
            Statistic::Quantile(p) => Some(p),
            _ => None,
        }
    }
}

/// Target characteristic: statistic × domain × period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ThetaSpecRepr", into = "ThetaSpecRepr")]
pub struct ThetaSpec {
    pub statistic: Statistic,
    pub domain: DomainFilter,
    pub period: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaSpecRepr {
    statistic: String,
    #[serde(default)]
    domain: Option<String>,
    period: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
}

impl TryFrom<ThetaSpecRepr> for ThetaSpec {
    type Error = Error;

    fn try_from(r: ThetaSpecRepr) -> Result<Self> {
        let statistic = match (r.statistic.as_str(), r.p) {
            ("mean", None) => Statistic::Mean,
            ("median", None) => Statistic::Median,
            ("total", None) => Statistic::Total,
            ("quantile", Some(p)) if p > 0.0 && p < 1.0 => Statistic::Quantile(p),
            ("quantile", Some(p)) => {
                return Err(Error::Config(format!("quantile order {p} not in (0, 1)")))
            }
            ("quantile", None) => return Err(Error::Config("quantile needs an order 'p'".into())),
            (s, Some(_)) if ["mean", "median", "total"].contains(&s) => {
                return Err(Error::Config(format!("'p' is only valid for quantile, not {s}")))
            }
            (s, _) => return Err(Error::Config(format!("unknown statistic '{s}'"))),
        };
        Ok(ThetaSpec {
            statistic,
            domain: r.domain.into(),
            period: r.period,
        })
    }
}

impl From<ThetaSpec> for ThetaSpecRepr {
    fn from(t: ThetaSpec) -> Self {
        ThetaSpecRepr {
            statistic: t.statistic.name().to_string(),
            domain: t.domain.into(),
            period: t.period,
            p: t.statistic.order(),
        }
    }
}

impl ThetaSpec {
    pub fn new(statistic: Statistic, domain: DomainFilter, period: u32) -> Self {
        Self {
            statistic,
            domain,
            period,
        }
    }

    pub fn mask(&self, frame: &LongFrame) -> Result<Vec<usize>> {
        frame.subset_mask(&self.domain, self.period)
    }
}

impl fmt::Display for ThetaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.statistic {
            Statistic::Quantile(p) => write!(f, "quantile({p})")?,
            s => f.write_str(s.name())?,
        }
        write!(f, "[{}@{}]", self.domain, self.period)
    }
}

/// Where an entry of the composed vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Observed,
    Fitted,
}

/// Population-length vector of observed and fitted responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedVector {
    pub values: Vec<f64>,
    pub source: Vec<Source>,
}

/// Put observed responses at sampled positions and `fitted_r` (ordered like
/// the frame's non-sampled rows) everywhere else.
pub fn compose_population(frame: &LongFrame, fitted_r: &[f64]) -> Result<ComposedVector> {
    let expected = frame.n_rows() - frame.n_sampled();
    if fitted_r.len() != expected {
        return Err(Error::Shape(format!(
            "{} fitted values for {expected} non-sampled rows",
            fitted_r.len()
        )));
    }
    if fitted_r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite fitted value".into()));
    }
    let mut fitted = fitted_r.iter();
    let (values, source) = frame
        .rows()
        .iter()
        .map(|r| {
            if r.in_sample {
                (r.y.expect("sampled rows carry a response"), Source::Observed)
            } else {
                (*fitted.next().expect("length checked"), Source::Fitted)
            }
        })
        .unzip();
    Ok(ComposedVector { values, source })
}

/// Evaluate `spec`'s statistic on the entries of `composed` selected by
/// `mask`.
pub fn characteristic(spec: &ThetaSpec, composed: &ComposedVector, mask: &[usize]) -> Result<f64> {
    evaluate_masked(&spec.statistic, &composed.values, mask)
}

pub(crate) fn evaluate_masked(statistic: &Statistic, values: &[f64], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Evaluation("empty subset mask".into()));
    }
    let selected: Vec<f64> = mask.iter().map(|&i| values[i]).collect();
    statistic.evaluate(&selected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Lmm,
    Gb,
}

impl PredictorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PredictorKind::Lmm => "LMM",
            PredictorKind::Gb => "GB",
        }
    }
}

/// How to (re)fit a predictor's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    Lmm {
        covariates: Covariates,
    },
    Gb {
        hyperparams: GbHyperparams,
        #[serde(default)]
        features: GbFeatures,
    },
}

impl PredictorSpec {
    pub fn kind(&self) -> PredictorKind {
        match self {
            PredictorSpec::Lmm { .. } => PredictorKind::Lmm,
            PredictorSpec::Gb { .. } => PredictorKind::Gb,
        }
    }

    /// Fit on the sampled rows of `frame`.
    pub fn fit(&self, frame: &LongFrame, seed: u64) -> Result<FittedModel> {
        match self {
            PredictorSpec::Lmm { covariates } => Ok(FittedModel::Lmm(lmm::fit_reml(frame, covariates)?)),
            PredictorSpec::Gb {
                hyperparams,
                features,
            } => {
                let (x, names) = features.matrix(frame)?;
                let rows = frame.sampled_indices();
                let model = gbt::fit_gb(
                    &x.select_rows(&rows),
                    &frame.sampled_responses(),
                    &names,
                    hyperparams,
                    seed,
                )?;
                Ok(FittedModel::Gb {
                    model,
                    features: features.clone(),
                })
            }
        }
    }
}

/// A fitted predictor model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedModel {
    Lmm(LmmFit),
    Gb { model: GbModel, features: GbFeatures },
}

impl FittedModel {
    pub fn kind(&self) -> PredictorKind {
        match self {
            FittedModel::Lmm(_) => PredictorKind::Lmm,
            FittedModel::Gb { .. } => PredictorKind::Gb,
        }
    }

    /// Fitted values of the non-sampled rows of `frame`, in frame order.
    pub fn fitted_unobserved(&self, frame: &LongFrame) -> Result<Vec<f64>> {
        match self {
            FittedModel::Lmm(fit) => lmm::fitted_unobserved(fit, frame),
            FittedModel::Gb { model, features } => {
                let (x, _) = features.matrix(frame)?;
                gbt::predict_gb(model, &x.select_rows(&frame.nonsampled_indices()))
            }
        }
    }
}

/// Plug-in prediction of `spec` from a model fitted on `frame`'s sample.
pub fn plug_in_predict(model: &FittedModel, frame: &LongFrame, spec: &ThetaSpec) -> Result<f64> {
    let fitted = model.fitted_unobserved(frame)?;
    let composed = compose_population(frame, &fitted)?;
    characteristic(spec, &composed, &spec.mask(frame)?)
}

/// Sampled / non-sampled split of a population, by row index.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n_rows: usize,
    pub sampled: Vec<usize>,
    pub nonsampled: Vec<usize>,
}

impl Layout {
    pub fn from_flags(flags: &[bool]) -> Self {
        let (sampled, nonsampled) = (0..flags.len()).partition(|&i| flags[i]);
        Self {
            n_rows: flags.len(),
            sampled,
            nonsampled,
        }
    }

    /// Population vector from sampled responses and non-sampled fitted
    /// values.
    pub fn compose(&self, y_sampled: &[f64], fitted_r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows];
        for (&i, &v) in self.sampled.iter().zip(y_sampled) {
            out[i] = v;
        }
        for (&i, &v) in self.nonsampled.iter().zip(fitted_r) {
            out[i] = v;
        }
        out
    }

    pub fn take_sampled(&self, y: &[f64]) -> Vec<f64> {
        self.sampled.iter().map(|&i| y[i]).collect()
    }
}

/// A target with its row mask resolved against a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedTheta {
    pub spec: ThetaSpec,
    pub mask: Vec<usize>,
}

impl ResolvedTheta {
    pub fn resolve(specs: &[ThetaSpec], frame: &LongFrame) -> Result<Vec<Self>> {
        specs
            .iter()
            .map(|s| {
                Ok(ResolvedTheta {
                    spec: s.clone(),
                    mask: s.mask(frame)?,
                })
            })
            .collect()
    }

    pub fn evaluate(&self, population: &[f64]) -> Result<f64> {
        evaluate_masked(&self.spec.statistic, population, &self.mask)
    }
}

/// Predictor prepared for repeated refits on one sample layout with varying
/// responses (bootstrap and Monte Carlo loops).
#[derive(Debug, Clone)]
pub struct PreparedPredictor {
    kind: PreparedKind,
}

#[derive(Debug, Clone)]
enum PreparedKind {
    Lmm {
        problem: RemlProblem,
        x_r: DMatrix<f64>,
        /// Compacted REML group of each non-sampled row, if sampled.
        group_r: Vec<Option<usize>>,
    },
    Gb {
        hyperparams: GbHyperparams,
        names: Vec<String>,
        x_s: DMatrix<f64>,
        x_r: DMatrix<f64>,
    },
}

impl PreparedPredictor {
    /// Prepare `spec` on `frame`'s auxiliaries with the given sample layout.
    /// Responses in `frame` are ignored.
    pub fn new(spec: &PredictorSpec, frame: &LongFrame, layout: &Layout) -> Result<Self> {
        let kind = match spec {
            PredictorSpec::Lmm { covariates } => {
                let x_s = covariates.design(frame, &layout.sampled)?;
                let groups: Vec<usize> = layout
                    .sampled
                    .iter()
                    .map(|&i| frame.domain_of_row()[i])
                    .collect();
                let problem = RemlProblem::new(x_s, &groups)?;
                let mut compact = vec![None; frame.n_domains()];
                for (k, &d) in problem.group_labels().iter().enumerate() {
                    compact[d] = Some(k);
                }
                let group_r = layout
                    .nonsampled
                    .iter()
                    .map(|&i| compact[frame.domain_of_row()[i]])
                    .collect();
                PreparedKind::Lmm {
                    problem,
                    x_r: covariates.design(frame, &layout.nonsampled)?,
                    group_r,
                }
            }
            PredictorSpec::Gb {
                hyperparams,
                features,
            } => {
                hyperparams.validate()?;
                let (x, names) = features.matrix(frame)?;
                PreparedKind::Gb {
                    hyperparams: hyperparams.clone(),
                    names,
                    x_s: x.select_rows(&layout.sampled),
                    x_r: x.select_rows(&layout.nonsampled),
                }
            }
        };
        Ok(Self { kind })
    }

    pub fn kind(&self) -> PredictorKind {
        match self.kind {
            PreparedKind::Lmm { .. } => PredictorKind::Lmm,
            PreparedKind::Gb { .. } => PredictorKind::Gb,
        }
    }

    /// Refit on `y_sampled` and return fitted values of the non-sampled rows.
    pub fn fitted_nonsampled(&self, y_sampled: &[f64], seed: u64) -> Result<Vec<f64>> {
        match &self.kind {
            PreparedKind::Lmm {
                problem,
                x_r,
                group_r,
            } => {
                let est = problem.fit(y_sampled)?;
                let fixed = x_r * DVector::from_column_slice(&est.beta);
                Ok(fixed
                    .iter()
                    .zip(group_r)
                    .map(|(f, g)| f + g.map_or(0.0, |k| est.blup[k]))
                    .collect())
            }
            PreparedKind::Gb {
                hyperparams,
                names,
                x_s,
                x_r,
            } => {
                let model = gbt::fit_gb(x_s, y_sampled, names, hyperparams, seed)?;
                gbt::predict_gb(&model, x_r)
            }
        }
    }

    /// Refit on `y_sampled` and evaluate every target.
    pub fn predict(
        &self,
        layout: &Layout,
        y_sampled: &[f64],
        thetas: &[ResolvedTheta],
        seed: u64,
    ) -> Result<Vec<f64>> {
        let fitted = self.fitted_nonsampled(y_sampled, seed)?;
        if fitted.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite fitted value".into()));
        }
        let composed = layout.compose(y_sampled, &fitted);
        thetas.iter().map(|t| t.evaluate(&composed)).collect()
    }
}
