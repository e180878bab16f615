//! Bootstrap prediction-error samples and the RMSE / QAPE estimators built
//! on them.
//!
//! Populations are always regenerated from a random-intercept model fitted
//! to the sample, whichever predictor is being assessed. Within one
//! replicate every predictor is refitted on the same generated sample, so
//! cross-predictor comparisons share Monte Carlo noise.
//!
//! Replicate `b` of scheme `s` draws from the stream `s/[b, attempt]` of the
//! master seed; a replicate whose refit fails is redrawn with the next
//! attempt index. Results are therefore identical for any thread count.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::LongFrame;
use crate::lmm::{self, Covariates, LmmFit, LmmParams, RemlProblem};
use crate::predictor::{Layout, PredictorKind, PredictorSpec, PreparedPredictor, ResolvedTheta, ThetaSpec};
use crate::rng::{self, StreamRng};
use crate::stats;

/// Redraws allowed per replicate before the whole run fails.
pub const MAX_ATTEMPTS: u64 = 20;
/// Default gate of the Erciulescu–Fuller modifications.
pub const DEFAULT_Q_EF: f64 = 0.77;

/// Bootstrap prediction errors of one predictor for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    /// `u*(b)`; length `B`, or `B + 1` for the telescoping estimator.
    pub first_level: Vec<f64>,
    /// `u**(b, c)`, one row of length `C` per first-level replicate `b < B`.
    pub second_level: Option<Vec<Vec<f64>>>,
    pub b: usize,
    pub c: usize,
}

impl ErrorSample {
    pub fn first_only(first_level: Vec<f64>) -> Self {
        let b = first_level.len();
        Self {
            first_level,
            second_level: None,
            b,
            c: 0,
        }
    }

    /// Two-level sample. `first_level` may hold `B` or `B + 1` entries where
    /// `B = second_level.len()`.
    pub fn two_level(first_level: Vec<f64>, second_level: Vec<Vec<f64>>) -> Result<Self> {
        let b = second_level.len();
        let c = second_level.first().map_or(0, Vec::len);
        if b == 0 || c == 0 || second_level.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("second level must be a non-empty B x C matrix".into()));
        }
        if first_level.len() != b && first_level.len() != b + 1 {
            return Err(Error::Shape(format!(
                "first level has {} entries, expected {b} or {}",
                first_level.len(),
                b + 1
            )));
        }
        Ok(Self {
            first_level,
            second_level: Some(second_level),
            b,
            c,
        })
    }

    /// Whether the extra first-level error for the telescoping estimator is
    /// present.
    pub fn is_telescoping(&self) -> bool {
        self.first_level.len() == self.b + 1
    }

    /// The first `B` first-level errors.
    pub fn first_b(&self) -> &[f64] {
        &self.first_level[..self.b]
    }

    fn second(&self) -> Result<&[Vec<f64>]> {
        self.second_level
            .as_deref()
            .ok_or_else(|| Error::Shape("no second-level errors".into()))
    }

    fn second_single(&self) -> Result<Vec<f64>> {
        let second = self.second()?;
        if self.c != 1 {
            return Err(Error::Shape(format!("estimator requires C = 1, found C = {}", self.c)));
        }
        Ok(second.iter().map(|r| r[0]).collect())
    }
}

/// RMSE estimator: `sqrt(mean(u^2))`.
pub fn rmse_estimate(errors: &[f64]) -> f64 {
    stats::mean_square(errors).sqrt()
}

/// QAPE estimator: quantile of order `p` of `|u|`.
pub fn qape_estimate(errors: &[f64], p: f64) -> f64 {
    stats::abs_quantile(errors, p)
}

/// `B^-1 sum u*(b)^2` over the first `B` errors.
pub fn mse_param(sample: &ErrorSample) -> f64 {
    stats::mean_square(sample.first_b())
}

/// `B^-1 C^-1 sum_b sum_c u**(b,c)^2`.
pub fn mse_db_2lev(sample: &ErrorSample) -> Result<f64> {
    let second = sample.second()?;
    let per_b: Vec<f64> = second.iter().map(|r| stats::mean_square(r)).collect();
    Ok(stats::mean(&per_b))
}

/// Per-replicate corrected squares `2 u*(b)^2 - C^-1 sum_c u**(b,c)^2`.
fn corrected_squares_c(sample: &ErrorSample) -> Result<Vec<f64>> {
    let second = sample.second()?;
    Ok(sample
        .first_b()
        .iter()
        .zip(second)
        .map(|(u, row)| 2.0 * u * u - stats::mean_square(row))
        .collect())
}

fn corrected_squares_1(sample: &ErrorSample) -> Result<Vec<f64>> {
    let second = sample.second_single()?;
    Ok(sample
        .first_b()
        .iter()
        .zip(&second)
        .map(|(u, w)| 2.0 * u * u - w * w)
        .collect())
}

fn corrected_squares_tel(sample: &ErrorSample) -> Result<Vec<f64>> {
    let second = sample.second_single()?;
    if !sample.is_telescoping() {
        return Err(Error::Shape(format!(
            "telescoping estimator needs B + 1 = {} first-level errors, found {}",
            sample.b + 1,
            sample.first_level.len()
        )));
    }
    let u = &sample.first_level;
    Ok((0..sample.b)
        .map(|b| u[b] * u[b] + u[b + 1] * u[b + 1] - second[b] * second[b])
        .collect())
}

/// Classic double-bootstrap MSE, `2 MSE_param - MSE_db-2lev`, computed as
/// the mean of per-replicate corrected squares. May be negative.
pub fn mse_db_c(sample: &ErrorSample) -> Result<f64> {
    Ok(stats::mean(&corrected_squares_c(sample)?))
}

/// Double-bootstrap MSE with `C = 1`. May be negative.
pub fn mse_db1(sample: &ErrorSample) -> Result<f64> {
    Ok(stats::mean(&corrected_squares_1(sample)?))
}

/// Telescoping double-bootstrap MSE (`C = 1`, `B + 1` first-level errors).
pub fn mse_db_tel(sample: &ErrorSample) -> Result<f64> {
    Ok(stats::mean(&corrected_squares_tel(sample)?))
}

/// Hall–Maiti modification; never negative.
pub fn mse_db_chm(sample: &ErrorSample) -> Result<f64> {
    let param = mse_param(sample);
    let two = mse_db_2lev(sample)?;
    Ok(hall_maiti(param, two))
}

pub(crate) fn hall_maiti(param: f64, two_level: f64) -> f64 {
    if two_level == 0.0 || param >= two_level {
        2.0 * param - two_level
    } else {
        param * ((param - two_level) / two_level).exp()
    }
}

fn ef_gate(sample: &ErrorSample, q: f64) -> Result<Option<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("gate q = {q} not in (0, 1]")));
    }
    let param = mse_param(sample);
    if param == 0.0 {
        return Ok(None);
    }
    let second = sample.second_single()?;
    Ok(Some(stats::mean_square(&second) / param))
}

/// Erciulescu–Fuller modification of [`mse_db1`]: `q * MSE_param` when the
/// ratio of mean squared second-level errors to `MSE_param` is below `q`.
pub fn mse_db1_ef(sample: &ErrorSample, q: f64) -> Result<f64> {
    match ef_gate(sample, q)? {
        None => Ok(0.0),
        Some(ratio) if ratio < q => Ok(q * mse_param(sample)),
        Some(_) => mse_db1(sample),
    }
}

/// Erciulescu–Fuller modification of [`mse_db_tel`]: `MSE_param` when
/// gated.
pub fn mse_db_tel_ef(sample: &ErrorSample, q: f64) -> Result<f64> {
    match ef_gate(sample, q)? {
        None => Ok(0.0),
        Some(ratio) if ratio < q => Ok(mse_param(sample)),
        Some(_) => mse_db_tel(sample),
    }
}

/// Which corrected square feeds the modified double-bootstrap errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DbVariant {
    #[serde(rename = "dbC")]
    DbC,
    #[serde(rename = "db1")]
    Db1,
    #[serde(rename = "dbTel")]
    DbTel,
}

/// Modified double-bootstrap errors: the square root of the corrected square
/// when it is non-negative, otherwise `u*(b)`.
pub fn modified_db_errors(sample: &ErrorSample, variant: DbVariant) -> Result<Vec<f64>> {
    let squares = match variant {
        DbVariant::DbC => corrected_squares_c(sample)?,
        DbVariant::Db1 => corrected_squares_1(sample)?,
        DbVariant::DbTel => corrected_squares_tel(sample)?,
    };
    Ok(squares
        .iter()
        .zip(sample.first_b())
        .map(|(&s, &u)| if s >= 0.0 { s.sqrt() } else { u })
        .collect())
}

/// Double-bootstrap QAPE: quantile of order `p` of the absolute modified
/// errors.
pub fn qape_db(sample: &ErrorSample, p: f64, variant: DbVariant) -> Result<f64> {
    Ok(stats::abs_quantile(&modified_db_errors(sample, variant)?, p))
}

/// Accuracy estimator variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "param")]
    Param,
    #[serde(rename = "rb")]
    Rb,
    #[serde(rename = "rbCor")]
    RbCor,
    #[serde(rename = "dbC")]
    DbC,
    #[serde(rename = "db1")]
    Db1,
    #[serde(rename = "dbTel")]
    DbTel,
    #[serde(rename = "dbCHM")]
    DbCHm,
    #[serde(rename = "db1HM")]
    Db1Hm,
    #[serde(rename = "db1EF")]
    Db1Ef,
    #[serde(rename = "dbTelEF")]
    DbTelEf,
}

impl Estimator {
    pub const ALL: [Estimator; 10] = [
        Estimator::Param,
        Estimator::Rb,
        Estimator::RbCor,
        Estimator::DbC,
        Estimator::Db1,
        Estimator::DbTel,
        Estimator::DbCHm,
        Estimator::Db1Hm,
        Estimator::Db1Ef,
        Estimator::DbTelEf,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Param => "param",
            Estimator::Rb => "rb",
            Estimator::RbCor => "rbCor",
            Estimator::DbC => "dbC",
            Estimator::Db1 => "db1",
            Estimator::DbTel => "dbTel",
            Estimator::DbCHm => "dbCHM",
            Estimator::Db1Hm => "db1HM",
            Estimator::Db1Ef => "db1EF",
            Estimator::DbTelEf => "dbTelEF",
        }
    }

    /// Whether a QAPE estimator exists for this variant.
    pub fn has_qape(&self) -> bool {
        matches!(
            self,
            Estimator::Param
                | Estimator::Rb
                | Estimator::RbCor
                | Estimator::DbC
                | Estimator::Db1
                | Estimator::DbTel
        )
    }

    fn is_double(&self) -> bool {
        !matches!(self, Estimator::Param | Estimator::Rb | Estimator::RbCor)
    }

    fn needs_single_second_level(&self) -> bool {
        matches!(
            self,
            Estimator::Db1 | Estimator::DbTel | Estimator::Db1Hm | Estimator::Db1Ef | Estimator::DbTelEf
        )
    }

    fn needs_telescoping(&self) -> bool {
        matches!(self, Estimator::DbTel | Estimator::DbTelEf)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

/// Parameters of the data-generating model fitted to one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorFit {
    pub params: LmmParams,
    /// BLUP of every frame domain (zero for unsampled domains).
    pub blup_by_domain: Vec<f64>,
    /// BLUPs of the sampled domains only (residual-bootstrap pool).
    pub effect_pool: Vec<f64>,
    /// Level-1 residuals of the sampled rows (residual-bootstrap pool).
    pub residual_pool: Vec<f64>,
    pub converged: bool,
}

/// Everything that stays fixed across bootstrap runs on one sample layout:
/// the generator design, prepared predictors and resolved targets.
#[derive(Debug, Clone)]
pub struct BootstrapPlan {
    layout: Layout,
    predictors: Vec<PreparedPredictor>,
    thetas: Vec<ResolvedTheta>,
    generator: Covariates,
    gen_problem: RemlProblem,
    gen_x_full: DMatrix<f64>,
    domain_of_row: Vec<usize>,
    n_domains: usize,
}

/// Outcome of one bootstrap run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapErrors {
    /// `samples[k][j]`: predictor `k`, target `j`.
    pub samples: Vec<Vec<ErrorSample>>,
    /// Replicates redrawn after a failed refit.
    pub failures: usize,
    /// Set when the residual-bootstrap correction was skipped because a pool
    /// had zero spread.
    pub correction_skipped: bool,
}

struct Replicate {
    errors: Vec<Vec<f64>>,
    failures: usize,
}

enum Scheme<'a> {
    Parametric(&'a LmmParams),
    Residual {
        beta: &'a [f64],
        effects: &'a [f64],
        residuals: &'a [f64],
    },
}

impl BootstrapPlan {
    /// `flags` gives the sample layout; `frame` supplies auxiliaries and
    /// domains only.
    pub fn new(
        frame: &LongFrame,
        flags: &[bool],
        generator: &Covariates,
        predictors: &[PredictorSpec],
        thetas: &[ThetaSpec],
    ) -> Result<Self> {
        if flags.len() != frame.n_rows() {
            return Err(Error::Shape("sample flags do not match the frame".into()));
        }
        if predictors.is_empty() || thetas.is_empty() {
            return Err(Error::Config("bootstrap needs at least one predictor and one target".into()));
        }
        let layout = Layout::from_flags(flags);
        let prepared = predictors
            .iter()
            .map(|p| PreparedPredictor::new(p, frame, &layout))
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<usize> = (0..frame.n_rows()).collect();
        let gen_x_full = generator.design(frame, &all)?;
        let groups: Vec<usize> = layout.sampled.iter().map(|&i| frame.domain_of_row()[i]).collect();
        let gen_problem = RemlProblem::new(gen_x_full.select_rows(&layout.sampled), &groups)?;
        Ok(Self {
            layout,
            predictors: prepared,
            thetas: ResolvedTheta::resolve(thetas, frame)?,
            generator: generator.clone(),
            gen_problem,
            gen_x_full,
            domain_of_row: frame.domain_of_row().to_vec(),
            n_domains: frame.n_domains(),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn thetas(&self) -> &[ResolvedTheta] {
        &self.thetas
    }

    pub fn predictor_kinds(&self) -> Vec<PredictorKind> {
        self.predictors.iter().map(PreparedPredictor::kind).collect()
    }

    pub fn generator(&self) -> &Covariates {
        &self.generator
    }

    pub fn predictors(&self) -> &[PreparedPredictor] {
        &self.predictors
    }

    /// Fit the generating model by REML on sampled responses.
    pub fn fit_generator(&self, y_sampled: &[f64]) -> Result<GeneratorFit> {
        let est = self.gen_problem.fit(y_sampled)?;
        let params = LmmParams {
            beta: est.beta,
            sigma2_u: est.sigma2_u,
            sigma2_e: est.sigma2_e,
        };
        let mut blup_by_domain = vec![0.0; self.n_domains];
        for (&d, &v) in self.gen_problem.group_labels().iter().zip(&est.blup) {
            blup_by_domain[d] = v;
        }
        Ok(self.generator_from(params, blup_by_domain, est.blup, y_sampled, est.converged))
    }

    /// Generator from an existing fit of the plan's generator covariates.
    pub fn generator_from_fit(&self, fit: &LmmFit, frame: &LongFrame) -> Result<GeneratorFit> {
        if fit.covariates != self.generator {
            return Err(Error::Config("fit covariates differ from the plan's generator".into()));
        }
        let blup_by_domain: Vec<f64> = frame.domains().iter().map(|d| fit.effect(d)).collect();
        let effect_pool = self
            .gen_problem
            .group_labels()
            .iter()
            .map(|&d| blup_by_domain[d])
            .collect();
        let y_s = self.layout.sampled.iter().map(|&i| {
            frame.rows()[i]
                .y
                .ok_or_else(|| Error::Integrity(format!("sampled row {i} has no response")))
        });
        let y_s = y_s.collect::<Result<Vec<_>>>()?;
        Ok(self.generator_from(fit.params(), blup_by_domain, effect_pool, &y_s, fit.converged))
    }

    fn generator_from(
        &self,
        params: LmmParams,
        blup_by_domain: Vec<f64>,
        effect_pool: Vec<f64>,
        y_sampled: &[f64],
        converged: bool,
    ) -> GeneratorFit {
        let beta = DVector::from_column_slice(&params.beta);
        let residual_pool = self
            .layout
            .sampled
            .iter()
            .zip(y_sampled)
            .map(|(&i, y)| {
                let fixed = (self.gen_x_full.row(i) * &beta)[0];
                y - fixed - blup_by_domain[self.domain_of_row[i]]
            })
            .collect();
        GeneratorFit {
            params,
            blup_by_domain,
            effect_pool,
            residual_pool,
            converged,
        }
    }

    fn fixed_part(&self, beta: &[f64]) -> Vec<f64> {
        (&self.gen_x_full * DVector::from_column_slice(beta))
            .iter()
            .copied()
            .collect()
    }

    fn draw(&self, scheme: &Scheme<'_>, fixed: &[f64], rng: &mut StreamRng) -> Vec<f64> {
        match scheme {
            Scheme::Parametric(params) => {
                let (effects, residuals) = lmm::standard_draws(rng, self.n_domains, fixed.len());
                lmm::compose_draw(
                    fixed,
                    &self.domain_of_row,
                    params.sigma2_u.sqrt(),
                    params.sigma2_e.sqrt(),
                    &effects,
                    &residuals,
                )
            }
            Scheme::Residual {
                effects, residuals, ..
            } => {
                let v: Vec<f64> = (0..self.n_domains)
                    .map(|_| effects[rng.random_range(0..effects.len())])
                    .collect();
                fixed
                    .iter()
                    .zip(&self.domain_of_row)
                    .map(|(f, &d)| f + v[d] + residuals[rng.random_range(0..residuals.len())])
                    .collect()
            }
        }
    }

    /// One replicate: generate a population, evaluate the targets on it, and
    /// refit every predictor on its sample. Errors are `[predictor][theta]`.
    fn errors_on(&self, population: &[f64], fit_seed: u64) -> Result<Vec<Vec<f64>>> {
        let truth = self
            .thetas
            .iter()
            .map(|t| t.evaluate(population))
            .collect::<Result<Vec<_>>>()?;
        let y_s = self.layout.take_sampled(population);
        self.predictors
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let seed = rng::derive_seed(fit_seed, "refit", &[k as u64]);
                let pred = p.predict(&self.layout, &y_s, &self.thetas, seed)?;
                Ok(pred.iter().zip(&truth).map(|(a, b)| a - b).collect())
            })
            .collect()
    }

    fn first_level(&self, scheme: &Scheme<'_>, label: &str, b: usize, seed: u64) -> Result<(Vec<f64>, Replicate)> {
        let fixed = match scheme {
            Scheme::Parametric(p) => self.fixed_part(&p.beta),
            Scheme::Residual { beta, .. } => self.fixed_part(beta),
        };
        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = rng::stream(seed, label, &[b as u64, attempt]);
            let population = self.draw(scheme, &fixed, &mut rng);
            let fit_seed: u64 = rng.random();
            match self.errors_on(&population, fit_seed) {
                Ok(errors) => {
                    return Ok((
                        population,
                        Replicate {
                            errors,
                            failures: attempt as usize,
                        },
                    ))
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Bootstrap(format!(
            "{label} replicate {b} failed {MAX_ATTEMPTS} times; last error: {}",
            last_err.expect("at least one attempt")
        )))
    }

    fn run_first_level(&self, scheme: &Scheme<'_>, label: &str, n: usize, seed: u64) -> Result<BootstrapErrors> {
        if n < 2 {
            return Err(Error::Config(format!("B must be >= 2, got {n}")));
        }
        let reps = (0..n)
            .into_par_iter()
            .map(|b| self.first_level(scheme, label, b, seed).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.collect(reps, None, false))
    }

    fn collect(&self, reps: Vec<Replicate>, second: Option<Vec<Vec<Vec<Vec<f64>>>>>, correction_skipped: bool) -> BootstrapErrors {
        let failures = reps.iter().map(|r| r.failures).sum::<usize>();
        let n_pred = self.predictors.len();
        let n_theta = self.thetas.len();
        let samples = (0..n_pred)
            .map(|k| {
                (0..n_theta)
                    .map(|j| {
                        let first: Vec<f64> = reps.iter().map(|r| r.errors[k][j]).collect();
                        match &second {
                            None => ErrorSample::first_only(first),
                            Some(levels) => {
                                // levels[b][c][k][j]
                                let rows: Vec<Vec<f64>> = levels
                                    .iter()
                                    .map(|per_c| per_c.iter().map(|e| e[k][j]).collect())
                                    .collect();
                                ErrorSample::two_level(first, rows).expect("shapes built consistently")
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        BootstrapErrors {
            samples,
            failures,
            correction_skipped,
        }
    }

    /// Parametric bootstrap: populations from the fitted model with normal
    /// effects and residuals.
    pub fn parametric(&self, gen: &GeneratorFit, b: usize, seed: u64) -> Result<BootstrapErrors> {
        self.run_first_level(&Scheme::Parametric(&gen.params), "param", b, seed)
    }

    /// Residual bootstrap: effects and residuals resampled with replacement
    /// from the predicted effects and level-1 residuals. With `corrected`,
    /// each pool is centred and rescaled to the fitted variance first.
    pub fn residual(&self, gen: &GeneratorFit, b: usize, seed: u64, corrected: bool) -> Result<BootstrapErrors> {
        if gen.effect_pool.len() < 2 {
            return Err(Error::Config("residual bootstrap needs at least 2 predicted effects".into()));
        }
        let (effects, residuals, skipped) = if corrected {
            let (e, s1) = correct_pool(&gen.effect_pool, gen.params.sigma2_u);
            let (r, s2) = correct_pool(&gen.residual_pool, gen.params.sigma2_e);
            (e, r, s1 || s2)
        } else {
            (gen.effect_pool.clone(), gen.residual_pool.clone(), false)
        };
        let scheme = Scheme::Residual {
            beta: &gen.params.beta,
            effects: &effects,
            residuals: &residuals,
        };
        let label = if corrected { "rb-cor" } else { "rb" };
        let mut out = self.run_first_level(&scheme, label, b, seed)?;
        out.correction_skipped = skipped;
        Ok(out)
    }

    /// Double bootstrap with `C` second-level populations per first-level
    /// replicate. With `telescoping`, `B + 1` first-level replicates are run
    /// (the last without a second level).
    pub fn double(&self, gen: &GeneratorFit, b: usize, c: usize, seed: u64, telescoping: bool) -> Result<BootstrapErrors> {
        if b < 2 {
            return Err(Error::Config(format!("B must be >= 2, got {b}")));
        }
        if c < 1 {
            return Err(Error::Config("double bootstrap needs C >= 1".into()));
        }
        let n_first = if telescoping { b + 1 } else { b };
        let scheme = Scheme::Parametric(&gen.params);
        let results = (0..n_first)
            .into_par_iter()
            .map(|i| {
                let (population, rep) = self.first_level(&scheme, "double", i, seed)?;
                if i >= b {
                    return Ok((rep, None));
                }
                let (second, extra) = self.second_level(&population, i, c, seed)?;
                Ok((
                    Replicate {
                        failures: rep.failures + extra,
                        ..rep
                    },
                    Some(second),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut reps = Vec::with_capacity(n_first);
        let mut levels = Vec::with_capacity(b);
        for (rep, second) in results {
            reps.push(rep);
            if let Some(s) = second {
                levels.push(s);
            }
        }
        Ok(self.collect(reps, Some(levels), false))
    }

    fn second_level(&self, population: &[f64], b: usize, c: usize, seed: u64) -> Result<(Vec<Vec<Vec<f64>>>, usize)> {
        let y_s = self.layout.take_sampled(population);
        let refit = self.gen_problem.fit(&y_s)?;
        let fixed = self.fixed_part(&refit.beta);
        let params = LmmParams {
            beta: refit.beta,
            sigma2_u: refit.sigma2_u,
            sigma2_e: refit.sigma2_e,
        };
        let scheme = Scheme::Parametric(&params);
        let mut failures = 0;
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let mut done = None;
            for attempt in 0..MAX_ATTEMPTS {
                let mut rng = rng::stream(seed, "double-2", &[b as u64, j as u64, attempt]);
                let pop2 = self.draw(&scheme, &fixed, &mut rng);
                let fit_seed: u64 = rng.random();
                match self.errors_on(&pop2, fit_seed) {
                    Ok(e) => {
                        done = Some(e);
                        break;
                    }
                    Err(_) => failures += 1,
                }
            }
            out.push(done.ok_or_else(|| {
                Error::Bootstrap(format!("second-level replicate ({b}, {j}) failed {MAX_ATTEMPTS} times"))
            })?);
        }
        Ok((out, failures))
    }
}

/// Centre `pool` and rescale it to variance `target` (divisor `n`). Returns
/// the pool unchanged and `true` when its spread is zero.
pub fn correct_pool(pool: &[f64], target: f64) -> (Vec<f64>, bool) {
    let mean = stats::mean(pool);
    let sd = stats::population_variance(pool).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return (pool.to_vec(), true);
    }
    let scale = target.max(0.0).sqrt() / sd;
    (pool.iter().map(|v| (v - mean) * scale).collect(), false)
}

fn check_converged(fit: &LmmFit) -> Result<()> {
    if fit.converged {
        Ok(())
    } else {
        Err(Error::Bootstrap("generating model fit did not converge".into()))
    }
}

/// Parametric bootstrap errors of every predictor for every target, with
/// populations generated from `fit` (fitted on `frame`'s sample).
pub fn parametric_bootstrap(
    fit: &LmmFit,
    frame: &LongFrame,
    predictors: &[PredictorSpec],
    thetas: &[ThetaSpec],
    b: usize,
    seed: u64,
) -> Result<BootstrapErrors> {
    check_converged(fit)?;
    let plan = BootstrapPlan::new(frame, &frame.sample_flags(), &fit.covariates, predictors, thetas)?;
    let gen = plan.generator_from_fit(fit, frame)?;
    plan.parametric(&gen, b, seed)
}

/// Residual bootstrap errors, optionally with the variance correction.
pub fn residual_bootstrap(
    fit: &LmmFit,
    frame: &LongFrame,
    predictors: &[PredictorSpec],
    thetas: &[ThetaSpec],
    b: usize,
    seed: u64,
    corrected: bool,
) -> Result<BootstrapErrors> {
    check_converged(fit)?;
    let plan = BootstrapPlan::new(frame, &frame.sample_flags(), &fit.covariates, predictors, thetas)?;
    let gen = plan.generator_from_fit(fit, frame)?;
    plan.residual(&gen, b, seed, corrected)
}

/// Double-bootstrap errors.
#[allow(clippy::too_many_arguments)]
pub fn double_bootstrap(
    fit: &LmmFit,
    frame: &LongFrame,
    predictors: &[PredictorSpec],
    thetas: &[ThetaSpec],
    b: usize,
    c: usize,
    seed: u64,
    telescoping: bool,
) -> Result<BootstrapErrors> {
    check_converged(fit)?;
    let plan = BootstrapPlan::new(frame, &frame.sample_flags(), &fit.covariates, predictors, thetas)?;
    let gen = plan.generator_from_fit(fit, frame)?;
    plan.double(&gen, b, c, seed, telescoping)
}

/// Which estimators to compute and with what settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccuracyConfig {
    pub b: usize,
    pub c: usize,
    pub estimators: Vec<Estimator>,
    pub qape_orders: Vec<f64>,
    pub q_ef: f64,
}

impl Default for AccuracyConfig {
    fn default() -> Self {
        Self {
            b: 200,
            c: 1,
            estimators: vec![Estimator::Param, Estimator::Rb, Estimator::RbCor],
            qape_orders: vec![0.5, 0.75, 0.99],
            q_ef: DEFAULT_Q_EF,
        }
    }
}

impl AccuracyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::Config(format!("B must be >= 2, got {}", self.b)));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no accuracy estimators requested".into()));
        }
        if let Some(p) = self.qape_orders.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::Config(format!("QAPE order {p} not in (0, 1)")));
        }
        if !(self.q_ef > 0.0 && self.q_ef <= 1.0) {
            return Err(Error::Config(format!("q_ef {} not in (0, 1]", self.q_ef)));
        }
        let double = self.estimators.iter().any(Estimator::is_double);
        if double && self.c < 1 {
            return Err(Error::Config("double-bootstrap estimators need C >= 1".into()));
        }
        if let Some(e) = self
            .estimators
            .iter()
            .find(|e| e.needs_single_second_level() && self.c != 1)
        {
            return Err(Error::Config(format!("estimator {e} requires C = 1, got C = {}", self.c)));
        }
        Ok(())
    }
}

/// One estimate of an accuracy measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCell {
    /// Position of the predictor and target in the run's lists.
    pub predictor_index: usize,
    pub theta_index: usize,
    pub predictor: PredictorKind,
    pub theta: ThetaSpec,
    pub estimator: Estimator,
    /// `"rmse"` or `"qape"`.
    pub measure: String,
    pub p: Option<f64>,
    pub value: f64,
}

/// All requested estimates for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimates {
    pub cells: Vec<AccuracyCell>,
    pub failures: usize,
    /// MSE estimates that came out negative and were truncated to 0 before
    /// taking the square root.
    pub negative_mse: usize,
    pub correction_skipped: bool,
}

/// Run the bootstraps needed by `config.estimators` and compute every
/// requested RMSE and QAPE estimate.
pub fn estimate_accuracy(
    plan: &BootstrapPlan,
    gen: &GeneratorFit,
    config: &AccuracyConfig,
    seed: u64,
) -> Result<AccuracyEstimates> {
    config.validate()?;
    let wants = |e: Estimator| config.estimators.contains(&e);
    let any_double = config.estimators.iter().any(Estimator::is_double);
    let telescoping = config.estimators.iter().any(Estimator::needs_telescoping);

    // Param errors come from the first level of the double bootstrap when
    // one is run, so the double-bootstrap corrections share it.
    let double = if any_double {
        Some(plan.double(gen, config.b, config.c, rng::derive_seed(seed, "double", &[]), telescoping)?)
    } else {
        None
    };
    let param = match (&double, wants(Estimator::Param)) {
        (Some(_), _) | (None, false) => None,
        (None, true) => Some(plan.parametric(gen, config.b, rng::derive_seed(seed, "param", &[]))?),
    };
    let rb = if wants(Estimator::Rb) {
        Some(plan.residual(gen, config.b, rng::derive_seed(seed, "rb", &[]), false)?)
    } else {
        None
    };
    let rb_cor = if wants(Estimator::RbCor) {
        Some(plan.residual(gen, config.b, rng::derive_seed(seed, "rb-cor", &[]), true)?)
    } else {
        None
    };

    let mut cells = Vec::new();
    let mut negative_mse = 0;
    let kinds = plan.predictor_kinds();
    for (k, kind) in kinds.iter().enumerate() {
        for (j, theta) in plan.thetas().iter().enumerate() {
            let mut push = |estimator: Estimator, measure: &str, p: Option<f64>, value: f64| {
                cells.push(AccuracyCell {
                    predictor_index: k,
                    theta_index: j,
                    predictor: *kind,
                    theta: theta.spec.clone(),
                    estimator,
                    measure: measure.to_string(),
                    p,
                    value,
                });
            };
            for &est in &config.estimators {
                let run = match est {
                    Estimator::Param => param.as_ref().or(double.as_ref()),
                    Estimator::Rb => rb.as_ref(),
                    Estimator::RbCor => rb_cor.as_ref(),
                    _ => double.as_ref(),
                };
                let sample = &run.expect("run scheduled above").samples[k][j];
                let mse = match est {
                    Estimator::Param | Estimator::Rb | Estimator::RbCor => mse_param(sample),
                    Estimator::DbC => mse_db_c(sample)?,
                    Estimator::Db1 => mse_db1(sample)?,
                    Estimator::DbTel => mse_db_tel(sample)?,
                    Estimator::DbCHm | Estimator::Db1Hm => mse_db_chm(sample)?,
                    Estimator::Db1Ef => mse_db1_ef(sample, config.q_ef)?,
                    Estimator::DbTelEf => mse_db_tel_ef(sample, config.q_ef)?,
                };
                if mse < 0.0 {
                    negative_mse += 1;
                }
                push(est, "rmse", None, mse.max(0.0).sqrt());
                if est.has_qape() {
                    for &p in &config.qape_orders {
                        let value = match est {
                            Estimator::Param | Estimator::Rb | Estimator::RbCor => {
                                qape_estimate(sample.first_b(), p)
                            }
                            Estimator::DbC => qape_db(sample, p, DbVariant::DbC)?,
                            Estimator::Db1 => qape_db(sample, p, DbVariant::Db1)?,
                            Estimator::DbTel => qape_db(sample, p, DbVariant::DbTel)?,
                            _ => unreachable!("has_qape"),
                        };
                        push(est, "qape", Some(p), value);
                    }
                }
            }
        }
    }
    let runs = [&double, &param, &rb, &rb_cor];
    Ok(AccuracyEstimates {
        cells,
        failures: runs.iter().filter_map(|r| r.as_ref()).map(|r| r.failures).sum(),
        negative_mse,
        correction_skipped: rb_cor.as_ref().is_some_and(|r| r.correction_skipped),
    })
}
