//! Random-intercept linear mixed model
//!
//! ```text
//! y_i = x_i' beta + v_{d(i)} + e_i,   v_d ~ N(0, sigma2_u),   e_i ~ N(0, sigma2_e)
//! ```
//!
//! fitted by restricted maximum likelihood. With `psi = sigma2_u / sigma2_e`
//! the marginal covariance is `sigma2_e * H(psi)` where `H` is block diagonal
//! with blocks `I + psi * J`. For fixed `psi` both `beta` and `sigma2_e` have
//! closed forms, so the restricted likelihood is profiled down to a
//! one-dimensional problem in `log(psi)` plus the `psi = 0` boundary.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::LongFrame;
use crate::rng;

/// Floor on the residual variance.
pub const SIGMA2_E_FLOOR: f64 = 1e-10;
/// Tolerance of the profiled optimisation (in `log(psi)`).
pub const REML_TOL: f64 = 1e-8;
/// Iteration cap of the profiled optimisation.
pub const REML_MAX_ITER: usize = 200;

const LOG_PSI_MIN: f64 = -23.0;
const LOG_PSI_MAX: f64 = 16.0;
const LOG_PSI_GRID: usize = 79;

/// Fixed-effect design: named auxiliary columns plus an optional intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Covariates {
    pub columns: Vec<String>,
    #[serde(default)]
    pub intercept: bool,
}

impl Covariates {
    pub fn new(columns: &[&str], intercept: bool) -> Self {
        Self {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            intercept,
        }
    }

    pub fn n_terms(&self) -> usize {
        self.columns.len() + usize::from(self.intercept)
    }

    /// Coefficient labels, intercept first.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_terms());
        if self.intercept {
            names.push("(intercept)".to_string());
        }
        names.extend(self.columns.iter().cloned());
        names
    }

    /// Design matrix of the given frame rows.
    pub fn design(&self, frame: &LongFrame, rows: &[usize]) -> Result<DMatrix<f64>> {
        let cols = self
            .columns
            .iter()
            .map(|c| frame.aux_index(c))
            .collect::<Result<Vec<_>>>()?;
        let offset = usize::from(self.intercept);
        Ok(DMatrix::from_fn(rows.len(), self.n_terms(), |i, j| {
            if j < offset {
                1.0
            } else {
                frame.rows()[rows[i]].x[cols[j - offset]]
            }
        }))
    }
}

/// Model parameters used for simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmParams {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
}

impl LmmParams {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("non-finite fixed effect".into()));
        }
        if !(self.sigma2_u.is_finite() && self.sigma2_u >= 0.0)
            || !(self.sigma2_e.is_finite() && self.sigma2_e >= 0.0)
        {
            return Err(Error::Config(format!(
                "variances must be finite and non-negative (sigma2_u={}, sigma2_e={})",
                self.sigma2_u, self.sigma2_e
            )));
        }
        Ok(())
    }
}

/// Fitted random-intercept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub covariates: Covariates,
    pub beta_names: Vec<String>,
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    /// BLUP of each sampled domain's effect. Unsampled domains are absent.
    pub v_hat: BTreeMap<String, f64>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LmmFit {
    pub fn params(&self) -> LmmParams {
        LmmParams {
            beta: self.beta.clone(),
            sigma2_u: self.sigma2_u,
            sigma2_e: self.sigma2_e,
        }
    }

    /// BLUP of `domain`, zero when the domain was not sampled.
    pub fn effect(&self, domain: &str) -> f64 {
        self.v_hat.get(domain).copied().unwrap_or(0.0)
    }
}

/// Outcome of the profiled REML optimisation on index-based data.
#[derive(Debug, Clone, PartialEq)]
pub struct RemlEstimate {
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    /// BLUP per group, indexed like [`RemlProblem::group_labels`].
    pub blup: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Profiled quantities at one value of `psi`.
#[derive(Debug, Clone)]
pub struct Profile {
    pub beta: DVector<f64>,
    pub sigma2_e: f64,
    pub loglik: f64,
    residuals: Vec<f64>,
}

struct Pieces {
    beta: DVector<f64>,
    residuals: Vec<f64>,
    quad: f64,
    log_det_h: f64,
    log_det_a: f64,
}

impl Pieces {
    fn loglik(&self, dof: f64, sigma2_e: f64) -> f64 {
        -0.5 * (dof * (2.0 * std::f64::consts::PI * sigma2_e).ln()
            + self.log_det_h
            + self.log_det_a
            + self.quad / sigma2_e)
    }
}

/// Design-dependent parts of the REML problem, reusable across response
/// vectors (bootstrap refits share one instance).
#[derive(Debug, Clone)]
pub struct RemlProblem {
    x: DMatrix<f64>,
    group: Vec<usize>,
    group_labels: Vec<usize>,
    group_size: Vec<usize>,
    xtx: DMatrix<f64>,
    group_xsum: Vec<DVector<f64>>,
}

impl RemlProblem {
    /// `groups[i]` is any integer label of row `i`'s domain; labels are
    /// compacted internally in order of first appearance.
    pub fn new(x: DMatrix<f64>, groups: &[usize]) -> Result<Self> {
        let (n, p) = x.shape();
        if groups.len() != n {
            return Err(Error::Shape(format!(
                "{} group labels for {n} rows",
                groups.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("design matrix has non-finite entries".into()));
        }
        let mut group_labels: Vec<usize> = Vec::new();
        let mut lookup = BTreeMap::new();
        let group: Vec<usize> = groups
            .iter()
            .map(|&g| {
                *lookup.entry(g).or_insert_with(|| {
                    group_labels.push(g);
                    group_labels.len() - 1
                })
            })
            .collect();
        if group_labels.len() < 2 {
            return Err(Error::Identifiability(format!(
                "random intercept needs at least 2 sampled domains, found {}",
                group_labels.len()
            )));
        }
        if n <= p + 1 {
            return Err(Error::Identifiability(format!(
                "need more than p + 1 = {} observations, found {n}",
                p + 1
            )));
        }
        if p > 0 {
            let svd = x.clone().svd(false, false);
            let max = svd.singular_values.max();
            let rank = svd.rank(max * 1e-10 * n.max(p) as f64);
            if rank < p {
                return Err(Error::Singular(format!(
                    "design matrix has rank {rank} < {p} columns"
                )));
            }
        }
        let g = group_labels.len();
        let mut group_size = vec![0usize; g];
        let mut group_xsum = vec![DVector::zeros(p); g];
        for (i, &d) in group.iter().enumerate() {
            group_size[d] += 1;
            group_xsum[d] += x.row(i).transpose();
        }
        let xtx = x.transpose() * &x;
        Ok(Self {
            x,
            group,
            group_labels,
            group_size,
            xtx,
            group_xsum,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_fixed(&self) -> usize {
        self.x.ncols()
    }

    /// Original label of each compacted group.
    pub fn group_labels(&self) -> &[usize] {
        &self.group_labels
    }

    fn group_sums(&self, v: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.group_size.len()];
        for (i, &d) in self.group.iter().enumerate() {
            sums[d] += v[i];
        }
        sums
    }

    fn pieces(&self, y: &[f64], psi: f64) -> Result<Pieces> {
        let p = self.n_fixed();
        let shrink: Vec<f64> = self
            .group_size
            .iter()
            .map(|&m| psi / (1.0 + m as f64 * psi))
            .collect();
        let log_det_h: f64 = self
            .group_size
            .iter()
            .map(|&m| (m as f64 * psi).ln_1p())
            .sum();

        let y_sums = self.group_sums(y);
        let mut a = self.xtx.clone();
        let mut rhs = self.x.tr_mul(&DVector::from_column_slice(y));
        for d in 0..shrink.len() {
            let s = &self.group_xsum[d];
            a -= shrink[d] * s * s.transpose();
            rhs -= shrink[d] * y_sums[d] * s;
        }
        let (beta, log_det_a) = if p == 0 {
            (DVector::zeros(0), 0.0)
        } else {
            let chol = a.cholesky().ok_or_else(|| {
                Error::Singular("X' H^-1 X is not positive definite".into())
            })?;
            let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            (chol.solve(&rhs), log_det)
        };

        let fitted = &self.x * &beta;
        let residuals: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
        let r_sums = self.group_sums(&residuals);
        let quad = residuals.iter().map(|r| r * r).sum::<f64>()
            - shrink
                .iter()
                .zip(&r_sums)
                .map(|(c, s)| c * s * s)
                .sum::<f64>();
        Ok(Pieces {
            beta,
            residuals,
            quad: quad.max(0.0),
            log_det_h,
            log_det_a,
        })
    }

    fn dof(&self) -> f64 {
        (self.n_obs() - self.n_fixed()) as f64
    }

    /// GLS fit and profiled restricted log-likelihood at ratio `psi >= 0`.
    pub fn profile(&self, y: &[f64], psi: f64) -> Result<Profile> {
        let pieces = self.pieces(y, psi)?;
        let sigma2_e = (pieces.quad / self.dof()).max(SIGMA2_E_FLOOR);
        let loglik = pieces.loglik(self.dof(), sigma2_e);
        Ok(Profile {
            beta: pieces.beta,
            sigma2_e,
            loglik,
            residuals: pieces.residuals,
        })
    }

    /// Restricted log-likelihood at arbitrary variance components
    /// (`sigma2_e > 0`).
    pub fn loglik_at(&self, y: &[f64], sigma2_u: f64, sigma2_e: f64) -> Result<f64> {
        let pieces = self.pieces(y, sigma2_u / sigma2_e)?;
        Ok(pieces.loglik(self.dof(), sigma2_e))
    }

    /// Maximise the profiled restricted likelihood.
    pub fn fit(&self, y: &[f64]) -> Result<RemlEstimate> {
        if y.len() != self.n_obs() {
            return Err(Error::Shape(format!(
                "response has length {}, design has {} rows",
                y.len(),
                self.n_obs()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit("non-finite response".into()));
        }
        let objective = |t: f64| -> Result<f64> { Ok(self.profile(y, t.exp())?.loglik) };

        let step = (LOG_PSI_MAX - LOG_PSI_MIN) / (LOG_PSI_GRID - 1) as f64;
        let grid: Vec<f64> = (0..LOG_PSI_GRID)
            .map(|k| LOG_PSI_MIN + step * k as f64)
            .collect();
        let values = grid
            .iter()
            .map(|&t| objective(t))
            .collect::<Result<Vec<_>>>()?;
        let best = values
            .iter()
            .enumerate()
            .fold(0, |b, (k, v)| if *v > values[b] { k } else { b });

        let lo = grid[best.saturating_sub(1)];
        let hi = grid[(best + 1).min(LOG_PSI_GRID - 1)];
        let mut failure = None;
        let brent = brent_maximize(
            |t| match objective(t) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NEG_INFINITY
                }
            },
            lo,
            hi,
            REML_TOL,
            REML_MAX_ITER,
        );
        if let Some(e) = failure {
            return Err(e);
        }

        let (mut psi, mut converged) = (brent.x.exp(), brent.converged);
        let mut best_value = brent.fx.max(values[best]);
        if values[best] > brent.fx {
            psi = grid[best].exp();
        }
        if best == LOG_PSI_GRID - 1 && brent.x >= LOG_PSI_MAX - 1e-6 {
            // optimum pushed against the upper end of the search range
            converged = false;
        }
        let at_zero = self.profile(y, 0.0)?;
        if at_zero.loglik >= best_value {
            psi = 0.0;
            best_value = at_zero.loglik;
        }

        let prof = self.profile(y, psi)?;
        let sigma2_u = psi * prof.sigma2_e;
        let r_sums = self.group_sums(&prof.residuals);
        let blup = self
            .group_size
            .iter()
            .zip(&r_sums)
            .map(|(&m, s)| psi / (1.0 + m as f64 * psi) * s)
            .collect();
        Ok(RemlEstimate {
            beta: prof.beta.iter().copied().collect(),
            sigma2_u,
            sigma2_e: prof.sigma2_e,
            blup,
            loglik: best_value,
            converged,
            iterations: brent.iterations,
        })
    }
}

struct BrentResult {
    x: f64,
    fx: f64,
    converged: bool,
    iterations: usize,
}

/// Brent's derivative-free bounded maximisation (golden section with
/// parabolic steps).
fn brent_maximize(
    mut f: impl FnMut(f64) -> f64,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> BrentResult {
    const GOLDEN: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (lo, hi);
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = -f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for iter in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + 1e-12;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return BrentResult {
                x,
                fx: -fx,
                converged: true,
                iterations: iter,
            };
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_prev = e;
            e = d;
            if p.abs() < (0.5 * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + tol1.copysign(d)
        };
        let fu = -f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    BrentResult {
        x,
        fx: -fx,
        converged: false,
        iterations: max_iter,
    }
}

/// Fit the model by REML on the sampled rows of `frame`.
pub fn fit_reml(frame: &LongFrame, covariates: &Covariates) -> Result<LmmFit> {
    let rows = frame.sampled_indices();
    let x = covariates.design(frame, &rows)?;
    let groups: Vec<usize> = rows.iter().map(|&i| frame.domain_of_row()[i]).collect();
    let y = frame.sampled_responses();
    let problem = RemlProblem::new(x, &groups)?;
    let est = problem.fit(&y)?;
    let v_hat = problem
        .group_labels()
        .iter()
        .zip(&est.blup)
        .map(|(&d, &v)| (frame.domains()[d].clone(), v))
        .collect();
    Ok(LmmFit {
        covariates: covariates.clone(),
        beta_names: covariates.names(),
        beta: est.beta,
        sigma2_u: est.sigma2_u,
        sigma2_e: est.sigma2_e,
        v_hat,
        reml_loglik: est.loglik,
        converged: est.converged,
        iterations: est.iterations,
    })
}

/// BLUP of each sampled domain's effect at the fitted parameters:
/// `n_d s2u / (n_d s2u + s2e)` times the domain's mean GLS residual.
pub fn blup_effects(fit: &LmmFit, sample: &LongFrame) -> Result<BTreeMap<String, f64>> {
    let rows = sample.sampled_indices();
    let x = fit.covariates.design(sample, &rows)?;
    if x.ncols() != fit.beta.len() {
        return Err(Error::Shape(format!(
            "fit has {} coefficients, design has {} columns",
            fit.beta.len(),
            x.ncols()
        )));
    }
    let fitted = x * DVector::from_column_slice(&fit.beta);
    let mut sums = vec![0.0; sample.n_domains()];
    let mut counts = vec![0usize; sample.n_domains()];
    for (k, &i) in rows.iter().enumerate() {
        let d = sample.domain_of_row()[i];
        sums[d] += sample.rows()[i].y.expect("sampled") - fitted[k];
        counts[d] += 1;
    }
    Ok(sample
        .domains()
        .iter()
        .enumerate()
        .filter(|(d, _)| counts[*d] > 0)
        .map(|(d, name)| {
            let m = counts[d] as f64;
            let denom = m * fit.sigma2_u + fit.sigma2_e;
            let gamma = if denom > 0.0 { m * fit.sigma2_u / denom } else { 0.0 };
            (name.clone(), gamma * sums[d] / m)
        })
        .collect())
}

/// Fitted values `x' beta + v_d` of the non-sampled rows, in frame order.
pub fn fitted_unobserved(fit: &LmmFit, frame: &LongFrame) -> Result<Vec<f64>> {
    let rows = frame.nonsampled_indices();
    let x = fit.covariates.design(frame, &rows)?;
    if x.ncols() != fit.beta.len() {
        return Err(Error::Shape(format!(
            "fit has {} coefficients, design has {} columns",
            fit.beta.len(),
            x.ncols()
        )));
    }
    let fixed = x * DVector::from_column_slice(&fit.beta);
    Ok(rows
        .iter()
        .zip(fixed.iter())
        .map(|(&i, f)| f + fit.effect(&frame.rows()[i].domain))
        .collect())
}

/// Standard-normal draws for one population: `n_domains` effect draws
/// followed by `n_rows` residual draws.
pub fn standard_draws<R: Rng + ?Sized>(
    rng: &mut R,
    n_domains: usize,
    n_rows: usize,
) -> (Vec<f64>, Vec<f64>) {
    let effects = (0..n_domains).map(|_| rng.sample(StandardNormal)).collect();
    let residuals = (0..n_rows).map(|_| rng.sample(StandardNormal)).collect();
    (effects, residuals)
}

/// `fixed + sd_u * z_d + sd_e * z_i` row by row.
pub fn compose_draw(
    fixed: &[f64],
    domain_of_row: &[usize],
    sd_u: f64,
    sd_e: f64,
    effects: &[f64],
    residuals: &[f64],
) -> Vec<f64> {
    fixed
        .iter()
        .zip(domain_of_row)
        .zip(residuals)
        .map(|((f, &d), z)| f + sd_u * effects[d] + sd_e * z)
        .collect()
}

/// Generate one population from the model on a prebuilt full design.
pub fn simulate_on_design<R: Rng + ?Sized>(
    params: &LmmParams,
    x: &DMatrix<f64>,
    domain_of_row: &[usize],
    n_domains: usize,
    rng: &mut R,
) -> Vec<f64> {
    let fixed = x * DVector::from_column_slice(&params.beta);
    let (effects, residuals) = standard_draws(rng, n_domains, x.nrows());
    compose_draw(
        fixed.as_slice(),
        domain_of_row,
        params.sigma2_u.sqrt(),
        params.sigma2_e.sqrt(),
        &effects,
        &residuals,
    )
}

/// Generate a response for every row of `frame`: one effect per domain,
/// shared across periods, plus independent residuals.
pub fn simulate_population(
    params: &LmmParams,
    covariates: &Covariates,
    frame: &LongFrame,
    seed: u64,
) -> Result<Vec<f64>> {
    params.validate()?;
    if params.beta.len() != covariates.n_terms() {
        return Err(Error::Shape(format!(
            "{} coefficients for {} covariate terms",
            params.beta.len(),
            covariates.n_terms()
        )));
    }
    let all: Vec<usize> = (0..frame.n_rows()).collect();
    let x = covariates.design(frame, &all)?;
    let mut rng = rng::stream(seed, "lmm-population", &[]);
    Ok(simulate_on_design(
        params,
        &x,
        frame.domain_of_row(),
        frame.n_domains(),
        &mut rng,
    ))
}
