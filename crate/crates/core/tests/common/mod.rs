//! Independent oracles shared by the integration tests. Nothing here calls
//! into the library's numerical routines.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use sae_plugin::frame::{LongFrame, UnitRecord};

/// `(domain, period, y, x, in_sample)`
pub type Row<'a> = (&'a str, u32, Option<f64>, Vec<f64>, bool);

/// Frame from rows; units are numbered within each domain in order of
/// appearance per period.
pub fn frame_from(rows: &[Row<'_>], aux: &[&str]) -> LongFrame {
    let mut counters = std::collections::HashMap::new();
    let records = rows
        .iter()
        .map(|(d, t, y, x, s)| {
            let c = counters.entry((d.to_string(), *t)).or_insert(0);
            *c += 1;
            UnitRecord {
                domain: d.to_string(),
                unit: format!("{d}-{c}"),
                period: *t,
                y: *y,
                x: x.clone(),
                in_sample: *s,
            }
        })
        .collect();
    LongFrame::new(aux.iter().map(|s| s.to_string()).collect(), records).unwrap()
}

/// Dense restricted log-likelihood, up to an additive constant:
/// `-0.5 (log|V| + log|X'V^-1 X| + r'V^-1 r)` with `r = y - X b_GLS`.
pub fn dense_reml(x: &DMatrix<f64>, y: &[f64], groups: &[usize], s2u: f64, s2e: f64) -> f64 {
    let n = y.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        let mut e = if groups[i] == groups[j] { s2u } else { 0.0 };
        if i == j {
            e += s2e;
        }
        e
    });
    let chol = v.cholesky().expect("V positive definite");
    let logdet_v: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let vinv = chol.inverse();
    let xtvx = x.transpose() * &vinv * x;
    let xtvx_chol = xtvx.clone().cholesky().expect("X'V^-1X positive definite");
    let logdet_x: f64 = 2.0 * xtvx_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let yv = DVector::from_column_slice(y);
    let beta = xtvx_chol.solve(&(x.transpose() * &vinv * &yv));
    let r = &yv - x * beta;
    let quad = (r.transpose() * &vinv * &r)[(0, 0)];
    -0.5 * (logdet_v + logdet_x + quad)
}

/// Dense GLS coefficients at given variances.
pub fn dense_gls(x: &DMatrix<f64>, y: &[f64], groups: &[usize], s2u: f64, s2e: f64) -> DVector<f64> {
    let vinv = dense_v(groups, s2u, s2e).try_inverse().unwrap();
    let yv = DVector::from_column_slice(y);
    (x.transpose() * &vinv * x)
        .try_inverse()
        .unwrap()
        * (x.transpose() * &vinv * yv)
}

pub fn dense_v(groups: &[usize], s2u: f64, s2e: f64) -> DMatrix<f64> {
    let n = groups.len();
    DMatrix::from_fn(n, n, |i, j| {
        (if groups[i] == groups[j] { s2u } else { 0.0 }) + if i == j { s2e } else { 0.0 }
    })
}

/// BLUP `s2u Z' V^-1 (y - X beta)` by dense algebra, one entry per group
/// `0..n_groups`.
pub fn dense_blup(
    x: &DMatrix<f64>,
    y: &[f64],
    groups: &[usize],
    n_groups: usize,
    beta: &[f64],
    s2u: f64,
    s2e: f64,
) -> Vec<f64> {
    let n = y.len();
    let vinv = dense_v(groups, s2u, s2e).try_inverse().unwrap();
    let r = DVector::from_column_slice(y) - x * DVector::from_column_slice(beta);
    let z = DMatrix::from_fn(n, n_groups, |i, d| if groups[i] == d { 1.0 } else { 0.0 });
    (z.transpose() * vinv * r).iter().map(|v| s2u * v).collect()
}

/// Maximise `f` over a box by repeated grid zooming: evaluate a
/// `points x points` grid, re-centre a box two cells wide around the best
/// point, and repeat until both cell widths fall below `tol`.
pub fn grid_argmax_2d(
    f: impl Fn(f64, f64) -> f64,
    mut lo: [f64; 2],
    mut hi: [f64; 2],
    points: usize,
    tol: f64,
) -> (f64, f64) {
    let floor = lo;
    loop {
        let step = [(hi[0] - lo[0]) / (points - 1) as f64, (hi[1] - lo[1]) / (points - 1) as f64];
        let mut best = (f64::NEG_INFINITY, lo[0], lo[1]);
        for i in 0..points {
            for j in 0..points {
                let (a, b) = (lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]);
                let v = f(a, b);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        if step[0] < tol && step[1] < tol {
            return (best.1, best.2);
        }
        lo = [(best.1 - 2.0 * step[0]).max(floor[0]), (best.2 - 2.0 * step[1]).max(floor[1])];
        hi = [best.1 + 2.0 * step[0], best.2 + 2.0 * step[1]];
    }
}

/// Exhaustive CART split: every feature and every midpoint between
/// consecutive distinct values, children's sum of squared deviations
/// recomputed from scratch. Ties keep the lowest feature, then the smallest
/// threshold. Returns `(feature, threshold, sse)`.
pub fn brute_force_split(x: &DMatrix<f64>, y: &[f64], min_leaf: usize) -> Option<(usize, f64, f64)> {
    let n = y.len();
    let sse = |idx: &[usize]| {
        let m = idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (y[i] - m).powi(2)).sum::<f64>()
    };
    let mut best: Option<(usize, f64, f64)> = None;
    for j in 0..x.ncols() {
        let mut vals: Vec<f64> = (0..n).map(|i| x[(i, j)]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| x[(i, j)] <= t);
            if l.len() < min_leaf.max(1) || r.len() < min_leaf.max(1) {
                continue;
            }
            let s = sse(&l) + sse(&r);
            if best.is_none_or(|b| s < b.2 - 1e-9 * b.2.abs().max(1e-300)) {
                best = Some((j, t, s));
            }
        }
    }
    best
}

/// Lower order statistic of rank `ceil(p m)` (rank 1 for tiny `p`).
pub fn lower_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
