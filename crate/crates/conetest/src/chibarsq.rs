//! The chi-bar-square limiting distribution: Monte Carlo sampling, exact
//! and estimated mixture weights, p-values and p-value bounds.
//!
//! A chi-bar-square draw is the squared weighted norm of the projection of
//! a Gaussian vector onto the cone:
//!
//! ```text
//! X = Z^T V^-1 Z - min_{theta in C} (Z - theta)^T V^-1 (Z - theta),
//! Z ~ N(0, V)
//! ```
//!
//! Draw `i` is generated from a counter-based stream keyed by `(seed, i)`,
//! so results do not depend on the number of worker threads.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::cone::{project, Cone};
use crate::error::{Error, Result};
use crate::structure::ConeDims;

/// Chi-square CDF with `df` degrees of freedom; `df = 0` is the point mass
/// at zero.
pub fn chi2_cdf(df: usize, x: f64) -> f64 {
    if df == 0 {
        return if x >= 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(df as f64 / 2.0, x / 2.0)
}

/// Monte Carlo sample from the chi-bar-square distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChiBarSample {
    pub draws: Vec<f64>,
    pub seed: u64,
    pub m: usize,
}

/// Mixture weights with degrees of freedom `d1..=df_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightEstimate {
    pub dfs: Vec<usize>,
    pub weights: Vec<f64>,
    /// zero for exact weights
    pub sd: Vec<f64>,
    pub exact: bool,
}

impl WeightEstimate {
    /// weights outside [-0.02, 1.02] indicate a poorly conditioned estimate
    pub fn suspicious(&self) -> bool {
        self.weights.iter().any(|&w| !(-0.02..=1.02).contains(&w))
    }
}

/// Draw `m` realizations, projecting each Gaussian draw onto the cone in
/// the metric `V^-1`.
pub fn draw_sample(
    cone: &Cone,
    v: &DMatrix<f64>,
    m: usize,
    seed: u64,
    workers: usize,
) -> Result<ChiBarSample> {
    if m == 0 {
        return Err(Error::Validation("Monte Carlo sample size must be >= 1".into()));
    }
    let q = cone.dim;
    if v.nrows() != q || v.ncols() != q {
        return Err(Error::Validation("covariance dimension mismatch".into()));
    }
    let chol = nalgebra::Cholesky::new(v.clone())
        .ok_or_else(|| Error::Numerical("sampling covariance is not positive definite".into()))?;
    let l = chol.l();
    let w = chol.inverse();

    let one_draw = |i: usize| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let eps = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = &l * eps;
        let quad = z.dot(&(&w * &z));
        let proj = project(cone, &z, &w)?;
        let x = quad - proj.objective;
        if x < -1e-9 {
            return Err(Error::Numerical(format!(
                "negative chi-bar-square draw {x} at index {i}"
            )));
        }
        Ok(x.max(0.0))
    };

    let draws: Result<Vec<f64>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        pool.install(|| (0..m).into_par_iter().map(one_draw).collect())
    } else {
        (0..m).map(one_draw).collect()
    };

    Ok(ChiBarSample {
        draws: draws?,
        seed,
        m,
    })
}

/// Closed-form weights where they exist: a cone with a single half-line and
/// no PSD factor has weights (1/2, 1/2); a purely linear cone has a single
/// unit weight.
pub fn exact_weights(cone: &Cone, dims: &ConeDims) -> Option<WeightEstimate> {
    let n_half = cone.half_line_coords().len();
    let n_psd = cone.psd_factors().len();
    if n_psd == 0 && n_half == 1 && dims.n_weights == 2 {
        Some(WeightEstimate {
            dfs: dims.dfs(),
            weights: vec![0.5, 0.5],
            sd: vec![0.0, 0.0],
            exact: true,
        })
    } else if n_psd == 0 && n_half == 0 && dims.n_weights == 1 {
        Some(WeightEstimate {
            dfs: dims.dfs(),
            weights: vec![1.0],
            sd: vec![0.0],
            exact: true,
        })
    } else {
        None
    }
}

/// empirical quantile of a sorted slice, linear interpolation
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Thresholds for the weight-estimation system: empirical quantiles of the
/// positive draws at evenly spaced probability levels in [0.15, 0.85].
fn thresholds(draws: &[f64], count: usize) -> Result<Vec<f64>> {
    let mut pos: Vec<f64> = draws.iter().copied().filter(|&x| x > 0.0).collect();
    if pos.len() < count + 1 {
        return Err(Error::Numerical(
            "too few positive draws to place thresholds".into(),
        ));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cs = Vec::with_capacity(count);
    for i in 0..count {
        let p = if count == 1 {
            0.5
        } else {
            0.15 + 0.7 * i as f64 / (count - 1) as f64
        };
        cs.push(quantile_sorted(&pos, p));
    }
    Ok(cs)
}

/// Estimate the mixture weights by solving the linear system built from the
/// two mass constraints and empirical CDF evaluations at the thresholds,
/// with standard deviations propagated from the empirical covariance of the
/// CDF estimates.
pub fn estimate_weights(sample: &ChiBarSample, dims: &ConeDims) -> Result<WeightEstimate> {
    let n = dims.n_weights;
    if n < 2 {
        return Err(Error::Validation(
            "weight estimation needs at least two mixture components".into(),
        ));
    }
    if sample.m < 100 * n {
        return Err(Error::Validation(format!(
            "Monte Carlo sample too small: need M >= {}",
            100 * n
        )));
    }
    let dfs = dims.dfs();
    let cs = thresholds(&sample.draws, n - 2)?;

    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        a[(0, j)] = 1.0;
        a[(1, j)] = if j % 2 == 0 { 1.0 } else { 0.0 };
    }
    for (r, &c) in cs.iter().enumerate() {
        for j in 0..n {
            a[(r + 2, j)] = chi2_cdf(dfs[j], c);
        }
    }

    let svd = a.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin <= 0.0 || smax / smin > 1e12 {
        return Err(Error::Numerical(
            "weight system is numerically singular; try different thresholds".into(),
        ));
    }

    let m = sample.m as f64;
    let fhat: Vec<f64> = cs
        .iter()
        .map(|&c| sample.draws.iter().filter(|&&x| x <= c).count() as f64 / m)
        .collect();
    let mut b = DVector::zeros(n);
    b[0] = 1.0;
    b[1] = 0.5;
    for (r, &f) in fhat.iter().enumerate() {
        b[r + 2] = f;
    }

    let lu = a.clone().lu();
    let weights = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("weight system solve failed".into()))?;

    // covariance of b-hat: constraint rows exact, CDF rows are correlated
    // indicator means with Cov = (F(min) - F_j F_k) / M
    let mut cov_b = DMatrix::zeros(n, n);
    for j in 0..cs.len() {
        for k in 0..cs.len() {
            let fmin = fhat[j.min(k)];
            cov_b[(j + 2, k + 2)] = (fmin - fhat[j] * fhat[k]) / m;
        }
    }
    let a_inv = lu
        .try_inverse()
        .ok_or_else(|| Error::Numerical("weight system inversion failed".into()))?;
    let cov_w = &a_inv * cov_b * a_inv.transpose();
    let sd: Vec<f64> = (0..n).map(|j| cov_w[(j, j)].max(0.0).sqrt()).collect();

    Ok(WeightEstimate {
        dfs,
        weights: weights.iter().copied().collect(),
        sd,
        exact: false,
    })
}

/// p-value from mixture weights: sum of weighted chi-square tail
/// probabilities.
pub fn pvalue_from_weights(w: &WeightEstimate, lrt: f64) -> f64 {
    w.dfs
        .iter()
        .zip(&w.weights)
        .map(|(&df, &wt)| wt * (1.0 - chi2_cdf(df, lrt)))
        .sum()
}

/// Empirical p-value: fraction of draws at or above the observed statistic.
/// Returns the estimate and whether it underflowed to zero.
pub fn pvalue_from_sample(sample: &ChiBarSample, lrt: f64) -> (f64, bool) {
    let count = sample.draws.iter().filter(|&&x| x >= lrt).count();
    let p = count as f64 / sample.m as f64;
    (p, count == 0 && lrt > 0.0)
}

/// Distribution-free bounds using only the smallest and largest degrees of
/// freedom of the mixture.
pub fn pvalue_bounds(lrt: f64, dims: &ConeDims) -> (f64, f64) {
    if dims.n_weights == 1 {
        let p = 1.0 - chi2_cdf(dims.d1, lrt);
        return (p, p);
    }
    let lower = 1.0 - (chi2_cdf(dims.d1, lrt) + chi2_cdf(dims.d1 + 1, lrt)) / 2.0;
    let upper = 1.0 - (chi2_cdf(dims.df_max - 1, lrt) + chi2_cdf(dims.df_max, lrt)) / 2.0;
    (lower, upper)
}
