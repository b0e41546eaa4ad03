//! Fisher information estimates and the sampling covariance used by the
//! chi-bar-square Monte Carlo step.
//!
//! Three sources: the observed information extracted from the fitted
//! likelihood, a parametric-bootstrap covariance of the estimator (which
//! estimates the *inverse* information directly), or a user-supplied matrix
//! read from a text file. The limiting distribution only uses the matrix up
//! to scale, so full-sample and per-observation conventions are equally
//! acceptable.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lmm::{fit_ml, hessian_fim, simulate, FitOptions, FitResult, LmmSpec};

/// Where an information estimate came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FimKind {
    /// parametric bootstrap; `failures` refits did not converge and were
    /// dropped
    Bootstrap { replicates: usize, failures: usize },
    /// finite-difference observed information at the fitted parameters
    Extracted,
    UserProvided,
}

#[derive(Debug, Clone)]
pub struct FimEstimate {
    pub matrix: DMatrix<f64>,
    pub kind: FimKind,
    /// true when `matrix` already is the inverse information (a covariance)
    pub is_inverse: bool,
}

impl FimEstimate {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The Gaussian sampling covariance `V` (inverse information), repaired
    /// to be positive definite.
    pub fn to_v(&self) -> Result<DMatrix<f64>> {
        let m = repair_pd(&self.matrix);
        if self.is_inverse {
            return Ok(m);
        }
        let chol = nalgebra::Cholesky::new(m)
            .ok_or_else(|| Error::Numerical("information matrix is not invertible".into()))?;
        Ok(chol.inverse())
    }
}

/// Symmetrize and floor small or negative eigenvalues at `1e-10 * lambda_max`
/// so downstream factorizations succeed. Idempotent on already-repaired
/// matrices.
pub fn repair_pd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) / 2.0;
    let eig = sym.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b)).max(f64::MIN_POSITIVE);
    let floor = 1e-10 * lmax;
    if eig.eigenvalues.iter().all(|&e| e >= floor) {
        return sym;
    }
    let n = sym.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k].max(floor);
        let u = eig.eigenvectors.column(k);
        out += lam * u * u.transpose();
    }
    (&out + out.transpose()) / 2.0
}

/// Observed information at the fitted parameters.
pub fn extract_fim(spec: &LmmSpec, fit: &FitResult) -> Result<FimEstimate> {
    let fim = hessian_fim(spec, &fit.theta())?;
    Ok(FimEstimate {
        matrix: fim,
        kind: FimKind::Extracted,
        is_inverse: false,
    })
}

/// Parametric bootstrap: simulate `b` datasets at the fitted parameters,
/// refit each one warm-started at the fit, and return the empirical
/// covariance of the estimates. Replicate `i` uses stream `i` of the seeded
/// generator, so results do not depend on the worker count.
pub fn bootstrap_fim(
    spec: &LmmSpec,
    fit: &FitResult,
    b: usize,
    seed: u64,
    workers: usize,
) -> Result<FimEstimate> {
    if b < 2 {
        return Err(Error::Validation("bootstrap needs at least 2 replicates".into()));
    }
    let opts = FitOptions {
        start: Some(fit.params.clone()),
        extra_starts: 0,
        ..FitOptions::default()
    };
    let one = |i: usize| -> Option<nalgebra::DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let ys = simulate(spec, &fit.params, &mut rng);
        let sim = spec.with_responses(ys).ok()?;
        let refit = fit_ml(&sim, &opts).ok()?;
        refit.converged.then(|| refit.theta())
    };
    let thetas: Vec<Option<nalgebra::DVector<f64>>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        pool.install(|| (0..b).into_par_iter().map(one).collect())
    } else {
        (0..b).map(one).collect()
    };
    let ok: Vec<_> = thetas.into_iter().flatten().collect();
    let failures = b - ok.len();
    if failures * 10 > b {
        return Err(Error::Numerical(format!(
            "bootstrap unstable: {failures} of {b} refits failed"
        )));
    }
    let q = spec.n_params();
    let n = ok.len() as f64;
    let mean = ok.iter().fold(nalgebra::DVector::zeros(q), |a, t| a + t) / n;
    let mut cov = DMatrix::zeros(q, q);
    for t in &ok {
        let d = t - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    Ok(FimEstimate {
        matrix: cov,
        kind: FimKind::Bootstrap {
            replicates: b,
            failures,
        },
        is_inverse: true,
    })
}

/// Read a square matrix from a whitespace-separated text file: one row per
/// line, comment lines starting with `#` allowed.
pub fn load_fim<P: AsRef<Path>>(
    path: P,
    expected_dim: usize,
    is_inverse: bool,
) -> Result<FimEstimate> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "line {}: non-numeric matrix entry '{tok}'",
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n != expected_dim || rows.iter().any(|r| r.len() != expected_dim) {
        return Err(Error::Validation(format!(
            "information matrix must be {expected_dim} x {expected_dim}, file has {n} rows of lengths {:?}",
            rows.iter().map(|r| r.len()).collect::<Vec<_>>()
        )));
    }
    let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    let scale = 1.0 + m.amax();
    if (&m - m.transpose()).amax() > 1e-6 * scale {
        return Err(Error::Validation(
            "information matrix is not symmetric".into(),
        ));
    }
    let sym = (&m + m.transpose()) / 2.0;
    let eig = sym.symmetric_eigenvalues();
    let lmax = eig.iter().fold(0.0f64, |a, &b| a.max(b));
    if eig.iter().any(|&e| e < -1e-8 * lmax.max(1.0)) {
        return Err(Error::Validation(
            "information matrix has negative eigenvalues".into(),
        ));
    }
    Ok(FimEstimate {
        matrix: m,
        kind: FimKind::UserProvided,
        is_inverse,
    })
}
