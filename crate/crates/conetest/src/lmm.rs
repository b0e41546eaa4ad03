//! Maximum-likelihood estimation of linear mixed-effects models
//!
//! ```text
//! y_i = X_i beta + Z_i b_i + eps_i,   b_i ~ N(0, Gamma),  eps_i ~ N(0, sigma^2 I)
//! ```
//!
//! with a block-diagonal `Gamma`. Fitting works in an unconstrained
//! parametrization (lower-triangular square roots of the blocks and the log
//! residual variance) with analytic gradients; per-individual linear algebra
//! goes through the Woodbury identity so the cost grows with the number of
//! random effects, not the number of observations per individual.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{design_matrices, Dataset, Term};
use crate::error::{Error, Result};
use crate::optim;
use crate::structure::{
    halfvec_offset, BlockTestKind, CovarianceLayout, ModelStructure, TestStructure,
};

const LN_2PI: f64 = 1.8378770664093453;

/// A mixed model ready to fit: per-individual design matrices plus the
/// covariance layout.
#[derive(Debug, Clone)]
pub struct LmmSpec {
    pub xs: Vec<DMatrix<f64>>,
    pub zs: Vec<DMatrix<f64>>,
    pub ys: Vec<DVector<f64>>,
    pub layout: CovarianceLayout,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
}

impl LmmSpec {
    pub fn new(
        xs: Vec<DMatrix<f64>>,
        zs: Vec<DMatrix<f64>>,
        ys: Vec<DVector<f64>>,
        layout: CovarianceLayout,
        fixed_names: Vec<String>,
        random_names: Vec<String>,
    ) -> Result<LmmSpec> {
        if xs.len() != ys.len() || zs.len() != ys.len() || ys.is_empty() {
            return Err(Error::Validation(
                "design matrices and responses must cover the same individuals".into(),
            ));
        }
        let b = xs[0].ncols();
        let p = layout.p();
        for ((x, z), y) in xs.iter().zip(&zs).zip(&ys) {
            if x.ncols() != b || z.ncols() != p || x.nrows() != y.len() || z.nrows() != y.len() {
                return Err(Error::Validation(
                    "inconsistent design matrix dimensions".into(),
                ));
            }
        }
        if fixed_names.len() != b || random_names.len() != p {
            return Err(Error::Validation(
                "term name counts do not match design dimensions".into(),
            ));
        }
        Ok(LmmSpec {
            xs,
            zs,
            ys,
            layout,
            fixed_names,
            random_names,
        })
    }

    /// Build the spec from a grouped dataset and model terms.
    pub fn from_dataset(
        ds: &Dataset,
        fixed_terms: &[Term],
        random_terms: &[Term],
        layout: CovarianceLayout,
    ) -> Result<LmmSpec> {
        let dms = design_matrices(ds, fixed_terms, random_terms)?;
        let (xs, zs): (Vec<_>, Vec<_>) = dms.into_iter().unzip();
        let ys = ds.individuals.iter().map(|i| i.responses.clone()).collect();
        LmmSpec::new(
            xs,
            zs,
            ys,
            layout,
            fixed_terms.iter().map(|t| t.to_string()).collect(),
            random_terms.iter().map(|t| t.to_string()).collect(),
        )
    }

    pub fn n_individuals(&self) -> usize {
        self.ys.len()
    }

    pub fn n_obs(&self) -> usize {
        self.ys.iter().map(|y| y.len()).sum()
    }

    pub fn n_fixed(&self) -> usize {
        self.xs[0].ncols()
    }

    /// total parameter dimension in the canonical flattening
    pub fn n_params(&self) -> usize {
        self.n_fixed() + self.layout.n_params() + 1
    }

    pub fn model_structure(&self) -> ModelStructure {
        ModelStructure {
            fixed_names: self.fixed_names.clone(),
            random_names: self.random_names.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Replace all responses, keeping designs (used by the simulator).
    pub fn with_responses(&self, ys: Vec<DVector<f64>>) -> Result<LmmSpec> {
        if ys.len() != self.ys.len() || ys.iter().zip(&self.ys).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Validation("response dimensions changed".into()));
        }
        let mut s = self.clone();
        s.ys = ys;
        Ok(s)
    }
}

/// Model parameters in natural form.
#[derive(Debug, Clone)]
pub struct ParamVector {
    pub beta: DVector<f64>,
    /// one symmetric positive semidefinite matrix per covariance block
    pub gamma: Vec<DMatrix<f64>>,
    pub sigma2: f64,
}

impl ParamVector {
    /// Canonical flattening: fixed effects, then each block's column-major
    /// lower-triangular half, then the residual variance.
    pub fn flatten(&self) -> DVector<f64> {
        let n = self.beta.len()
            + self.gamma.iter().map(|g| {
                let r = g.nrows();
                r * (r + 1) / 2
            }).sum::<usize>()
            + 1;
        let mut v = DVector::zeros(n);
        let mut off = 0;
        for x in self.beta.iter() {
            v[off] = *x;
            off += 1;
        }
        for g in &self.gamma {
            let r = g.nrows();
            for j in 0..r {
                for i in j..r {
                    v[off] = g[(i, j)];
                    off += 1;
                }
            }
        }
        v[off] = self.sigma2;
        v
    }

    pub fn from_flat(theta: &DVector<f64>, b: usize, layout: &CovarianceLayout) -> Result<ParamVector> {
        if theta.len() != b + layout.n_params() + 1 {
            return Err(Error::Validation("parameter vector length mismatch".into()));
        }
        let beta = DVector::from_iterator(b, theta.iter().take(b).copied());
        let mut off = b;
        let mut gamma = Vec::with_capacity(layout.blocks.len());
        for &r in &layout.blocks {
            let mut g = DMatrix::zeros(r, r);
            for j in 0..r {
                for i in j..r {
                    g[(i, j)] = theta[off];
                    g[(j, i)] = theta[off];
                    off += 1;
                }
            }
            gamma.push(g);
        }
        Ok(ParamVector {
            beta,
            gamma,
            sigma2: theta[off],
        })
    }

    /// block-diagonal Gamma assembled from the blocks
    pub fn gamma_full(&self) -> DMatrix<f64> {
        let p: usize = self.gamma.iter().map(|g| g.nrows()).sum();
        let mut full = DMatrix::zeros(p, p);
        let mut off = 0;
        for g in &self.gamma {
            let r = g.nrows();
            full.view_mut((off, off), (r, r)).copy_from(g);
            off += r;
        }
        full
    }
}

/// Marginal log-likelihood at the given parameters, computed with a dense
/// per-individual factorization. Accepts singular (boundary) `Gamma`.
pub fn marginal_loglik(spec: &LmmSpec, params: &ParamVector) -> Result<f64> {
    if params.sigma2 <= 0.0 {
        return Err(Error::Validation("residual variance must be positive".into()));
    }
    let gamma = params.gamma_full();
    let mut ll = 0.0;
    for ((x, z), y) in spec.xs.iter().zip(&spec.zs).zip(&spec.ys) {
        let n = y.len();
        let r = y - x * &params.beta;
        let mut v = z * &gamma * z.transpose();
        for i in 0..n {
            v[(i, i)] += params.sigma2;
        }
        let chol = nalgebra::Cholesky::new(v).ok_or_else(|| {
            Error::Numerical("marginal covariance is not positive definite".into())
        })?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = r.dot(&chol.solve(&r));
        ll -= 0.5 * (n as f64 * LN_2PI + logdet + quad);
    }
    Ok(ll)
}

/// Log-likelihood and its gradient with respect to the canonical parameter
/// flattening (dense path; used for information-matrix estimation).
pub fn loglik_and_grad(spec: &LmmSpec, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
    let b = spec.n_fixed();
    let params = ParamVector::from_flat(theta, b, &spec.layout)?;
    if params.sigma2 <= 0.0 {
        return Err(Error::Validation("residual variance must be positive".into()));
    }
    let gamma = params.gamma_full();
    let p = spec.layout.p();

    let mut ll = 0.0;
    let mut g_beta = DVector::zeros(b);
    let mut m_acc = DMatrix::zeros(p, p); // sum of Z'V^-1 Z - v v'
    let mut g_sig2 = 0.0;
    for ((x, z), y) in spec.xs.iter().zip(&spec.zs).zip(&spec.ys) {
        let n = y.len();
        let r = y - x * &params.beta;
        let mut v = z * &gamma * z.transpose();
        for i in 0..n {
            v[(i, i)] += params.sigma2;
        }
        let chol = nalgebra::Cholesky::new(v).ok_or_else(|| {
            Error::Numerical("marginal covariance is not positive definite".into())
        })?;
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let vinv_r = chol.solve(&r);
        ll -= 0.5 * (n as f64 * LN_2PI + logdet + r.dot(&vinv_r));
        g_beta += x.transpose() * &vinv_r;
        let vinv_z = chol.solve(z);
        let ztvz = z.transpose() * &vinv_z;
        let vr = z.transpose() * &vinv_r;
        m_acc += &ztvz - &vr * vr.transpose();
        let vinv = chol.inverse();
        g_sig2 += -0.5 * (vinv.trace() - vinv_r.norm_squared());
    }

    let mut grad = DVector::zeros(theta.len());
    for i in 0..b {
        grad[i] = g_beta[i];
    }
    let mut block_start = 0usize;
    let mut off = b;
    for &r in &spec.layout.blocks {
        for j in 0..r {
            for i in j..r {
                let m = m_acc[(block_start + i, block_start + j)];
                grad[off] = if i == j { -0.5 * m } else { -m };
                off += 1;
            }
        }
        block_start += r;
    }
    grad[off] = g_sig2;
    Ok((ll, grad))
}

/// Options for [`fit_ml`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub gtol: f64,
    /// additional optimizer starts beyond the default one
    pub extra_starts: usize,
    /// explicit starting point; overrides the built-in starts
    pub start: Option<ParamVector>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 400,
            gtol: 1e-9,
            extra_starts: 2,
            start: None,
        }
    }
}

/// A fitted model.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParamVector,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl FitResult {
    pub fn theta(&self) -> DVector<f64> {
        self.params.flatten()
    }
}

/// Number of unconstrained optimization variables: beta, lower-triangular
/// square roots, log residual variance.
fn n_phi(spec: &LmmSpec) -> usize {
    spec.n_fixed() + spec.layout.n_params() + 1
}

/// unconstrained -> natural
fn phi_to_params(spec: &LmmSpec, phi: &DVector<f64>) -> ParamVector {
    let b = spec.n_fixed();
    let beta = DVector::from_iterator(b, phi.iter().take(b).copied());
    let mut off = b;
    let mut gamma = Vec::new();
    for &r in &spec.layout.blocks {
        let mut l = DMatrix::zeros(r, r);
        for j in 0..r {
            for i in j..r {
                l[(i, j)] = phi[off];
                off += 1;
            }
        }
        gamma.push(&l * l.transpose());
    }
    ParamVector {
        beta,
        gamma,
        sigma2: phi[off].exp(),
    }
}

/// natural -> unconstrained; singular blocks get a tiny ridge before the
/// Cholesky factorization
fn params_to_phi(spec: &LmmSpec, params: &ParamVector) -> Result<DVector<f64>> {
    let mut phi = DVector::zeros(n_phi(spec));
    let b = spec.n_fixed();
    for i in 0..b {
        phi[i] = params.beta[i];
    }
    let mut off = b;
    for g in &params.gamma {
        let r = g.nrows();
        let ridge = 1e-10 * (1.0 + g.trace().abs());
        let mut gr = g.clone();
        for i in 0..r {
            gr[(i, i)] += ridge;
        }
        let chol = nalgebra::Cholesky::new(gr)
            .ok_or_else(|| Error::Validation("covariance block is not positive semidefinite".into()))?;
        let l = chol.l();
        for j in 0..r {
            for i in j..r {
                phi[off] = l[(i, j)];
                off += 1;
            }
        }
    }
    if params.sigma2 <= 0.0 {
        return Err(Error::Validation("residual variance must be positive".into()));
    }
    phi[off] = params.sigma2.ln();
    Ok(phi)
}

/// Negative log-likelihood and gradient in the unconstrained parametrization,
/// evaluated with the Woodbury identity. Returns infinity on numerical
/// breakdown so the line search can recover.
fn neg_loglik_phi(spec: &LmmSpec, phi: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
    let b = spec.n_fixed();
    let p = spec.layout.p();
    let beta = DVector::from_iterator(b, phi.iter().take(b).copied());
    let mut off = b;
    let mut lblk = DMatrix::zeros(p, p);
    let mut bs = 0usize;
    for &r in &spec.layout.blocks {
        for j in 0..r {
            for i in j..r {
                lblk[(bs + i, bs + j)] = phi[off];
                off += 1;
            }
        }
        bs += r;
    }
    let u_log = phi[off];
    if !(-60.0..=60.0).contains(&u_log) {
        grad.fill(f64::NAN);
        return f64::INFINITY;
    }
    let sig2 = u_log.exp();

    let mut ll = 0.0;
    let mut g_beta = DVector::zeros(b);
    let mut m_acc = DMatrix::zeros(p, p);
    let mut g_sig2 = 0.0;

    for ((x, z), y) in spec.xs.iter().zip(&spec.zs).zip(&spec.ys) {
        let n = y.len();
        let r = y - x * &beta;
        if p == 0 {
            ll -= 0.5 * (n as f64 * (LN_2PI + u_log) + r.norm_squared() / sig2);
            g_beta += x.transpose() * &r / sig2;
            g_sig2 += -0.5 * (n as f64 / sig2 - r.norm_squared() / (sig2 * sig2));
            continue;
        }
        let u = z * &lblk; // n x p
        let mut a = u.transpose() * &u;
        for i in 0..p {
            a[(i, i)] += sig2;
        }
        let chol = match nalgebra::Cholesky::new(a) {
            Some(c) => c,
            None => {
                grad.fill(f64::NAN);
                return f64::INFINITY;
            }
        };
        let logdet_a: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let utr = u.transpose() * &r;
        let a_utr = chol.solve(&utr);
        let quad = (r.norm_squared() - utr.dot(&a_utr)) / sig2;
        ll -= 0.5 * ((n - p) as f64 * u_log + logdet_a + n as f64 * LN_2PI + quad);

        // V^-1 r and X' V^-1 r
        let vinv_r = (&r - &u * &a_utr) / sig2;
        g_beta += x.transpose() * &vinv_r;

        // Z' V^-1 Z = (Z'Z - Z'U A^-1 U'Z) / sig2
        let ztu = z.transpose() * &u; // p x p
        let ztz = z.transpose() * z;
        let a_utz = chol.solve(&ztu.transpose());
        let ztvz = (&ztz - &ztu * &a_utz) / sig2;
        let vr = z.transpose() * &vinv_r;
        m_acc += &ztvz - &vr * vr.transpose();

        // tr V^-1 = (n - p)/sig2 + tr A^-1
        let tr_ainv = chol.inverse().trace();
        let tr_vinv = (n - p) as f64 / sig2 + tr_ainv;
        g_sig2 += -0.5 * (tr_vinv - vinv_r.norm_squared());
    }

    // chain rule to the unconstrained variables: dll/dL = -m_acc * L on the
    // lower triangle, dll/du = sig2 * dll/dsig2
    let gl = if p > 0 { -&m_acc * &lblk } else { DMatrix::zeros(0, 0) };
    for i in 0..b {
        grad[i] = -g_beta[i];
    }
    let mut off = b;
    let mut bs = 0usize;
    for &r in &spec.layout.blocks {
        for j in 0..r {
            for i in j..r {
                grad[off] = -gl[(bs + i, bs + j)];
                off += 1;
            }
        }
        bs += r;
    }
    grad[off] = -sig2 * g_sig2;
    -ll
}

/// ordinary least squares start: beta and the residual variance
fn ols_start(spec: &LmmSpec) -> Result<(DVector<f64>, f64)> {
    let b = spec.n_fixed();
    let n = spec.n_obs();
    let mut xtx = DMatrix::zeros(b, b);
    let mut xty = DVector::zeros(b);
    for (x, y) in spec.xs.iter().zip(&spec.ys) {
        xtx += x.transpose() * x;
        xty += x.transpose() * y;
    }
    let chol = nalgebra::Cholesky::new(xtx)
        .ok_or_else(|| Error::Numerical("fixed-effect design is rank deficient".into()))?;
    let beta = chol.solve(&xty);
    let mut rss = 0.0;
    for (x, y) in spec.xs.iter().zip(&spec.ys) {
        rss += (y - x * &beta).norm_squared();
    }
    let v0 = rss / n as f64;
    if v0 <= 0.0 {
        return Err(Error::Numerical("degenerate response: zero residual variance".into()));
    }
    Ok((beta, v0))
}

/// Fit by maximum likelihood. Multi-start BFGS in the unconstrained
/// parametrization; near-zero covariance eigenvalues are snapped to the
/// boundary afterwards.
pub fn fit_ml(spec: &LmmSpec, opts: &FitOptions) -> Result<FitResult> {
    let (beta0, v0) = ols_start(spec)?;
    let b = spec.n_fixed();

    let mut starts: Vec<DVector<f64>> = Vec::new();
    if let Some(p0) = &opts.start {
        starts.push(params_to_phi(spec, p0)?);
    } else {
        // (covariance scale, residual fraction) relative to the OLS variance
        let plans = [(0.1, 0.9), (0.02, 0.98), (0.5, 0.6)];
        for &(gs, sf) in plans.iter().take(1 + opts.extra_starts) {
            let mut phi = DVector::zeros(n_phi(spec));
            for i in 0..b {
                phi[i] = beta0[i];
            }
            let mut off = b;
            for &r in &spec.layout.blocks {
                for j in 0..r {
                    for i in j..r {
                        phi[off] = if i == j { (gs * v0).sqrt() } else { 0.0 };
                        off += 1;
                    }
                }
            }
            phi[off] = (sf * v0).ln();
            starts.push(phi);
        }
    }

    let oopts = optim::Options {
        max_iter: opts.max_iter,
        gtol: opts.gtol,
    };
    let mut best: Option<optim::Minimum> = None;
    for s in starts {
        let m = optim::minimize(|x, g| neg_loglik_phi(spec, x, g), s, &oopts);
        if !m.f.is_finite() {
            continue;
        }
        match &best {
            Some(bm) if bm.f <= m.f => {}
            _ => best = Some(m),
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("all optimizer starts failed".into()))?;

    let mut params = phi_to_params(spec, &best.x);
    // boundary snapping: eigenvalues negligible next to the residual variance
    // are exact zeros of the ML problem
    let snap_tol = 1e-8 * params.sigma2;
    for g in &mut params.gamma {
        let eig = g.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&e| e < snap_tol) {
            let r = g.nrows();
            let mut snapped = DMatrix::zeros(r, r);
            for k in 0..r {
                let lam = eig.eigenvalues[k];
                if lam >= snap_tol {
                    let u = eig.eigenvectors.column(k);
                    snapped += lam * u * u.transpose();
                }
            }
            *g = snapped;
        }
    }
    let loglik = marginal_loglik(spec, &params)?;
    Ok(FitResult {
        params,
        loglik,
        converged: best.converged,
        iterations: best.iterations,
    })
}

/// Zero out the tested coordinates, producing parameters satisfying the null
/// hypothesis (e.g. to simulate under H0 or to warm-start the null fit).
pub fn constrain(params: &ParamVector, ts: &TestStructure) -> ParamVector {
    let mut out = params.clone();
    for &i in &ts.tested_fixed {
        out.beta[i] = 0.0;
    }
    for bt in &ts.block_tests {
        let g = &mut out.gamma[bt.block_index];
        let r = g.nrows();
        match &bt.kind {
            BlockTestKind::Untested => {}
            BlockTestKind::Full => g.fill(0.0),
            BlockTestKind::SubBlock { s } => {
                for j in 0..r {
                    for i in 0..r {
                        if i >= r - s || j >= r - s {
                            g[(i, j)] = 0.0;
                        }
                    }
                }
            }
            BlockTestKind::CovariancesOnly { t, parts } => match parts {
                Some(parts) => {
                    let mut part_of = Vec::with_capacity(r);
                    for (pi, &p) in parts.iter().enumerate() {
                        part_of.extend(std::iter::repeat(pi).take(p));
                    }
                    for j in 0..r {
                        for i in 0..r {
                            if part_of[i] != part_of[j] {
                                g[(i, j)] = 0.0;
                            }
                        }
                    }
                }
                None => {
                    // trailing t off-diagonals in canonical halfvec order
                    let mut offdiag: Vec<(usize, usize)> = Vec::new();
                    for j in 0..r {
                        for i in (j + 1)..r {
                            offdiag.push((i, j));
                        }
                    }
                    offdiag.sort_by_key(|&(i, j)| halfvec_offset(r, i, j));
                    for &(i, j) in &offdiag[offdiag.len() - t..] {
                        g[(i, j)] = 0.0;
                        g[(j, i)] = 0.0;
                    }
                }
            },
        }
    }
    out
}

/// Simulate responses from the model at the given parameters.
pub fn simulate<R: Rng>(spec: &LmmSpec, params: &ParamVector, rng: &mut R) -> Vec<DVector<f64>> {
    // eigenvalue square roots handle boundary (singular) blocks
    let sqrt_blocks: Vec<DMatrix<f64>> = params
        .gamma
        .iter()
        .map(|g| {
            let eig = g.clone().symmetric_eigen();
            let r = g.nrows();
            let mut s = DMatrix::zeros(r, r);
            for k in 0..r {
                let lam = eig.eigenvalues[k].max(0.0).sqrt();
                for i in 0..r {
                    s[(i, k)] = eig.eigenvectors[(i, k)] * lam;
                }
            }
            s
        })
        .collect();
    let sigma = params.sigma2.sqrt();
    spec.xs
        .iter()
        .zip(&spec.zs)
        .map(|(x, z)| {
            let n = x.nrows();
            let mut bvec = DVector::zeros(spec.layout.p());
            let mut off = 0;
            for s in &sqrt_blocks {
                let r = s.nrows();
                let e = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let bi = s * e;
                for i in 0..r {
                    bvec[off + i] = bi[i];
                }
                off += r;
            }
            let eps = DVector::from_fn(n, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
            x * &params.beta + z * &bvec + eps
        })
        .collect()
}

/// Observed Fisher information at `theta`: the negated Hessian of the
/// log-likelihood, by central finite differences of the analytic gradient.
pub fn hessian_fim(spec: &LmmSpec, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let q = theta.len();
    let mut h = DMatrix::zeros(q, q);
    for j in 0..q {
        let step = (1e-5 * theta[j].abs()).max(1e-7);
        let mut tp = theta.clone();
        tp[j] += step;
        let mut tm = theta.clone();
        tm[j] -= step;
        let (_, gp) = loglik_and_grad(spec, &tp)?;
        let (_, gm) = loglik_and_grad(spec, &tm)?;
        let col = (gp - gm) / (2.0 * step);
        for i in 0..q {
            h[(i, j)] = col[i];
        }
    }
    // FIM = -Hessian(ll), symmetrized
    let fim = -(&h + h.transpose()) / 2.0;
    Ok(fim)
}
