//! The closed convex cone arising as the tangent-cone intersection of the
//! two hypotheses, and metric projections onto it.
//!
//! A cone is a product of factors over a partition of the q coordinates:
//! a zero space, a linear space, half-lines, and positive semidefinite
//! factors (each with a paired free rectangle of cross covariances).
//! Projections minimize `(z - theta)^T W (z - theta)` over the cone for a
//! positive-definite metric W.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::optim;
use crate::structure::IndexSets;

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Zero { idx: Vec<usize> },
    Linear { idx: Vec<usize> },
    HalfLines { idx: Vec<usize> },
    /// half-vectorized symmetric matrix constrained PSD; `rect_idx` are the
    /// paired free rectangle coordinates (also present in a Linear factor)
    Psd {
        size: usize,
        idx: Vec<usize>,
        rect_idx: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cone {
    pub dim: usize,
    pub factors: Vec<Factor>,
}

impl Cone {
    pub fn from_index_sets(dim: usize, sets: &IndexSets) -> Cone {
        let mut factors = Vec::new();
        if !sets.zero.is_empty() {
            factors.push(Factor::Zero {
                idx: sets.zero.clone(),
            });
        }
        if !sets.linear.is_empty() {
            factors.push(Factor::Linear {
                idx: sets.linear.clone(),
            });
        }
        if !sets.half_lines.is_empty() {
            factors.push(Factor::HalfLines {
                idx: sets.half_lines.clone(),
            });
        }
        for f in &sets.psd {
            factors.push(Factor::Psd {
                size: f.size,
                idx: f.entry_offsets.clone(),
                rect_idx: f.rectangle_offsets.clone(),
            });
        }
        Cone { dim, factors }
    }

    /// Convenience constructor from plain coordinate lists (no PSD factors).
    pub fn from_parts(
        dim: usize,
        zero: Vec<usize>,
        linear: Vec<usize>,
        half_lines: Vec<usize>,
    ) -> Cone {
        Cone::from_index_sets(
            dim,
            &IndexSets {
                zero,
                linear,
                half_lines,
                psd: Vec::new(),
            },
        )
    }

    pub fn zero_coords(&self) -> Vec<usize> {
        self.coords(|f| matches!(f, Factor::Zero { .. }))
    }

    pub fn linear_coords(&self) -> Vec<usize> {
        self.coords(|f| matches!(f, Factor::Linear { .. }))
    }

    pub fn half_line_coords(&self) -> Vec<usize> {
        self.coords(|f| matches!(f, Factor::HalfLines { .. }))
    }

    fn coords(&self, select: impl Fn(&Factor) -> bool) -> Vec<usize> {
        let mut out = Vec::new();
        for f in &self.factors {
            if select(f) {
                match f {
                    Factor::Zero { idx } | Factor::Linear { idx } | Factor::HalfLines { idx } => {
                        out.extend(idx.iter().copied())
                    }
                    Factor::Psd { .. } => {}
                }
            }
        }
        out
    }

    pub fn psd_factors(&self) -> Vec<(usize, Vec<usize>)> {
        self.factors
            .iter()
            .filter_map(|f| match f {
                Factor::Psd { size, idx, .. } => Some((*size, idx.clone())),
                _ => None,
            })
            .collect()
    }

    /// Membership test with relative tolerance 1e-9.
    pub fn membership(&self, v: &DVector<f64>) -> bool {
        let scale = 1.0 + v.amax();
        let tol = 1e-9 * scale;
        for f in &self.factors {
            match f {
                Factor::Zero { idx } => {
                    if idx.iter().any(|&i| v[i].abs() > tol) {
                        return false;
                    }
                }
                Factor::Linear { .. } => {}
                Factor::HalfLines { idx } => {
                    if idx.iter().any(|&i| v[i] < -tol) {
                        return false;
                    }
                }
                Factor::Psd { size, idx, .. } => {
                    let m = sym_from_halfvec(*size, idx, v);
                    let entry_scale = 1.0 + m.amax();
                    let min_eig = m
                        .symmetric_eigenvalues()
                        .iter()
                        .fold(f64::INFINITY, |a, &b| a.min(b));
                    if min_eig < -1e-9 * entry_scale {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Assemble the symmetric matrix of a PSD factor from half-vectorized
/// coordinates (column-major lower triangle).
pub fn sym_from_halfvec(size: usize, idx: &[usize], v: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(size, size);
    let mut c = 0;
    for j in 0..size {
        for i in j..size {
            m[(i, j)] = v[idx[c]];
            m[(j, i)] = v[idx[c]];
            c += 1;
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub point: DVector<f64>,
    /// weighted squared distance (z - point)^T W (z - point)
    pub objective: f64,
    /// dimension of the face containing the projection (diagnostic)
    pub active_dimension: usize,
}

/// Metric projection of `z` onto the cone in the metric `w`.
///
/// Without PSD factors of size >= 2 the problem is a strictly convex QP
/// solved exactly by an active-set method. With PSD factors, the factor is
/// parametrized by its Cholesky-like square root and the smooth problem is
/// solved by multi-start BFGS.
pub fn project(cone: &Cone, z: &DVector<f64>, w: &DMatrix<f64>) -> Result<ProjectionResult> {
    if z.len() != cone.dim || w.nrows() != cone.dim || w.ncols() != cone.dim {
        return Err(Error::Validation("projection dimension mismatch".into()));
    }
    if nalgebra::Cholesky::new(w.clone()).is_none() {
        return Err(Error::Numerical("projection metric is not positive definite".into()));
    }
    let has_psd = cone.psd_factors().iter().any(|(s, _)| *s >= 2);
    let point = if has_psd {
        project_psd_path(cone, z, w)?
    } else {
        project_qp(cone, z, w)?
    };
    let diff = z - &point;
    let objective = diff.dot(&(w * &diff));
    let active_dimension = active_dim(cone, &point);
    Ok(ProjectionResult {
        point,
        objective: objective.max(0.0),
        active_dimension,
    })
}

fn active_dim(cone: &Cone, point: &DVector<f64>) -> usize {
    let scale = 1.0 + point.amax();
    let tol = 1e-8 * scale;
    let mut dim = cone.linear_coords().len();
    dim += cone
        .half_line_coords()
        .iter()
        .filter(|&&i| point[i] > tol)
        .count();
    for (size, idx) in cone.psd_factors() {
        let m = sym_from_halfvec(size, &idx, point);
        dim += m.symmetric_eigenvalues().iter().filter(|&&e| e > tol).count();
    }
    dim
}

/// Exact QP path: zero coordinates eliminated, free coordinates by block
/// elimination, half-line coordinates by an active-set iteration with
/// brute-force fallback.
fn project_qp(cone: &Cone, z: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let q = cone.dim;
    let zero: Vec<usize> = {
        let mut v = cone.zero_coords();
        // size-1 "PSD" factors are plain half-lines; none expected here,
        // from_index_sets already folds them in
        v.sort_unstable();
        v
    };
    let linear = cone.linear_coords();
    let half = cone.half_line_coords();

    // subset solve: given an active set (bitmask over `half`), fix those and
    // the zero coordinates at 0 and solve the unconstrained problem on the rest
    let solve_active = |active: u64| -> Option<(DVector<f64>, f64)> {
        let mut fixed = zero.clone();
        let mut free: Vec<usize> = linear.clone();
        for (bit, &i) in half.iter().enumerate() {
            if active & (1u64 << bit) != 0 {
                fixed.push(i);
            } else {
                free.push(i);
            }
        }
        let mut theta = DVector::zeros(q);
        if !free.is_empty() {
            // grad = -2 W_{S,:} (z - theta) = 0 with theta fixed at 0 on `fixed`
            // => W_SS theta_S = W_SS z_S + W_SO z_O
            let nf = free.len();
            let mut wss = DMatrix::zeros(nf, nf);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    wss[(a, b)] = w[(i, j)];
                }
            }
            let mut rhs = DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                let mut s = 0.0;
                for j in 0..q {
                    s += w[(i, j)] * z[j];
                }
                rhs[a] = s;
            }
            let chol = nalgebra::Cholesky::new(wss)?;
            let sol = chol.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                theta[i] = sol[a];
            }
        }
        // KKT residual: multipliers on active half-lines must be >= 0
        let resid = {
            let d = z - &theta;
            let g = w * &d; // -grad/2
            let mut worst: f64 = 0.0;
            for (bit, &i) in half.iter().enumerate() {
                if active & (1u64 << bit) != 0 {
                    // lambda_i = -2 W_i. (z - theta) >= 0  <=>  g[i] <= 0
                    worst = worst.max(g[i]);
                } else {
                    worst = worst.max(-theta[i]);
                }
            }
            worst
        };
        Some((theta, resid))
    };

    let scale = 1.0 + z.amax();
    let tol = 1e-9 * scale;

    if half.is_empty() {
        let (theta, _) = solve_active(0)
            .ok_or_else(|| Error::Numerical("singular metric sub-block in projection".into()))?;
        return Ok(theta);
    }
    if half.len() > 63 {
        return Err(Error::Validation("too many half-line coordinates".into()));
    }

    // primal-dual active-set iteration
    let mut active: u64 = 0;
    for (bit, &i) in half.iter().enumerate() {
        if z[i] < 0.0 {
            active |= 1 << bit;
        }
    }
    let mut visited = std::collections::HashSet::new();
    for _ in 0..100 {
        if !visited.insert(active) {
            break; // cycle, fall back to enumeration
        }
        let (theta, resid) = solve_active(active)
            .ok_or_else(|| Error::Numerical("singular metric sub-block in projection".into()))?;
        if resid <= tol.max(1e-8 * scale) {
            return Ok(theta);
        }
        let d = z - &theta;
        let g = w * &d;
        let mut next: u64 = 0;
        for (bit, &i) in half.iter().enumerate() {
            let is_active = active & (1 << bit) != 0;
            let viol = if is_active { g[i] > 0.0 } else { theta[i] < 0.0 };
            let stays = if is_active { g[i] > 0.0 } else { theta[i] >= 0.0 };
            // active next iff (active and multiplier ok stays active is wrong);
            // use theta - lambda rule: active where theta_i - lambda_i < 0
            let lambda = if is_active { -g[i] } else { 0.0 };
            let th = if is_active { 0.0 } else { theta[i] };
            let _ = (viol, stays);
            if th - lambda < 0.0 {
                next |= 1 << bit;
            }
        }
        if next == active {
            break;
        }
        active = next;
    }

    // brute-force enumeration over active subsets (exact for small counts)
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0..(1u64 << half.len()) {
        if let Some((theta, resid)) = solve_active(mask) {
            let feasible = half
                .iter()
                .enumerate()
                .all(|(bit, &i)| mask & (1 << bit) != 0 || theta[i] >= -tol);
            if feasible {
                let ok = resid <= 1e-8 * scale;
                let d = z - &theta;
                let obj = d.dot(&(w * &d));
                if ok {
                    return Ok(theta);
                }
                match &best {
                    Some((_, b)) if *b <= obj => {}
                    _ => best = Some((theta, obj)),
                }
            }
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::Numerical("projection failed on all active sets".into()))
}

/// Smooth multi-start path for cones with PSD factors of size >= 2.
/// Half-lines are squared scalars and PSD factors are parametrized by a
/// lower-triangular square root, which keeps all iterates feasible.
fn project_psd_path(cone: &Cone, z: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let q = cone.dim;
    let linear = cone.linear_coords();
    let half = cone.half_line_coords();
    let psd = cone.psd_factors();

    // variable layout: linear coords, half-line square roots, then each
    // factor's lower-triangular entries (column-major)
    let n_var = linear.len() + half.len() + psd.iter().map(|(s, _)| s * (s + 1) / 2).sum::<usize>();

    let assemble = |v: &DVector<f64>| -> DVector<f64> {
        let mut theta = DVector::zeros(q);
        for (a, &i) in linear.iter().enumerate() {
            theta[i] = v[a];
        }
        let mut off = linear.len();
        for &i in &half {
            theta[i] = v[off] * v[off];
            off += 1;
        }
        for (s, idx) in &psd {
            let s = *s;
            let mut l = DMatrix::zeros(s, s);
            for j in 0..s {
                for i in j..s {
                    l[(i, j)] = v[off];
                    off += 1;
                }
            }
            let m = &l * l.transpose();
            let mut c = 0;
            for j in 0..s {
                for i in j..s {
                    theta[idx[c]] = m[(i, j)];
                    c += 1;
                }
            }
        }
        theta
    };

    let mut eval = |v: &DVector<f64>, grad: &mut DVector<f64>| -> f64 {
        let theta = assemble(v);
        let d = z - &theta;
        let wd = w * &d;
        let f = d.dot(&wd);
        // dtheta/df chain: df/dtheta = -2 * wd
        let gt = -2.0 * wd;
        for (a, &i) in linear.iter().enumerate() {
            grad[a] = gt[i];
        }
        let mut off = linear.len();
        for &i in &half {
            grad[off] = gt[i] * 2.0 * v[off];
            off += 1;
        }
        for (s, idx) in &psd {
            let s = *s;
            let lt_len = s * (s + 1) / 2;
            let mut l = DMatrix::zeros(s, s);
            let mut c = off;
            for j in 0..s {
                for i in j..s {
                    l[(i, j)] = v[c];
                    c += 1;
                }
            }
            // symmetric gradient matrix: halves on off-diagonals
            let mut m = DMatrix::zeros(s, s);
            let mut c2 = 0;
            for j in 0..s {
                for i in j..s {
                    let g = gt[idx[c2]];
                    if i == j {
                        m[(i, j)] = g;
                    } else {
                        m[(i, j)] = g / 2.0;
                        m[(j, i)] = g / 2.0;
                    }
                    c2 += 1;
                }
            }
            let gl = 2.0 * &m * &l;
            let mut c3 = off;
            for j in 0..s {
                for i in j..s {
                    grad[c3] = gl[(i, j)];
                    c3 += 1;
                }
            }
            off += lt_len;
        }
        f
    };

    // start (a): clipped eigendecomposition of the relevant parts of z
    let mut start_clip = DVector::zeros(n_var);
    for (a, &i) in linear.iter().enumerate() {
        start_clip[a] = z[i];
    }
    let mut off = linear.len();
    for &i in &half {
        start_clip[off] = z[i].max(0.0).sqrt();
        off += 1;
    }
    for (s, idx) in &psd {
        let s = *s;
        let m = sym_from_halfvec(s, idx, z);
        let eig = m.symmetric_eigen();
        // L = U diag(sqrt(max(lambda,0)))
        let mut l = DMatrix::zeros(s, s);
        for k in 0..s {
            let lam = eig.eigenvalues[k].max(0.0).sqrt();
            for i in 0..s {
                l[(i, k)] = eig.eigenvectors[(i, k)] * lam;
            }
        }
        // not triangular; fold into lower-triangular via QR of L^T
        let lq = (l * 1.0).transpose().qr();
        let r = lq.r();
        for j in 0..s {
            for i in j..s {
                start_clip[off] = r[(j, i)];
                off += 1;
            }
        }
    }

    // start (b): everything at the origin
    let start_zero = {
        let mut v = DVector::zeros(n_var);
        for (a, &i) in linear.iter().enumerate() {
            v[a] = z[i];
        }
        v
    };

    // start (c): small deterministic perturbation of (a)
    let start_pert = {
        let mut v = start_clip.clone();
        for (k, x) in v.iter_mut().enumerate() {
            *x += 1e-2 * (1.0 + x.abs()) * if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        v
    };

    let opts = optim::Options {
        max_iter: 500,
        gtol: 1e-10,
    };
    let mut best: Option<(DVector<f64>, f64)> = None;
    for start in [start_clip, start_zero, start_pert] {
        let m = optim::minimize(&mut eval, start, &opts);
        let theta = assemble(&m.x);
        let d = z - &theta;
        let obj = d.dot(&(w * &d));
        match &best {
            Some((_, b)) if *b <= obj => {}
            _ => best = Some((theta, obj)),
        }
    }
    best.map(|(t, _)| t)
        .ok_or_else(|| Error::Numerical("projection failed on all starts".into()))
}
