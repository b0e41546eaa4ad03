//! Small dense BFGS minimizer with backtracking line search, shared by the
//! model fitter and the cone projection.

use nalgebra::{DMatrix, DVector};

pub struct Options {
    pub max_iter: usize,
    /// convergence when ||grad||_inf <= gtol * (1 + |f|)
    pub gtol: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 500,
            gtol: 1e-8,
        }
    }
}

pub struct Minimum {
    pub x: DVector<f64>,
    pub f: f64,
    #[allow(dead_code)] // diagnostics, read by tests
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// accepted objective values, non-increasing
    #[allow(dead_code)] // diagnostics, read by tests
    pub trace: Vec<f64>,
}

/// Minimize a smooth function. The closure evaluates f at x and writes the
/// gradient into `grad`.
pub fn minimize<F>(mut eval: F, x0: DVector<f64>, opts: &Options) -> Minimum
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut f = eval(&x, &mut g);
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![f];

    if n == 0 {
        return Minimum {
            x,
            f,
            grad_norm: 0.0,
            iterations: 0,
            converged: true,
            trace,
        };
    }

    let mut converged = g.amax() <= opts.gtol * (1.0 + f.abs());
    let mut iter = 0;
    let mut scaled = false;
    let mut stagnant = 0usize;
    // a stalled search still counts as converged when the gradient is small
    // on a relaxed scale: the line search has hit the precision floor of f
    let relaxed = |g: &DVector<f64>, f: f64| g.amax() <= opts.gtol.sqrt() * (1.0 + f.abs());
    while !converged && iter < opts.max_iter {
        iter += 1;
        let mut dir = -(&h_inv * &g);
        let mut slope = dir.dot(&g);
        if !slope.is_finite() || slope >= 0.0 {
            // reset to steepest descent
            h_inv = DMatrix::identity(n, n);
            scaled = false;
            dir = -g.clone();
            slope = dir.dot(&g);
            if slope >= 0.0 {
                break; // gradient is zero
            }
        }

        // backtracking Armijo search
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let x_new = &x + &dir * step;
            let mut g_new = DVector::zeros(n);
            let f_new = eval(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                accepted = true;
                // BFGS update
                let s = &x_new - &x;
                let y = &g_new - &g;
                let sy = s.dot(&y);
                if sy > 1e-12 * s.norm() * y.norm() {
                    // initial Hessian scaling (Shanno): align the identity
                    // seed with the observed curvature before the first
                    // update, which matters when curvatures vary by orders
                    // of magnitude
                    if !scaled {
                        let yy = y.norm_squared();
                        if yy > 0.0 {
                            h_inv *= sy / yy;
                        }
                        scaled = true;
                    }
                    let rho = 1.0 / sy;
                    // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
                    let hy = &h_inv * &y;
                    let yhy = y.dot(&hy);
                    let ss = &s * s.transpose();
                    let hys = &hy * s.transpose();
                    h_inv = &h_inv - (&hys + hys.transpose()) * rho
                        + &ss * (rho * rho * yhy + rho);
                }
                let dec = f - f_new;
                x = x_new;
                g = g_new;
                f = f_new;
                trace.push(f);
                if dec <= 1e-12 * (1.0 + f.abs()) {
                    stagnant += 1;
                } else {
                    stagnant = 0;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || stagnant >= 3 {
            converged = converged || relaxed(&g, f);
            break;
        }
        converged = g.amax() <= opts.gtol * (1.0 + f.abs());
    }

    Minimum {
        grad_norm: g.amax(),
        x,
        f,
        iterations: iter,
        converged,
        trace,
    }
}
