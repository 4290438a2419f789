//! Fast gradient projection solver for the (isotropic) TV proximal map.
//!
//! Solves `argmin_x 0.5*|x-z|^2 + lambda*TV(x) (+ nonnegativity)` through its
//! dual, where the per-pixel gradient magnitudes couple the two difference
//! directions. The dual variables can be carried across calls as a warm
//! start; the t-sequence restarts every call because the dual objective
//! changes with `z`.

use std::sync::Arc;

use crate::blockspace::Shape;
use crate::error::{Error, Result};
use crate::operators::{grad_adjoint, grad_forward, GradAxis};
use crate::proxlib::{ProxFn, ProxFunction, ProxWarmState};

/// Isotropic total variation `sum_ij |(grad x)_ij|_2` of a `rows x cols`
/// image.
pub fn tv_value(shape: &Shape, x: &[f64]) -> Result<f64> {
    let (rows, cols) = shape
        .as_2d()
        .ok_or_else(|| Error::shape("tv_value requires a 2-D shape"))?;
    if x.len() != rows * cols {
        return Err(Error::shape("tv_value: image length"));
    }
    let mut gh = vec![0.0; x.len()];
    let mut gv = vec![0.0; x.len()];
    grad_forward(GradAxis::Horizontal, rows, cols, x, &mut gh);
    grad_forward(GradAxis::Vertical, rows, cols, x, &mut gv);
    Ok(gh
        .iter()
        .zip(&gv)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .sum())
}

struct TvProxFgp {
    shape: Shape,
    rows: usize,
    cols: usize,
    alpha: f64,
    nonneg: bool,
    iters: usize,
    warm: bool,
}

impl TvProxFgp {
    fn project(&self, v: f64) -> f64 {
        if self.nonneg {
            v.max(0.0)
        } else {
            v
        }
    }

    /// `x = P_C(z - lambda * (Gh^T p + Gv^T q))` into `x`.
    fn primal_from_dual(&self, lambda: f64, z: &[f64], p: &[f64], q: &[f64], x: &mut [f64]) {
        let mut lh = vec![0.0; z.len()];
        let mut lv = vec![0.0; z.len()];
        grad_adjoint(GradAxis::Horizontal, self.rows, self.cols, p, &mut lh);
        grad_adjoint(GradAxis::Vertical, self.rows, self.cols, q, &mut lv);
        for i in 0..z.len() {
            x[i] = self.project(z[i] - lambda * (lh[i] + lv[i]));
        }
    }

    fn prox_objective(&self, lambda: f64, z: &[f64], x: &[f64]) -> f64 {
        let quad: f64 = x.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        0.5 * quad + lambda * tv_value(&self.shape, x).expect("shape fixed")
    }

    fn run(&self, lambda: f64, z: &[f64], warm: Option<&mut ProxWarmState>) -> Vec<f64> {
        let n = z.len();
        let proj_z: Vec<f64> = z.iter().map(|&v| self.project(v)).collect();
        if lambda <= 0.0 {
            return proj_z;
        }
        let (mut p, mut q) = match warm.as_deref() {
            Some(ProxWarmState::FgpDual { p, q }) if p.len() == n && q.len() == n => {
                (p.clone(), q.clone())
            }
            _ => (vec![0.0; n], vec![0.0; n]),
        };
        let mut rp = p.clone();
        let mut rq = q.clone();
        let mut t = 1.0f64;
        let mut x = vec![0.0; n];
        let mut gh = vec![0.0; n];
        let mut gv = vec![0.0; n];
        let step = 1.0 / (8.0 * lambda);
        for _ in 0..self.iters {
            self.primal_from_dual(lambda, z, &rp, &rq, &mut x);
            grad_forward(GradAxis::Horizontal, self.rows, self.cols, &x, &mut gh);
            grad_forward(GradAxis::Vertical, self.rows, self.cols, &x, &mut gv);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..n {
                let mut pn = rp[i] + step * gh[i];
                let mut qn = rq[i] + step * gv[i];
                let mag = (pn * pn + qn * qn).sqrt();
                if mag > 1.0 {
                    pn /= mag;
                    qn /= mag;
                }
                rp[i] = pn + beta * (pn - p[i]);
                rq[i] = qn + beta * (qn - q[i]);
                p[i] = pn;
                q[i] = qn;
            }
            t = t_next;
        }
        self.primal_from_dual(lambda, z, &p, &q, &mut x);
        if let Some(state) = warm {
            *state = ProxWarmState::FgpDual { p, q };
        }
        // monotone safeguard: never do worse than the plain projection
        if self.prox_objective(lambda, z, &x) <= self.prox_objective(lambda, z, &proj_z) {
            x
        } else {
            proj_z
        }
    }
}

impl ProxFn for TvProxFgp {
    fn value(&self, x: &[f64]) -> f64 {
        if self.nonneg && x.iter().any(|&v| v < 0.0) {
            return f64::INFINITY;
        }
        self.alpha * tv_value(&self.shape, x).expect("shape fixed")
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.rows * self.cols);
        self.run(sigma * self.alpha, z, None)
    }

    fn prox_warm(&self, sigma: f64, z: &[f64], warm: &mut ProxWarmState) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.rows * self.cols);
        if !self.warm {
            return self.prox(sigma, z);
        }
        self.run(sigma * self.alpha, z, Some(warm))
    }

    fn domain(&self) -> String {
        if self.nonneg {
            "nonnegative images".into()
        } else {
            "all images".into()
        }
    }
}

/// Approximate prox of `alpha*TV (+ nonnegativity)` via FGP on the dual.
/// `warm` lets `prox_warm` reuse the dual state owned by the caller.
pub fn tv_prox_fgp(
    shape: &Shape,
    alpha: f64,
    nonneg: bool,
    iters: usize,
    warm: bool,
) -> Result<ProxFunction> {
    let (rows, cols) = shape
        .as_2d()
        .ok_or_else(|| Error::shape("tv_prox_fgp requires a 2-D shape"))?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("tv_prox_fgp: alpha >= 0"));
    }
    if iters == 0 {
        return Err(Error::invalid("tv_prox_fgp: iters >= 1"));
    }
    Ok(Arc::new(TvProxFgp {
        shape: shape.clone(),
        rows,
        cols,
        alpha,
        nonneg,
        iters,
        warm,
    }))
}
