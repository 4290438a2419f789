//! Optimality measures against a stored saddle reference: Bregman-style
//! distance functions, the theorem constants and metrics, reference
//! computation/persistence, and empirical rate fitting.
//!
//! All distance evaluations use the cached subgradient pair
//! `q = (-A* y_sharp, A x_sharp)`, so they cost no operator applications.

use std::fs;
use std::path::{Path, PathBuf};

use crate::blockspace::{BlockVector, Shape};
use crate::error::{Error, Result};
use crate::solvers::{SaddleProblem, StepPlan, Variant};

// ---------------------------------------------------------------------------
// Saddle reference
// ---------------------------------------------------------------------------

/// Approximate saddle point with its certificate: the residual of one full
/// deterministic primal-dual step at `(x_sharp, y_sharp)` must stay below
/// `tolerance`, re-checked whenever a reference is loaded.
pub struct SaddleReference {
    pub x_sharp: Vec<f64>,
    pub y_sharp: BlockVector,
    /// Primal objective at `x_sharp`.
    pub objective: f64,
    /// `-A* y_sharp`.
    pub q_primal: Vec<f64>,
    /// `A x_sharp`.
    pub q_dual: BlockVector,
    pub residual: f64,
    pub tolerance: f64,
    pub tau: f64,
    pub sigma: Vec<f64>,
}

/// Euclidean norm of the displacement of one full deterministic PDHG step
/// (`theta` irrelevant from a fixed point) taken at `(x, y)`.
pub fn pdhg_step_residual(
    problem: &SaddleProblem,
    x: &[f64],
    y: &BlockVector,
    tau: f64,
    sigma: &[f64],
) -> Result<f64> {
    let aty = problem.a.adjoint_full_quiet(y)?;
    let z: Vec<f64> = x.iter().zip(&aty).map(|(xi, ai)| xi - tau * ai).collect();
    let x_new = problem.g.prox(tau, &z);
    let mut r2: f64 = x_new
        .iter()
        .zip(x)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let ax = problem.a.apply_full_quiet(&x_new)?;
    for i in 0..problem.n_blocks() {
        let arg: Vec<f64> = y
            .block(i)
            .iter()
            .zip(ax.block(i))
            .map(|(yi, ai)| yi + sigma[i] * ai)
            .collect();
        let yi = problem.f_conj[i].prox(sigma[i], &arg);
        r2 += yi
            .iter()
            .zip(y.block(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(r2.sqrt())
}

impl SaddleReference {
    /// Long deterministic PDHG run from zeros; `objective` evaluates the
    /// primal objective at the final iterate. Fails if the fixed-point
    /// residual does not reach `tolerance`.
    pub fn compute(
        problem: &SaddleProblem,
        tau: f64,
        sigma: &[f64],
        iters: usize,
        tolerance: f64,
        objective: &dyn Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        if sigma.len() != problem.n_blocks() {
            return Err(Error::shape("compute reference: one sigma per block"));
        }
        if !(tolerance > 0.0) {
            return Err(Error::Reference("tolerance must be positive".into()));
        }
        let n = problem.n_blocks();
        let mut x = vec![0.0; problem.a.in_shape().numel()];
        let mut y = problem.a.y_zeros();
        let mut y_bar = y.clone();
        for _ in 0..iters {
            let aty = problem.a.adjoint_full_quiet(&y_bar)?;
            let z: Vec<f64> = x.iter().zip(&aty).map(|(xi, ai)| xi - tau * ai).collect();
            x = problem.g.prox(tau, &z);
            let ax = problem.a.apply_full_quiet(&x)?;
            for i in 0..n {
                let arg: Vec<f64> = y
                    .block(i)
                    .iter()
                    .zip(ax.block(i))
                    .map(|(yi, ai)| yi + sigma[i] * ai)
                    .collect();
                let yi_new = problem.f_conj[i].prox(sigma[i], &arg);
                {
                    let old = y.block(i);
                    let bar = y_bar.block_mut(i);
                    for ((b, &new), &old) in bar.iter_mut().zip(&yi_new).zip(old) {
                        *b = 2.0 * new - old;
                    }
                }
                y.block_mut(i).copy_from_slice(&yi_new);
            }
            if !x.iter().all(|v| v.is_finite()) || !y.all_finite() {
                return Err(Error::Reference("reference run diverged".into()));
            }
        }
        let residual = pdhg_step_residual(problem, &x, &y, tau, sigma)?;
        if residual > tolerance {
            return Err(Error::Reference(format!(
                "fixed-point residual {residual} above tolerance {tolerance} after {iters} iterations"
            )));
        }
        let mut q_primal = problem.a.adjoint_full_quiet(&y)?;
        for v in q_primal.iter_mut() {
            *v = -*v;
        }
        let q_dual = problem.a.apply_full_quiet(&x)?;
        Ok(SaddleReference {
            objective: objective(&x),
            x_sharp: x,
            y_sharp: y,
            q_primal,
            q_dual,
            residual,
            tolerance,
            tau,
            sigma: sigma.to_vec(),
        })
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        // Append rather than with_extension: keys may contain dots, which
        // with_extension would truncate, aliasing distinct references.
        let append = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        (append(".bin"), append(".meta"))
    }

    /// Writes `<stem>.bin` (x then y blocks, little-endian f64) and
    /// `<stem>.meta` (text metadata).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin_path, meta_path) = Self::paths(stem);
        let mut bytes =
            Vec::with_capacity(8 * (self.x_sharp.len() + self.y_sharp.numel()));
        for &v in &self.x_sharp {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.y_sharp.n_blocks() {
            for &v in self.y_sharp.block(i) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(&bin_path, bytes)?;
        let mut meta = String::new();
        meta.push_str("spdhg-reference v1\n");
        meta.push_str(&format!("objective {:.17e}\n", self.objective));
        meta.push_str(&format!("residual {:.17e}\n", self.residual));
        meta.push_str(&format!("tolerance {:.17e}\n", self.tolerance));
        meta.push_str(&format!("tau {:.17e}\n", self.tau));
        let sig: Vec<String> = self.sigma.iter().map(|s| format!("{s:.17e}")).collect();
        meta.push_str(&format!("sigma {}\n", sig.join(" ")));
        meta.push_str(&format!("x_len {}\n", self.x_sharp.len()));
        let shapes: Vec<String> = self
            .y_sharp
            .shapes()
            .iter()
            .map(|s| s.to_string())
            .collect();
        meta.push_str(&format!("y_shapes {}\n", shapes.join(" ")));
        fs::write(&meta_path, meta)?;
        Ok(())
    }

    /// Loads and re-certifies a reference against `problem`: shapes must
    /// match and the freshly computed fixed-point residual must stay below
    /// the stored tolerance.
    pub fn load(problem: &SaddleProblem, stem: &Path) -> Result<Self> {
        let (bin_path, meta_path) = Self::paths(stem);
        let meta = fs::read_to_string(&meta_path)?;
        let mut objective = None;
        let mut tolerance = None;
        let mut tau = None;
        let mut sigma: Option<Vec<f64>> = None;
        let mut x_len = None;
        let mut y_shapes: Option<Vec<Shape>> = None;
        let mut lines = meta.lines();
        match lines.next() {
            Some("spdhg-reference v1") => {}
            other => {
                return Err(Error::Reference(format!(
                    "unknown reference header {other:?}"
                )));
            }
        }
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line
                .split_once(' ')
                .ok_or_else(|| Error::Reference(format!("malformed metadata line {line:?}")))?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Reference(format!("bad float {s:?}: {e}")))
            };
            match key {
                "objective" => objective = Some(parse(rest)?),
                "residual" => {} // informational; re-derived below
                "tolerance" => tolerance = Some(parse(rest)?),
                "tau" => tau = Some(parse(rest)?),
                "sigma" => {
                    sigma = Some(
                        rest.split_whitespace()
                            .map(parse)
                            .collect::<Result<Vec<f64>>>()?,
                    )
                }
                "x_len" => {
                    x_len = Some(rest.parse::<usize>().map_err(|e| {
                        Error::Reference(format!("bad x_len {rest:?}: {e}"))
                    })?)
                }
                "y_shapes" => {
                    y_shapes = Some(
                        rest.split_whitespace()
                            .map(parse_shape)
                            .collect::<Result<Vec<Shape>>>()?,
                    )
                }
                other => {
                    return Err(Error::Reference(format!("unknown metadata key {other:?}")));
                }
            }
        }
        let objective =
            objective.ok_or_else(|| Error::Reference("missing objective".into()))?;
        let tolerance =
            tolerance.ok_or_else(|| Error::Reference("missing tolerance".into()))?;
        let tau = tau.ok_or_else(|| Error::Reference("missing tau".into()))?;
        let sigma = sigma.ok_or_else(|| Error::Reference("missing sigma".into()))?;
        let x_len = x_len.ok_or_else(|| Error::Reference("missing x_len".into()))?;
        let y_shapes = y_shapes.ok_or_else(|| Error::Reference("missing y_shapes".into()))?;

        if x_len != problem.a.in_shape().numel() {
            return Err(Error::Reference("reference x length does not match problem".into()));
        }
        if y_shapes.len() != problem.n_blocks()
            || y_shapes
                .iter()
                .zip(problem.a.out_shapes())
                .any(|(a, b)| a != b)
        {
            return Err(Error::Reference("reference y shapes do not match problem".into()));
        }
        if sigma.len() != problem.n_blocks() {
            return Err(Error::Reference("reference sigma length mismatch".into()));
        }

        let bytes = fs::read(&bin_path)?;
        let total = x_len + y_shapes.iter().map(|s| s.numel()).sum::<usize>();
        if bytes.len() != 8 * total {
            return Err(Error::Reference(format!(
                "reference binary holds {} bytes, expected {}",
                bytes.len(),
                8 * total
            )));
        }
        let mut vals = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
        let x_sharp: Vec<f64> = vals.by_ref().take(x_len).collect();
        let mut y_sharp = BlockVector::zeros(&y_shapes);
        for i in 0..y_shapes.len() {
            let m = y_shapes[i].numel();
            let blk: Vec<f64> = vals.by_ref().take(m).collect();
            y_sharp.block_mut(i).copy_from_slice(&blk);
        }

        let residual = pdhg_step_residual(problem, &x_sharp, &y_sharp, tau, &sigma)?;
        if residual > tolerance {
            return Err(Error::Reference(format!(
                "stored reference fails its certificate: residual {residual} > tolerance {tolerance}"
            )));
        }
        let mut q_primal = problem.a.adjoint_full_quiet(&y_sharp)?;
        for v in q_primal.iter_mut() {
            *v = -*v;
        }
        let q_dual = problem.a.apply_full_quiet(&x_sharp)?;
        Ok(SaddleReference {
            x_sharp,
            y_sharp,
            objective,
            q_primal,
            q_dual,
            residual,
            tolerance,
            tau,
            sigma,
        })
    }
}

fn parse_shape(s: &str) -> Result<Shape> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| Error::Reference(format!("bad shape {s:?}: {e}")))
        })
        .collect::<Result<Vec<usize>>>()?;
    match dims.as_slice() {
        [n] => Shape::d1(*n),
        [r, c] => Shape::d2(*r, *c),
        _ => Err(Error::Reference(format!("bad shape {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Distance functions
// ---------------------------------------------------------------------------

/// Per-block `F_i(y_i) = f_i*(y_i) - f_i*(y_sharp_i) - <A_i x_sharp, y_i - y_sharp_i>`.
pub fn dist_f_blocks(y: &BlockVector, r: &SaddleReference, problem: &SaddleProblem) -> Vec<f64> {
    (0..problem.n_blocks())
        .map(|i| {
            let fi = problem.f_conj[i].value(y.block(i));
            let fi_sharp = problem.f_conj[i].value(r.y_sharp.block(i));
            let cross: f64 = r
                .q_dual
                .block(i)
                .iter()
                .zip(y.block(i).iter().zip(r.y_sharp.block(i)))
                .map(|(&q, (&yi, &ys))| q * (yi - ys))
                .sum();
            fi - fi_sharp - cross
        })
        .collect()
}

/// `sum_i F_i`; nonnegative whenever the reference is a saddle point.
pub fn dist_f(y: &BlockVector, r: &SaddleReference, problem: &SaddleProblem) -> f64 {
    dist_f_blocks(y, r, problem).iter().sum()
}

/// Sampling-weighted `sum_i (1/p_i - 1) F_i`; zero under full sampling.
pub fn dist_f_p(
    y: &BlockVector,
    r: &SaddleReference,
    problem: &SaddleProblem,
    p: &[f64],
) -> f64 {
    dist_f_blocks(y, r, problem)
        .iter()
        .zip(p)
        .map(|(&fi, &pi)| (1.0 / pi - 1.0) * fi)
        .sum()
}

/// `G(x) = g(x) - g(x_sharp) - <-A* y_sharp, x - x_sharp>`.
pub fn dist_g(x: &[f64], r: &SaddleReference, problem: &SaddleProblem) -> f64 {
    let gx = problem.g.value(x);
    let gs = problem.g.value(&r.x_sharp);
    let cross: f64 = r
        .q_primal
        .iter()
        .zip(x.iter().zip(&r.x_sharp))
        .map(|(&q, (&xi, &xs))| q * (xi - xs))
        .sum();
    gx - gs - cross
}

/// Partial gap at the reference, `G(x) + sum_i F_i(y_i)`; zero exactly at
/// the reference and nonnegative when it is a saddle point.
pub fn bregman_gap(
    x: &[f64],
    y: &BlockVector,
    r: &SaddleReference,
    problem: &SaddleProblem,
) -> f64 {
    dist_g(x, r, problem) + dist_f(y, r, problem)
}

/// Ergodic-rate constant:
/// `0.5 |x0 - x_sharp|^2 / tau + 0.5 sum_i |y0_i - y_sharp_i|^2 / (p_i sigma_i) + F^p(y0)`.
pub fn theorem1_constant(
    x0: &[f64],
    y0: &BlockVector,
    r: &SaddleReference,
    problem: &SaddleProblem,
    tau: f64,
    sigma: &[f64],
    p: &[f64],
) -> f64 {
    let dx: f64 = x0
        .iter()
        .zip(&r.x_sharp)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mut c = 0.5 * dx / tau;
    for i in 0..y0.n_blocks() {
        let dy: f64 = y0
            .block(i)
            .iter()
            .zip(r.y_sharp.block(i))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        c += 0.5 * dy / (p[i] * sigma[i]);
    }
    c + dist_f_p(y0, r, problem, p)
}

/// Weighted squared distances under the metrics of the convergence
/// statements, keyed by name. Always includes the unweighted distances;
/// the linear variant adds the contraction metrics
/// `X = (1/tau + 2 mu_g) I` and `Y_i = (1/sigma_i + 2 mu_i)/p_i`, the
/// dual-accelerated variant adds `1/tau0` and
/// `Y0_i = 1/(p_i sigma0_i) + 2 mu_i (1/p_i - 1)`.
pub fn metric_distances(
    x: &[f64],
    y: &BlockVector,
    r: &SaddleReference,
    plan: &StepPlan,
    problem: &SaddleProblem,
) -> Vec<(String, f64)> {
    let dx: f64 = x
        .iter()
        .zip(&r.x_sharp)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let dy_blocks: Vec<f64> = (0..y.n_blocks())
        .map(|i| {
            y.block(i)
                .iter()
                .zip(r.y_sharp.block(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect();
    let p = plan.sampling.marginals();
    let mut out = vec![
        ("x_dist_sq".to_string(), dx),
        ("y_dist_sq".to_string(), dy_blocks.iter().sum()),
    ];
    match plan.variant {
        Variant::Linear => {
            let wx = 1.0 / plan.tau + 2.0 * problem.mu_g;
            let wy: f64 = dy_blocks
                .iter()
                .enumerate()
                .map(|(i, &d)| d * (1.0 / plan.sigma[i] + 2.0 * problem.mu[i]) / p[i])
                .sum();
            out.push(("x_dist_sq_X".to_string(), wx * dx));
            out.push(("y_dist_sq_Y".to_string(), wy));
        }
        Variant::DualAccel => {
            let wy: f64 = dy_blocks
                .iter()
                .enumerate()
                .map(|(i, &d)| {
                    d * (1.0 / (p[i] * plan.sigma[i])
                        + 2.0 * problem.mu[i] * (1.0 / p[i] - 1.0))
                })
                .sum();
            out.push(("x_dist_sq_tau0".to_string(), dx / plan.tau));
            out.push(("y_dist_sq_Y0".to_string(), wy));
        }
        Variant::Plain | Variant::PrimalAccel => {}
    }
    out
}

// ---------------------------------------------------------------------------
// Rate fitting
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RateMode {
    /// Slope of log(value) against log(k): polynomial rates.
    PowerLaw,
    /// exp(slope) of log(value) against k: per-iteration contraction factor.
    Geometric,
}

#[derive(Clone, Debug)]
pub struct RateFit {
    /// PowerLaw: the log-log slope. Geometric: the contraction factor.
    pub rate: f64,
    pub n_used: usize,
    pub n_filtered: usize,
}

/// Least-squares rate over the trailing `window` usable points
/// (`window = 0` uses all). Nonpositive values and `k = 0` are filtered.
pub fn fit_rate(series: &[(usize, f64)], window: usize, mode: RateMode) -> Result<RateFit> {
    let usable: Vec<(f64, f64)> = series
        .iter()
        .filter(|(k, v)| *k > 0 && *v > 0.0 && v.is_finite())
        .map(|&(k, v)| {
            let xk = match mode {
                RateMode::PowerLaw => (k as f64).ln(),
                RateMode::Geometric => k as f64,
            };
            (xk, v.ln())
        })
        .collect();
    let n_filtered = series.len() - usable.len();
    let tail = if window == 0 || window >= usable.len() {
        &usable[..]
    } else {
        &usable[usable.len() - window..]
    };
    if tail.len() < 10 {
        return Err(Error::invalid(format!(
            "fit_rate needs at least 10 usable points, got {}",
            tail.len()
        )));
    }
    let n = tail.len() as f64;
    let sx: f64 = tail.iter().map(|(x, _)| x).sum();
    let sy: f64 = tail.iter().map(|(_, y)| y).sum();
    let sxx: f64 = tail.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = tail.iter().map(|(x, y)| x * y).sum();
    let den = n * sxx - sx * sx;
    if den.abs() < 1e-300 {
        return Err(Error::invalid("fit_rate: degenerate abscissae"));
    }
    let slope = (n * sxy - sx * sy) / den;
    let rate = match mode {
        RateMode::PowerLaw => slope,
        RateMode::Geometric => slope.exp(),
    };
    Ok(RateFit {
        rate,
        n_used: tail.len(),
        n_filtered,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockspace::Shape;
    use crate::operators::{sparse_matrix_op, BlockOperator, SparseMatrixOp};
    use crate::proxlib::{sq_l2_datafit, ProxFunction};
    use crate::sampling::{
        eso_params, full_sampling, seeded_rng, uniform_serial, STREAM_DATA,
    };
    use crate::solvers::{initial_step_sizes_general, SaddleProblem};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn scalar_op(a: f64) -> SparseMatrixOp {
        sparse_matrix_op(&[(0, 0, a)], Shape::d1(1).unwrap(), Shape::d1(1).unwrap()).unwrap()
    }

    /// g = 0.5|x|^2, f_i* = 0.5|y_i|^2, scalar blocks; saddle at the origin.
    fn quadratic_problem(coeffs: &[f64]) -> SaddleProblem {
        let ops: Vec<SparseMatrixOp> = coeffs.iter().map(|&a| scalar_op(a)).collect();
        let a = BlockOperator::from_ops(ops).unwrap();
        let f_conj: Vec<ProxFunction> = coeffs
            .iter()
            .map(|_| sq_l2_datafit(vec![0.0], 1.0).unwrap().conjugate)
            .collect();
        let g = sq_l2_datafit(vec![0.0], 1.0).unwrap().primal;
        SaddleProblem::new(a, f_conj, g).unwrap()
    }

    fn quadratic_objective(problem: &SaddleProblem) -> impl Fn(&[f64]) -> f64 + '_ {
        // for f_i = (f_i*)^* = 0.5|.|^2: objective = g(x) + sum 0.5|A_i x|^2
        move |x: &[f64]| {
            let ax = problem.a.apply_full_quiet(x).unwrap();
            problem.g.value(x) + 0.5 * ax.norm_sq()
        }
    }

    fn reference_for(problem: &SaddleProblem) -> SaddleReference {
        let sampling = full_sampling(problem.n_blocks()).unwrap();
        let (tau, sigma) = initial_step_sizes_general(&problem.a, &sampling, 0.9).unwrap();
        SaddleReference::compute(
            problem,
            tau,
            &sigma,
            3000,
            1e-10,
            &quadratic_objective(problem),
        )
        .unwrap()
    }

    #[test]
    fn reference_of_quadratic_toy_is_the_origin() {
        let problem = quadratic_problem(&[1.0, 0.5]);
        let r = reference_for(&problem);
        for &v in &r.x_sharp {
            assert!(v.abs() < 1e-10);
        }
        assert!(r.y_sharp.norm_sq().sqrt() < 1e-10);
        assert!(r.residual <= 1e-10);
        assert!(r.objective.abs() < 1e-12);
    }

    #[test]
    fn distances_vanish_at_the_reference() {
        let problem = quadratic_problem(&[1.0, 0.5]);
        let r = reference_for(&problem);
        assert!(dist_g(&r.x_sharp, &r, &problem).abs() < 1e-15);
        assert!(dist_f(&r.y_sharp, &r, &problem).abs() < 1e-15);
        assert!(bregman_gap(&r.x_sharp, &r.y_sharp, &r, &problem).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gap_equals_squared_distance() {
        // at the origin saddle with q = 0 the gap is 0.5|x|^2 + 0.5|y|^2
        let problem = quadratic_problem(&[1.0, 0.5, 0.25]);
        let r = reference_for(&problem);
        let mut rng = seeded_rng(3, STREAM_DATA);
        for _ in 0..100 {
            let x = vec![rng.random_range(-2.0..2.0)];
            let mut y = problem.a.y_zeros();
            for i in 0..3 {
                y.block_mut(i)[0] = rng.random_range(-2.0..2.0);
            }
            let gap = bregman_gap(&x, &y, &r, &problem);
            let expect = 0.5 * x[0] * x[0] + 0.5 * y.norm_sq();
            assert_relative_eq!(gap, expect, epsilon = 1e-9, max_relative = 1e-6);
            assert!(gap >= -1e-9);
            // decomposition is the same code path
            assert_eq!(
                gap,
                dist_g(&x, &r, &problem) + dist_f(&y, &r, &problem)
            );
        }
    }

    #[test]
    fn dist_g_against_symbolic_quadratic_expansion() {
        // x_sharp = 0.7, y_sharp = -0.7 satisfies A* y_sharp = -x_sharp for A = 1,
        // so G(x) = 0.5 (x - x_sharp)^2 regardless of saddle status
        let problem = quadratic_problem(&[1.0]);
        let mut y_sharp = problem.a.y_zeros();
        y_sharp.block_mut(0)[0] = -0.7;
        let r = SaddleReference {
            x_sharp: vec![0.7],
            y_sharp: y_sharp.clone(),
            objective: 0.0,
            q_primal: vec![0.7],
            q_dual: {
                let mut q = problem.a.y_zeros();
                q.block_mut(0)[0] = 0.7;
                q
            },
            residual: 0.0,
            tolerance: 1.0,
            tau: 0.5,
            sigma: vec![0.5],
        };
        for &x in &[-1.0, 0.0, 0.7, 2.5] {
            let g = dist_g(&[x], &r, &problem);
            assert_relative_eq!(g, 0.5 * (x - 0.7) * (x - 0.7), epsilon = 1e-14);
        }

        // F against the symbolic expansion with a non-saddle reference
        let mut y = problem.a.y_zeros();
        y.block_mut(0)[0] = 1.3;
        let f = dist_f(&y, &r, &problem);
        // f*(y) - f*(ys) - q (y - ys) with q = A x_sharp = 0.7
        let expect = 0.5 * 1.3 * 1.3 - 0.5 * 0.7 * 0.7 - 0.7 * (1.3 - (-0.7));
        assert_relative_eq!(f, expect, epsilon = 1e-14);
    }

    #[test]
    fn weighted_dual_distance_weights() {
        let problem = quadratic_problem(&[1.0, 1.0, 1.0]);
        let r = reference_for(&problem);
        let mut y = problem.a.y_zeros();
        y.block_mut(0)[0] = 1.0;
        y.block_mut(1)[0] = -2.0;
        y.block_mut(2)[0] = 0.5;
        let blocks = dist_f_blocks(&y, &r, &problem);
        // mixed marginals: weights 1/p - 1 = (2, 0, 0.5)
        let p = [1.0 / 3.0, 1.0, 2.0 / 3.0];
        let expect = 2.0 * blocks[0] + 0.0 * blocks[1] + 0.5 * blocks[2];
        assert_relative_eq!(dist_f_p(&y, &r, &problem, &p), expect, epsilon = 1e-14);
        // full sampling: zero
        assert_eq!(dist_f_p(&y, &r, &problem, &[1.0; 3]), 0.0);
        // p = 1/2 everywhere: equals dist_f
        assert_relative_eq!(
            dist_f_p(&y, &r, &problem, &[0.5; 3]),
            dist_f(&y, &r, &problem),
            epsilon = 1e-14
        );
    }

    #[test]
    fn theorem1_constant_hand_value() {
        let problem = quadratic_problem(&[1.0, 0.5]);
        let r = reference_for(&problem);
        // zero at the start point equal to the reference
        assert_eq!(
            theorem1_constant(
                &r.x_sharp,
                &r.y_sharp,
                &r,
                &problem,
                0.5,
                &[0.5, 0.5],
                &[0.5, 0.5]
            ),
            0.0
        );
        // hand value: x0 = 1, y0 = (1, 1), tau = 1/2, sigma = p = 1/2:
        // 0.5*2*1 + 0.5*(4 + 4) + (2-1)*(0.5 + 0.5) = 1 + 4 + 1 = 6
        let mut y0 = problem.a.y_zeros();
        y0.block_mut(0)[0] = 1.0;
        y0.block_mut(1)[0] = 1.0;
        let c = theorem1_constant(
            &[1.0],
            &y0,
            &r,
            &problem,
            0.5,
            &[0.5, 0.5],
            &[0.5, 0.5],
        );
        assert_relative_eq!(c, 6.0, epsilon = 1e-9);
        // full sampling drops the third term: 1 + 0.5*(2 + 2) = 3
        let c_full = theorem1_constant(&[1.0], &y0, &r, &problem, 0.5, &[0.5, 0.5], &[1.0, 1.0]);
        assert_relative_eq!(c_full, 3.0, epsilon = 1e-9);
    }

    #[test]
    fn metric_distances_weights() {
        let problem = quadratic_problem(&[1.0]);
        let r = reference_for(&problem);
        // single block, sigma = mu = p = 1: Theorem-3 Y weight is 3
        let plan = StepPlan {
            variant: Variant::Linear,
            sampling: full_sampling(1).unwrap(),
            tau: 0.5,
            sigma: vec![1.0],
            theta: 0.9,
            sigma_tilde0: None,
            eso: eso_params(
                &full_sampling(1).unwrap(),
                &problem.a,
                0.5,
                &[1.0],
            )
            .unwrap(),
        };
        let mut y = problem.a.y_zeros();
        y.block_mut(0)[0] = 2.0;
        let m = metric_distances(&[1.0], &y, &r, &plan, &problem);
        let get = |name: &str| {
            m.iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .unwrap()
        };
        assert_relative_eq!(get("x_dist_sq"), 1.0, epsilon = 1e-9);
        assert_relative_eq!(get("y_dist_sq"), 4.0, epsilon = 1e-9);
        // X = 1/tau + 2 mu_g = 2 + 2 = 4; Y = (1/1 + 2)/1 = 3
        assert_relative_eq!(get("x_dist_sq_X"), 4.0, epsilon = 1e-9);
        assert_relative_eq!(get("y_dist_sq_Y"), 12.0, epsilon = 1e-9);

        // dual-accelerated metric with p = 1 reduces to 1/sigma0
        let plan = StepPlan {
            variant: Variant::DualAccel,
            sigma_tilde0: Some(0.5),
            ..plan
        };
        let m = metric_distances(&[1.0], &y, &r, &plan, &problem);
        let get = |name: &str| {
            m.iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| *v)
                .unwrap()
        };
        assert_relative_eq!(get("y_dist_sq_Y0"), 4.0, epsilon = 1e-9);
        assert_relative_eq!(get("x_dist_sq_tau0"), 2.0, epsilon = 1e-9);

        // all zero at the reference
        let m = metric_distances(&r.x_sharp, &r.y_sharp, &r, &plan, &problem);
        for (_, v) in m {
            assert!(v.abs() < 1e-18);
        }
    }

    #[test]
    fn fit_rate_recovers_synthetic_slopes() {
        let ks: Vec<usize> = (1..=400).collect();
        let one_over_k: Vec<(usize, f64)> =
            ks.iter().map(|&k| (k, 7.0 / k as f64)).collect();
        let fit = fit_rate(&one_over_k, 0, RateMode::PowerLaw).unwrap();
        assert!((fit.rate - (-1.0)).abs() <= 0.01, "slope {}", fit.rate);

        let one_over_k2: Vec<(usize, f64)> = ks
            .iter()
            .map(|&k| (k, 3.0 / (k as f64 * k as f64)))
            .collect();
        let fit = fit_rate(&one_over_k2, 100, RateMode::PowerLaw).unwrap();
        assert!((fit.rate - (-2.0)).abs() <= 0.01);

        let geo: Vec<(usize, f64)> = (1..=200)
            .map(|k| (k, 5.0 * 0.9f64.powi(k as i32)))
            .collect();
        let fit = fit_rate(&geo, 0, RateMode::Geometric).unwrap();
        assert!((fit.rate - 0.9).abs() <= 0.001, "factor {}", fit.rate);

        // nonpositive values are filtered, not fatal
        let mut noisy = one_over_k.clone();
        noisy[5].1 = 0.0;
        noisy[7].1 = -3.0;
        let fit = fit_rate(&noisy, 0, RateMode::PowerLaw).unwrap();
        assert_eq!(fit.n_filtered, 2);
        assert!((fit.rate - (-1.0)).abs() <= 0.01);

        // too few points
        let short: Vec<(usize, f64)> = (1..=5).map(|k| (k, 1.0 / k as f64)).collect();
        assert!(fit_rate(&short, 0, RateMode::PowerLaw).is_err());
    }

    #[test]
    fn reference_round_trip_and_certificate() {
        let problem = quadratic_problem(&[1.0, 0.5]);
        let r = reference_for(&problem);
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("toy_ref");
        r.save(&stem).unwrap();
        let loaded = SaddleReference::load(&problem, &stem).unwrap();
        assert_eq!(loaded.x_sharp, r.x_sharp);
        for i in 0..2 {
            assert_eq!(loaded.y_sharp.block(i), r.y_sharp.block(i));
        }
        assert_eq!(loaded.objective, r.objective);
        assert_eq!(loaded.sigma, r.sigma);
        assert!(loaded.residual <= loaded.tolerance);

        // wrong problem shape is rejected
        let other = quadratic_problem(&[1.0, 0.5, 0.2]);
        assert!(SaddleReference::load(&other, &stem).is_err());

        // corrupting the binary breaks either the length or the certificate
        let bin = stem.with_extension("bin");
        let mut bytes = std::fs::read(&bin).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&bin, &bytes).unwrap();
        assert!(SaddleReference::load(&problem, &stem).is_err());

        // a reference away from the saddle fails its certificate
        let mut fake = reference_for(&quadratic_problem(&[1.0, 0.5]));
        fake.x_sharp = vec![5.0];
        let stem2 = dir.path().join("bad_ref");
        fake.save(&stem2).unwrap();
        assert!(SaddleReference::load(&problem, &stem2).is_err());
    }

    #[test]
    fn gap_trends_to_zero_along_a_run() {
        let problem = quadratic_problem(&[1.0, 0.5]);
        let r = reference_for(&problem);
        let sampling = uniform_serial(2).unwrap();
        let (tau, sigma) = initial_step_sizes_general(&problem.a, &sampling, 0.99).unwrap();
        let plan = crate::solvers::StepPlan::plain(&problem.a, sampling, tau, sigma).unwrap();
        let mut y0 = problem.a.y_zeros();
        y0.block_mut(0)[0] = 1.0;
        let mut gaps = Vec::new();
        let mut metric = |_k: usize, _e: f64, s: &crate::solvers::SolverState| {
            vec![(
                "gap".to_string(),
                bregman_gap(&s.ergodic_x(), &s.ergodic_y(), &r, &problem),
            )]
        };
        let opts = crate::solvers::RunOptions::new(2000, 9);
        let out = crate::solvers::run(&problem, &plan, &[1.0], &y0, &opts, &mut metric).unwrap();
        for row in &out.rows {
            assert!(row.value >= -1e-9, "gap must stay nonnegative");
            gaps.push((row.iteration, row.value));
        }
        let early: f64 = gaps[1].1;
        let late: f64 = gaps.last().unwrap().1;
        assert!(late < early * 0.05, "ergodic gap must shrink: {early} -> {late}");
    }
}
