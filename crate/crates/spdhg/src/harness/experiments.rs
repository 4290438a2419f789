//! Builders for the bundled experiment suite. Each builder turns a config
//! into a [`SaddleProblem`] plus the primal objective used for reporting and
//! reference computation.

use std::sync::Arc;

use crate::blockspace::{BlockVector, Shape};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ExperimentId};
use crate::harness::phantoms::{disk_phantom, add_gaussian_noise, motion_kernel, poisson_counts};
use crate::operators::{
    conv2d, grad2d, toy_radon, BlockOperator, DiagOp, GradAxis, LinearOp, SparseMatrixOp,
};
use crate::proxlib::{
    add_sq_l2, box_indicator, huber_conjugate, huber_value, kl_conjugate, kl_value, l1_norm,
    smoothed_kl_conjugate, smoothed_kl_value, sq_l2_datafit, tv_prox_fgp, ProxFunction,
};
use crate::solvers::SaddleProblem;

pub type ObjectiveFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

type BlockValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A fully assembled problem instance: the saddle problem, the primal
/// objective `sum_i f_i(A_i x) + g(x)`, the generating image (empty for the
/// scalar toy), the run start point, and the key identifying the data
/// instance on disk.
pub struct Experiment {
    pub problem: SaddleProblem,
    pub objective: ObjectiveFn,
    pub x_true: Vec<f64>,
    pub x0: Vec<f64>,
    pub y0: BlockVector,
    pub reference_key: String,
}

pub fn build(cfg: &ExperimentConfig) -> Result<Experiment> {
    match cfg.experiment {
        ExperimentId::PetTv => build_pet_tv(cfg),
        ExperimentId::TvDenoise => build_tv_denoise(cfg),
        ExperimentId::HuberDeblur => build_huber_deblur(cfg),
        ExperimentId::PetLinear => build_pet_linear(cfg),
        ExperimentId::ScalarToy => build_scalar_toy(cfg),
    }
}

fn make_objective(a: &BlockOperator, f_vals: Vec<BlockValueFn>, g: ProxFunction) -> ObjectiveFn {
    debug_assert_eq!(f_vals.len(), a.n_blocks());
    let a = a.clone();
    Arc::new(move |x: &[f64]| {
        let ax = a
            .apply_full_quiet(x)
            .expect("objective input matches the operator domain");
        let mut acc = g.value(x);
        for (i, fv) in f_vals.iter().enumerate() {
            acc += fv(ax.block(i));
        }
        acc
    })
}

/// Stacks `n_angles` single-view operators into `n` blocks of consecutive
/// views. Fails unless the split is exact.
fn partition_views(views: Vec<SparseMatrixOp>, n: usize) -> Result<Vec<SparseMatrixOp>> {
    let n_angles = views.len();
    if n == 0 || n_angles % n != 0 {
        return Err(Error::Config(format!(
            "{n} blocks do not divide {n_angles} views evenly"
        )));
    }
    let per = n_angles / n;
    views
        .chunks(per)
        .map(SparseMatrixOp::vstack)
        .collect::<Result<Vec<_>>>()
}

fn kernel_rows(flat: &[f64], k: usize) -> Vec<Vec<f64>> {
    flat.chunks(k).map(<[f64]>::to_vec).collect()
}

/// Photon-count blocks per view group plus the objective pieces. Counts are
/// Poisson draws from `A_i x_true + r`; `floor_one` lifts zero counts to one
/// for the smoothed model, which needs `b > 0`.
fn pet_counts(
    a: &BlockOperator,
    x_true: &[f64],
    background: f64,
    data_seed: u64,
    floor_one: bool,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut out = Vec::with_capacity(a.n_blocks());
    let ax = a.apply_full_quiet(x_true)?;
    for i in 0..a.n_blocks() {
        let mean: Vec<f64> = ax.block(i).iter().map(|&v| v + background).collect();
        let mut b = poisson_counts(&mean, data_seed.wrapping_add(i as u64))?;
        if floor_one {
            for v in &mut b {
                *v = v.max(1.0);
            }
        }
        let r = vec![background; b.len()];
        out.push((b, r));
    }
    Ok(out)
}

/// Tomography with a TV prior: Poisson data terms over view groups, `g` the
/// scaled TV plus nonnegativity, solved via the iterative TV prox.
pub fn build_pet_tv(cfg: &ExperimentConfig) -> Result<Experiment> {
    let size = cfg.image_size();
    if size < 16 {
        return Err(Error::Config(format!("image size {size} below minimum 16")));
    }
    let shape = Shape::d2(size, size)?;
    let views = toy_radon(&shape, cfg.n_angles(), cfg.n_bins())?;
    let blocks = partition_views(views, cfg.n_blocks())?;
    let a = BlockOperator::from_ops(blocks)?;
    let x_true = disk_phantom(size, 5.0);
    let counts = pet_counts(&a, &x_true, cfg.background(), cfg.data_seed, false)?;

    let mut f_conj = Vec::with_capacity(a.n_blocks());
    let mut f_vals: Vec<BlockValueFn> = Vec::with_capacity(a.n_blocks());
    for (b, r) in counts {
        f_conj.push(kl_conjugate(b.clone(), r.clone())?);
        f_vals.push(Arc::new(move |z: &[f64]| kl_value(&b, &r, z)));
    }
    let g = tv_prox_fgp(&shape, cfg.alpha(), true, cfg.fgp_iters, true)?;
    let objective = make_objective(&a, f_vals, g.clone());
    let (x0, y0) = (a.x_zeros(), a.y_zeros());
    Ok(Experiment {
        problem: SaddleProblem::new(a, f_conj, g)?,
        objective,
        x_true,
        x0,
        y0,
        reference_key: cfg.reference_key(),
    })
}

/// Denoising in the dual of the anisotropic TV seminorm: two gradient
/// blocks with L1 data terms and a strongly convex quadratic `g`.
pub fn build_tv_denoise(cfg: &ExperimentConfig) -> Result<Experiment> {
    let size = cfg.image_size();
    let shape = Shape::d2(size, size)?;
    if cfg.n_blocks() != 2 {
        return Err(Error::Config(
            "tv_denoise has exactly two gradient blocks".into(),
        ));
    }
    let gh = grad2d(&shape, GradAxis::Horizontal)?;
    let gv = grad2d(&shape, GradAxis::Vertical)?;
    let a = BlockOperator::new(vec![Arc::new(gh), Arc::new(gv)])?;
    let x_true = disk_phantom(size, 1.0);
    let b = add_gaussian_noise(&x_true, 0.1, cfg.data_seed);

    let pair = l1_norm(1.0)?;
    let f_conj = vec![pair.conjugate.clone(), pair.conjugate.clone()];
    let l1 = pair.primal;
    let f_vals: Vec<BlockValueFn> = (0..2)
        .map(|_| {
            let l1 = l1.clone();
            Arc::new(move |z: &[f64]| l1.value(z)) as BlockValueFn
        })
        .collect();
    let g = sq_l2_datafit(b, cfg.alpha())?.primal;
    let objective = make_objective(&a, f_vals, g.clone());
    let (x0, y0) = (a.x_zeros(), a.y_zeros());
    Ok(Experiment {
        problem: SaddleProblem::new(a, f_conj, g)?,
        objective,
        x_true,
        x0,
        y0,
        reference_key: cfg.reference_key(),
    })
}

/// Deconvolution of Poisson-noisy data with a Huberized TV prior: smoothed
/// KL after the blur, Huber conjugates on the gradients, box constraint as
/// `g`. All three dual blocks are strongly convex, enabling dual stepsize
/// acceleration.
pub fn build_huber_deblur(cfg: &ExperimentConfig) -> Result<Experiment> {
    let size = cfg.image_size();
    let shape = Shape::d2(size, size)?;
    if cfg.n_blocks() != 3 {
        return Err(Error::Config(
            "huber_deblur has exactly three blocks (blur + two gradients)".into(),
        ));
    }
    let k = cfg.kernel_size();
    let kernel = kernel_rows(&motion_kernel(k), k);
    let blur = conv2d(&kernel, &shape)?;
    let gh = grad2d(&shape, GradAxis::Horizontal)?;
    let gv = grad2d(&shape, GradAxis::Vertical)?;
    let a = BlockOperator::new(vec![Arc::new(blur), Arc::new(gh), Arc::new(gv)])?;

    let x_true = disk_phantom(size, 100.0);
    let r0 = cfg.background();
    let mut blurred = vec![0.0; a.out_shapes()[0].numel()];
    a.apply_block_quiet(0, &x_true, &mut blurred)?;
    let mean: Vec<f64> = blurred.iter().map(|&v| v + r0).collect();
    let mut b = poisson_counts(&mean, cfg.data_seed)?;
    // smoothed model needs strictly positive counts
    for v in &mut b {
        *v = v.max(1.0);
    }
    let r = vec![r0; b.len()];

    let (alpha, eta) = (cfg.alpha(), cfg.eta());
    let f_conj = vec![
        smoothed_kl_conjugate(b.clone(), r.clone())?,
        huber_conjugate(alpha, eta)?,
        huber_conjugate(alpha, eta)?,
    ];
    let f_vals: Vec<BlockValueFn> = vec![
        Arc::new(move |z: &[f64]| smoothed_kl_value(&b, &r, z)),
        Arc::new(move |z: &[f64]| huber_value(alpha, eta, z)),
        Arc::new(move |z: &[f64]| huber_value(alpha, eta, z)),
    ];
    let g = box_indicator(0.0, 100.0)?;
    let objective = make_objective(&a, f_vals, g.clone());
    let (x0, y0) = (a.x_zeros(), a.y_zeros());
    Ok(Experiment {
        problem: SaddleProblem::new(a, f_conj, g)?,
        objective,
        x_true,
        x0,
        y0,
        reference_key: cfg.reference_key(),
    })
}

/// Tomography with both-sided strong convexity: smoothed Poisson data terms
/// and `g = alpha TV + mu/2 |x|^2 + nonnegativity`, so the linear-rate
/// planner applies.
pub fn build_pet_linear(cfg: &ExperimentConfig) -> Result<Experiment> {
    let size = cfg.image_size();
    if size < 16 {
        return Err(Error::Config(format!("image size {size} below minimum 16")));
    }
    let shape = Shape::d2(size, size)?;
    let views = toy_radon(&shape, cfg.n_angles(), cfg.n_bins())?;
    let blocks = partition_views(views, cfg.n_blocks())?;
    let a = BlockOperator::from_ops(blocks)?;
    let x_true = disk_phantom(size, 5.0);
    let counts = pet_counts(&a, &x_true, cfg.background(), cfg.data_seed, true)?;

    let mut f_conj = Vec::with_capacity(a.n_blocks());
    let mut f_vals: Vec<BlockValueFn> = Vec::with_capacity(a.n_blocks());
    for (b, r) in counts {
        f_conj.push(smoothed_kl_conjugate(b.clone(), r.clone())?);
        f_vals.push(Arc::new(move |z: &[f64]| smoothed_kl_value(&b, &r, z)));
    }
    let tv = tv_prox_fgp(&shape, cfg.alpha(), true, cfg.fgp_iters, true)?;
    let g = add_sq_l2(tv, cfg.mu())?;
    let objective = make_objective(&a, f_vals, g.clone());
    let (x0, y0) = (a.x_zeros(), a.y_zeros());
    Ok(Experiment {
        problem: SaddleProblem::new(a, f_conj, g)?,
        objective,
        x_true,
        x0,
        y0,
        reference_key: cfg.reference_key(),
    })
}

/// Data value anchoring the scalar toy's quadratic term.
const TOY_DATA: f64 = 2.0;

/// Minimal hand-checkable instance: each block applies one scalar
/// coefficient into `f_i = |.|`, and `g(x) = (x - 2)^2 / 2`. The solution is
/// `x = 2 - sum |c_i|` (when positive), where every dual coordinate sits at
/// its bound, so the ergodic gap keeps a component that is linear in the
/// dual deviation and the O(1/K) rate is visible rather than dominated by
/// the faster quadratic part.
pub fn build_scalar_toy(cfg: &ExperimentConfig) -> Result<Experiment> {
    let coeffs = cfg.coeffs();
    let rows = coeffs
        .iter()
        .map(|&c| DiagOp::new(vec![c]).map(|op| Arc::new(op) as Arc<dyn LinearOp>))
        .collect::<Result<Vec<_>>>()?;
    let a = BlockOperator::new(rows)?;
    let l1 = l1_norm(1.0)?;
    let f_conj = vec![l1.conjugate.clone(); coeffs.len()];
    let f_vals: Vec<BlockValueFn> = (0..coeffs.len())
        .map(|_| {
            let h = l1.primal.clone();
            Arc::new(move |z: &[f64]| h.value(z)) as BlockValueFn
        })
        .collect();
    let g = sq_l2_datafit(vec![TOY_DATA], 1.0)?.primal;
    let objective = make_objective(&a, f_vals, g.clone());
    // start away from the solution so relative metrics have a nonzero
    // baseline
    let x0 = vec![1.0];
    let y0 = a.y_zeros();
    let x_sharp = (TOY_DATA - coeffs.iter().map(|c| c.abs()).sum::<f64>()).max(0.0);
    Ok(Experiment {
        problem: SaddleProblem::new(a, f_conj, g)?,
        objective,
        x_true: vec![x_sharp],
        x0,
        y0,
        reference_key: cfg.reference_key(),
    })
}
