//! Iteration engines: deterministic PDHG reduction, the stochastic
//! primal-dual method, both accelerated variants, and the linear-rate
//! configuration.
//!
//! The primal update consumes `A* y_bar` from an incrementally maintained
//! cache, so one iteration evaluates exactly `|S|` block applies plus `|S|`
//! block adjoints; nothing touches blocks outside the drawn subset. The
//! cache is re-validated against a direct evaluation on a configurable
//! cadence.

use rand_chacha::ChaCha8Rng;

use crate::blockspace::BlockVector;
use crate::error::{Error, Result};
use crate::operators::BlockOperator;
use crate::proxlib::{ProxFunction, ProxWarmState};
use crate::sampling::{eso_params, seeded_rng, EsoParams, Sampling, SamplingKind, STREAM_SOLVER};

// ---------------------------------------------------------------------------
// Problem and plan
// ---------------------------------------------------------------------------

/// Saddle problem `min_x max_y sum_i <A_i x, y_i> - f_i*(y_i) + g(x)`.
/// Clones share the operators and prox functions but get fresh work counters.
#[derive(Clone)]
pub struct SaddleProblem {
    pub a: BlockOperator,
    pub f_conj: Vec<ProxFunction>,
    pub g: ProxFunction,
    pub mu_g: f64,
    pub mu: Vec<f64>,
}

impl SaddleProblem {
    /// Strong-convexity constants are read off the prox catalog entries.
    pub fn new(a: BlockOperator, f_conj: Vec<ProxFunction>, g: ProxFunction) -> Result<Self> {
        if f_conj.len() != a.n_blocks() {
            return Err(Error::shape("SaddleProblem: one f* per operator block"));
        }
        let mu_g = g.mu();
        let mu: Vec<f64> = f_conj.iter().map(|f| f.mu()).collect();
        Ok(SaddleProblem {
            a,
            f_conj,
            g,
            mu_g,
            mu,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.a.n_blocks()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Plain,
    PrimalAccel,
    DualAccel,
    Linear,
}

/// Step sizes, extrapolation, sampling, and variant tag for one run.
/// Constructors check the conditions the convergence statements require.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub variant: Variant,
    pub sampling: Sampling,
    pub tau: f64,
    pub sigma: Vec<f64>,
    pub theta: f64,
    pub sigma_tilde0: Option<f64>,
    pub eso: EsoParams,
}

fn check_positive_steps(tau: f64, sigma: &[f64]) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Plan(format!("tau = {tau} must be positive")));
    }
    if sigma.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Plan("sigma_i must be positive".into()));
    }
    Ok(())
}

impl StepPlan {
    /// Plain SPDHG (`theta = 1`); requires strict per-block `v_i < p_i`.
    pub fn plain(
        a: &BlockOperator,
        sampling: Sampling,
        tau: f64,
        sigma: Vec<f64>,
    ) -> Result<StepPlan> {
        check_positive_steps(tau, &sigma)?;
        let eso = eso_params(&sampling, a, tau, &sigma)?;
        Self::plain_with_eso(sampling, tau, sigma, eso)
    }

    /// Plain SPDHG with caller-supplied ESO parameters (arbitrary samplings).
    pub fn plain_with_eso(
        sampling: Sampling,
        tau: f64,
        sigma: Vec<f64>,
        eso: EsoParams,
    ) -> Result<StepPlan> {
        check_positive_steps(tau, &sigma)?;
        for (i, (&vi, &pi)) in eso.v.iter().zip(sampling.marginals()).enumerate() {
            if vi >= pi {
                return Err(Error::Plan(format!(
                    "block {i}: v_i = {vi} must be strictly below p_i = {pi}"
                )));
            }
        }
        Ok(StepPlan {
            variant: Variant::Plain,
            sampling,
            tau,
            sigma,
            theta: 1.0,
            sigma_tilde0: None,
            eso,
        })
    }

    /// Primal acceleration; needs a strongly convex `g`.
    pub fn primal_accel(
        problem: &SaddleProblem,
        sampling: Sampling,
        tau0: f64,
        sigma0: Vec<f64>,
    ) -> Result<StepPlan> {
        if !(problem.mu_g > 0.0) {
            return Err(Error::Plan(
                "primal acceleration needs mu_g > 0; use the plain variant".into(),
            ));
        }
        check_positive_steps(tau0, &sigma0)?;
        let eso = eso_params(&sampling, &problem.a, tau0, &sigma0)?;
        for (i, (&vi, &pi)) in eso.v.iter().zip(sampling.marginals()).enumerate() {
            if vi >= pi {
                return Err(Error::Plan(format!(
                    "block {i}: initial v_i = {vi} must be strictly below p_i = {pi}"
                )));
            }
        }
        Ok(StepPlan {
            variant: Variant::PrimalAccel,
            sampling,
            tau: tau0,
            sigma: sigma0,
            theta: 1.0,
            sigma_tilde0: None,
            eso,
        })
    }

    /// Dual acceleration; needs every `f_i*` strongly convex and
    /// `sigma_tilde0 < min_i p_i / (2 (1 - p_i))`.
    pub fn dual_accel(
        problem: &SaddleProblem,
        sampling: Sampling,
        tau0: f64,
        sigma_tilde0: f64,
    ) -> Result<StepPlan> {
        if problem.mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Plan(
                "dual acceleration needs mu_i > 0 for every block".into(),
            ));
        }
        if !(sigma_tilde0 > 0.0) {
            return Err(Error::Plan("sigma_tilde0 must be positive".into()));
        }
        let bound = sampling
            .marginals()
            .iter()
            .map(|&pi| {
                if pi >= 1.0 {
                    f64::INFINITY
                } else {
                    pi / (2.0 * (1.0 - pi))
                }
            })
            .fold(f64::INFINITY, f64::min);
        if sigma_tilde0 >= bound {
            return Err(Error::Plan(format!(
                "sigma_tilde0 = {sigma_tilde0} must stay below min_i p_i/(2(1-p_i)) = {bound}"
            )));
        }
        let sigma0 = da_sigma(&sampling, &problem.mu, sigma_tilde0);
        check_positive_steps(tau0, &sigma0)?;
        let eso = eso_params(&sampling, &problem.a, tau0, &sigma0)?;
        for (i, (&vi, &pi)) in eso.v.iter().zip(sampling.marginals()).enumerate() {
            if vi > pi * (1.0 + 1e-9) {
                return Err(Error::Plan(format!(
                    "block {i}: initial v_i = {vi} exceeds p_i = {pi}"
                )));
            }
        }
        Ok(StepPlan {
            variant: Variant::DualAccel,
            sampling,
            tau: tau0,
            sigma: sigma0,
            theta: 1.0,
            sigma_tilde0: Some(sigma_tilde0),
            eso,
        })
    }

    /// Constant-parameter linear-rate configuration; validates the three
    /// contraction conditions against the problem's strong convexity.
    pub fn linear(
        problem: &SaddleProblem,
        sampling: Sampling,
        tau: f64,
        sigma: Vec<f64>,
        theta: f64,
        rho: f64,
    ) -> Result<StepPlan> {
        check_positive_steps(tau, &sigma)?;
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::Plan(format!("theta = {theta} must lie in (0,1)")));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Plan(format!("rho = {rho} must lie in (0,1)")));
        }
        if !(problem.mu_g > 0.0) || problem.mu.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Plan(
                "linear variant needs strong convexity on both sides".into(),
            ));
        }
        let slack = 1e-9;
        if theta * (1.0 + 2.0 * problem.mu_g * tau) < 1.0 - slack {
            return Err(Error::Plan(format!(
                "primal contraction violated: theta (1 + 2 mu_g tau) = {} < 1",
                theta * (1.0 + 2.0 * problem.mu_g * tau)
            )));
        }
        for i in 0..sampling.n_blocks() {
            let (mi, si, pi) = (problem.mu[i], sigma[i], sampling.marginals()[i]);
            let lhs = theta * (1.0 + 2.0 * mi * si);
            let rhs = 1.0 + 2.0 * (1.0 - pi) * mi * si;
            if lhs < rhs - slack * rhs {
                return Err(Error::Plan(format!(
                    "dual contraction violated at block {i}: {lhs} < {rhs}"
                )));
            }
        }
        let eso = eso_params(&sampling, &problem.a, tau, &sigma)?;
        for (i, (&vi, &pi)) in eso.v.iter().zip(sampling.marginals()).enumerate() {
            if vi * theta > rho * rho * pi * (1.0 + 1e-6) {
                return Err(Error::Plan(format!(
                    "step-size condition violated at block {i}: v_i theta = {} > rho^2 p_i = {}",
                    vi * theta,
                    rho * rho * pi
                )));
            }
        }
        Ok(StepPlan {
            variant: Variant::Linear,
            sampling,
            tau,
            sigma,
            theta,
            sigma_tilde0: None,
            eso,
        })
    }
}

fn da_sigma(sampling: &Sampling, mu: &[f64], sigma_tilde: f64) -> Vec<f64> {
    sampling
        .marginals()
        .iter()
        .zip(mu)
        .map(|(&pi, &mi)| sigma_tilde / (mi * (pi - 2.0 * (1.0 - pi) * sigma_tilde)))
        .collect()
}

// ---------------------------------------------------------------------------
// Step-size recipes
// ---------------------------------------------------------------------------

const NORM_TOL: f64 = 1e-12;
const NORM_MAX_ITER: usize = 100_000;
const NORM_SEED: u64 = 0x5eed;

/// Norm-based step sizes: full sampling gets `sigma_i = tau = gamma/|A|`,
/// serial gets `sigma_i = gamma/|A_i|` and `tau = gamma/(n max_i |A_i|)`.
pub fn initial_step_sizes_general(
    a: &BlockOperator,
    sampling: &Sampling,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Plan(format!("gamma = {gamma} must lie in (0,1)")));
    }
    let n = a.n_blocks();
    match sampling.kind() {
        SamplingKind::Full => {
            let est =
                crate::operators::block_op_norm(a, &vec![1.0; n], NORM_TOL, NORM_MAX_ITER, NORM_SEED)?;
            let nrm = est.safe_upper();
            if nrm == 0.0 {
                return Err(Error::Plan("zero operator norm".into()));
            }
            let s = gamma / nrm;
            Ok((s, vec![s; n]))
        }
        SamplingKind::Serial => {
            let mut norms = Vec::with_capacity(n);
            for i in 0..n {
                let est =
                    crate::operators::op_norm(a.block(i).as_ref(), NORM_TOL, NORM_MAX_ITER, NORM_SEED)?;
                norms.push(est.safe_upper());
            }
            if norms.iter().any(|&x| x == 0.0) {
                return Err(Error::Plan("zero block norm".into()));
            }
            let max = norms.iter().cloned().fold(0.0, f64::max);
            let tau = gamma / (n as f64 * max);
            let sigma = norms.iter().map(|&ni| gamma / ni).collect();
            Ok((tau, sigma))
        }
        SamplingKind::Arbitrary => Err(Error::Plan(
            "no step-size recipe for arbitrary samplings; supply tau and sigma".into(),
        )),
    }
}

/// Dual-acceleration initialization: `tau0 = 1/(n max_i |A_i|)` and the
/// largest `sigma_tilde0` with all initial ESO parameters at `v_i = p_i`.
pub fn initial_step_sizes_dual_accel(
    a: &BlockOperator,
    sampling: &Sampling,
    mu: &[f64],
) -> Result<(f64, f64)> {
    if mu.len() != a.n_blocks() || mu.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Plan("dual acceleration needs mu_i > 0".into()));
    }
    let n = a.n_blocks();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let est = crate::operators::op_norm(a.block(i).as_ref(), NORM_TOL, NORM_MAX_ITER, NORM_SEED)?;
        norms.push(est.safe_upper());
    }
    if norms.iter().any(|&x| x == 0.0) {
        return Err(Error::Plan("zero block norm".into()));
    }
    let max = norms.iter().cloned().fold(0.0, f64::max);
    let tau0 = 1.0 / (n as f64 * max);
    let sigma_tilde0 = sampling
        .marginals()
        .iter()
        .zip(mu)
        .zip(&norms)
        .map(|((&pi, &mi), &ni)| {
            mi * pi * pi / (tau0 * ni * ni + 2.0 * mi * pi * (1.0 - pi))
        })
        .fold(f64::INFINITY, f64::min);
    Ok((tau0, sigma_tilde0))
}

// ---------------------------------------------------------------------------
// Solver state
// ---------------------------------------------------------------------------

/// Mutable per-run state, including the adjoint caches and ergodic sums.
pub struct SolverState {
    pub x: Vec<f64>,
    pub y: BlockVector,
    pub y_bar: BlockVector,
    /// `A* y`, maintained incrementally.
    pub a_star_y: Vec<f64>,
    /// `A* y_bar`, maintained incrementally.
    pub a_star_ybar: Vec<f64>,
    pub tau: f64,
    pub sigma: Vec<f64>,
    pub theta: f64,
    pub sigma_tilde: Option<f64>,
    pub k: usize,
    rng: ChaCha8Rng,
    x_sum: Vec<f64>,
    y_sum: BlockVector,
    ergodic_count: usize,
    g_warm: ProxWarmState,
    prev_extrapolated: Vec<usize>,
    pub max_cache_drift: f64,
}

impl SolverState {
    pub fn init(
        problem: &SaddleProblem,
        plan: &StepPlan,
        x0: &[f64],
        y0: &BlockVector,
        seed: u64,
    ) -> Result<Self> {
        let n = problem.n_blocks();
        if plan.sampling.n_blocks() != n || plan.sigma.len() != n {
            return Err(Error::shape("plan/problem block count mismatch"));
        }
        if x0.len() != problem.a.in_shape().numel() {
            return Err(Error::shape("x0 length"));
        }
        if y0.n_blocks() != n {
            return Err(Error::shape("y0 block count"));
        }
        let a_star_y = if y0.norm_sq() == 0.0 {
            problem.a.x_zeros()
        } else {
            problem.a.adjoint_full_quiet(y0)?
        };
        Ok(SolverState {
            x: x0.to_vec(),
            y: y0.clone(),
            y_bar: y0.clone(),
            a_star_ybar: a_star_y.clone(),
            a_star_y,
            tau: plan.tau,
            sigma: plan.sigma.clone(),
            theta: plan.theta,
            sigma_tilde: plan.sigma_tilde0,
            k: 0,
            rng: seeded_rng(seed, STREAM_SOLVER),
            x_sum: vec![0.0; x0.len()],
            y_sum: BlockVector::zeros(y0.shapes()),
            ergodic_count: 0,
            g_warm: ProxWarmState::Empty,
            prev_extrapolated: Vec::new(),
            max_cache_drift: 0.0,
        })
    }

    /// Ergodic primal average over completed iterations (current x if none).
    pub fn ergodic_x(&self) -> Vec<f64> {
        if self.ergodic_count == 0 {
            return self.x.clone();
        }
        let c = self.ergodic_count as f64;
        self.x_sum.iter().map(|v| v / c).collect()
    }

    /// Ergodic dual average over completed iterations (current y if none).
    pub fn ergodic_y(&self) -> BlockVector {
        if self.ergodic_count == 0 {
            return self.y.clone();
        }
        let c = self.ergodic_count as f64;
        let mut out = self.y_sum.clone();
        out.scale(1.0 / c);
        out
    }

    fn accumulate_ergodic(&mut self) {
        for (s, &xi) in self.x_sum.iter_mut().zip(&self.x) {
            *s += xi;
        }
        self.y_sum.axpy(1.0, &self.y).expect("shapes fixed");
        self.ergodic_count += 1;
    }

    /// Re-validates the incremental caches against direct evaluations and
    /// refreshes them; errors if the relative drift invariant is broken.
    fn revalidate_cache(&mut self, problem: &SaddleProblem) -> Result<()> {
        let fresh_y = problem.a.adjoint_full_quiet(&self.y)?;
        let fresh_ybar = problem.a.adjoint_full_quiet(&self.y_bar)?;
        let drift_of = |cache: &[f64], fresh: &[f64]| {
            let num: f64 = cache
                .iter()
                .zip(fresh)
                .map(|(c, f)| (c - f) * (c - f))
                .sum::<f64>()
                .sqrt();
            let den = 1.0 + fresh.iter().map(|f| f * f).sum::<f64>().sqrt();
            num / den
        };
        let drift = drift_of(&self.a_star_y, &fresh_y).max(drift_of(&self.a_star_ybar, &fresh_ybar));
        self.max_cache_drift = self.max_cache_drift.max(drift);
        if drift > 1e-8 {
            return Err(Error::Divergence {
                iteration: self.k,
                what: format!("adjoint cache drift {drift}"),
            });
        }
        self.a_star_y = fresh_y;
        self.a_star_ybar = fresh_ybar;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

/// Incremental cache update after the dual step on `subset`:
/// `cache_y += sum A_i* d_i` and `cache_ybar = cache_y + sum (theta/p_i) A_i* d_i`,
/// one adjoint evaluation per updated block.
pub fn adjoint_cache_update(
    cache_y: &mut [f64],
    cache_ybar: &mut [f64],
    a: &BlockOperator,
    y_new: &BlockVector,
    y_old: &BlockVector,
    subset: &[usize],
    theta: f64,
    p: &[f64],
) -> Result<()> {
    let mut u = vec![0.0; cache_y.len()];
    let mut delta_blocks: Vec<(usize, Vec<f64>)> = Vec::with_capacity(subset.len());
    for &i in subset {
        let d: Vec<f64> = y_new
            .block(i)
            .iter()
            .zip(y_old.block(i))
            .map(|(a, b)| a - b)
            .collect();
        delta_blocks.push((i, d));
    }
    cache_ybar.copy_from_slice(cache_y);
    for (i, d) in &delta_blocks {
        a.adjoint_block(*i, d, &mut u)?;
        let w = theta / p[*i];
        for ((cy, cb), &ui) in cache_y.iter_mut().zip(cache_ybar.iter_mut()).zip(&u) {
            *cy += ui;
            *cb += (1.0 + w) * ui;
        }
    }
    Ok(())
}

enum ParamUpdate {
    /// Constant parameters (plain and linear variants).
    None,
    /// theta_k from tau_k, then tau shrinks and sigma grows.
    PrimalAccel,
    /// theta_k from sigma_tilde_k, then tau grows and sigma_tilde shrinks.
    DualAccel,
}

fn do_step(
    problem: &SaddleProblem,
    state: &mut SolverState,
    plan: &StepPlan,
    update: ParamUpdate,
) -> Result<()> {
    let n = problem.n_blocks();
    let tau = state.tau;

    // primal prox at the cached A* y_bar
    let z: Vec<f64> = state
        .x
        .iter()
        .zip(&state.a_star_ybar)
        .map(|(xi, ai)| xi - tau * ai)
        .collect();
    let x_new = problem.g.prox_warm(tau, &z, &mut state.g_warm);
    if x_new.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration: state.k,
            what: "non-finite primal iterate".into(),
        });
    }

    // lazily materialize per-block sigma for the dual-acceleration variant
    if let ParamUpdate::DualAccel = update {
        let st = state.sigma_tilde.expect("dual_accel plan carries sigma_tilde");
        let p = plan.sampling.marginals();
        for i in 0..n {
            state.sigma[i] = st / (problem.mu[i] * (p[i] - 2.0 * (1.0 - p[i]) * st));
        }
    }

    let subset: Vec<usize> = plan.sampling.draw(&mut state.rng).to_vec();

    // dual prox on the drawn blocks with current sigma
    let mut y_new_blocks: Vec<(usize, Vec<f64>)> = Vec::with_capacity(subset.len());
    let mut buf_max = 0usize;
    for &i in &subset {
        buf_max = buf_max.max(problem.a.out_shapes()[i].numel());
    }
    let mut ax = vec![0.0; buf_max];
    for &i in &subset {
        let m = problem.a.out_shapes()[i].numel();
        problem.a.apply_block(i, &x_new, &mut ax[..m])?;
        let si = state.sigma[i];
        let arg: Vec<f64> = state
            .y
            .block(i)
            .iter()
            .zip(&ax[..m])
            .map(|(yi, ai)| yi + si * ai)
            .collect();
        let yi_new = problem.f_conj[i].prox(si, &arg);
        if yi_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: state.k,
                what: format!("non-finite dual iterate in block {i}"),
            });
        }
        y_new_blocks.push((i, yi_new));
    }

    // parameter schedule (after the proxes, before extrapolation)
    let theta = match update {
        ParamUpdate::None => state.theta,
        ParamUpdate::PrimalAccel => {
            let th = 1.0 / (1.0 + 2.0 * problem.mu_g * state.tau).sqrt();
            state.tau *= th;
            for s in state.sigma.iter_mut() {
                *s /= th;
            }
            state.theta = th;
            th
        }
        ParamUpdate::DualAccel => {
            let st = state.sigma_tilde.expect("dual_accel plan carries sigma_tilde");
            let th = 1.0 / (1.0 + 2.0 * st).sqrt();
            state.tau /= th;
            state.sigma_tilde = Some(th * st);
            state.theta = th;
            th
        }
    };

    // stale extrapolations from the previous subset collapse back to y
    let p = plan.sampling.marginals();
    let in_subset = |i: usize| subset.contains(&i);
    for &i in &state.prev_extrapolated {
        if !in_subset(i) {
            let src = state.y.block(i).to_vec();
            state.y_bar.block_mut(i).copy_from_slice(&src);
        }
    }

    // incremental caches, then commit y, y_bar
    {
        let mut y_next = state.y.clone();
        for (i, yi) in &y_new_blocks {
            y_next.block_mut(*i).copy_from_slice(yi);
        }
        adjoint_cache_update(
            &mut state.a_star_y,
            &mut state.a_star_ybar,
            &problem.a,
            &y_next,
            &state.y,
            &subset,
            theta,
            p,
        )?;
        for (i, yi) in y_new_blocks {
            let w = theta / p[i];
            {
                let old = state.y.block(i);
                let bar = state.y_bar.block_mut(i);
                for ((b, &new), &old) in bar.iter_mut().zip(&yi).zip(old) {
                    *b = new + w * (new - old);
                }
            }
            state.y.block_mut(i).copy_from_slice(&yi);
        }
    }
    state.prev_extrapolated = subset;
    state.x = x_new;
    state.k += 1;
    state.accumulate_ergodic();
    Ok(())
}

/// One iteration of plain (or linear-configuration) SPDHG.
pub fn spdhg_step(problem: &SaddleProblem, state: &mut SolverState, plan: &StepPlan) -> Result<()> {
    do_step(problem, state, plan, ParamUpdate::None)
}

/// One primal-accelerated iteration.
pub fn pa_spdhg_step(
    problem: &SaddleProblem,
    state: &mut SolverState,
    plan: &StepPlan,
) -> Result<()> {
    if !(problem.mu_g > 0.0) {
        return Err(Error::Plan(
            "primal acceleration needs mu_g > 0; use the plain variant".into(),
        ));
    }
    do_step(problem, state, plan, ParamUpdate::PrimalAccel)
}

/// One dual-accelerated iteration.
pub fn da_spdhg_step(
    problem: &SaddleProblem,
    state: &mut SolverState,
    plan: &StepPlan,
) -> Result<()> {
    if state.sigma_tilde.is_none() {
        return Err(Error::Plan("dual acceleration needs a dual_accel plan".into()));
    }
    do_step(problem, state, plan, ParamUpdate::DualAccel)
}

// ---------------------------------------------------------------------------
// Run orchestration
// ---------------------------------------------------------------------------

/// Metric emission cadence. Epochs count operator work: one epoch equals one
/// full application of `A` and `A*`.
#[derive(Clone, Debug)]
pub enum Schedule {
    EveryEpoch,
    EveryIters(usize),
    /// Sorted 1-based iteration counts.
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub iters: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub revalidate_every: usize,
}

impl RunOptions {
    pub fn new(iters: usize, seed: u64) -> Self {
        RunOptions {
            iters,
            seed,
            schedule: Schedule::EveryEpoch,
            revalidate_every: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub epoch: f64,
    pub metric: String,
    pub value: f64,
}

pub struct RunOutcome {
    pub rows: Vec<MetricRow>,
    pub state: SolverState,
    pub max_cache_drift: f64,
}

/// Runs `opts.iters` iterations of the plan's variant from `(x0, y0)`,
/// invoking the metric callback on the schedule (plus iterations 0 and K).
/// Fully deterministic given the seed.
pub fn run(
    problem: &SaddleProblem,
    plan: &StepPlan,
    x0: &[f64],
    y0: &BlockVector,
    opts: &RunOptions,
    metrics: &mut dyn FnMut(usize, f64, &SolverState) -> Vec<(String, f64)>,
) -> Result<RunOutcome> {
    if opts.iters == 0 {
        return Err(Error::invalid("run: iters >= 1"));
    }
    let mut state = SolverState::init(problem, plan, x0, y0, opts.seed)?;
    let epoch_per_iter =
        plan.sampling.expected_subset_size() / plan.sampling.n_blocks() as f64;
    let mut rows = Vec::new();
    let mut emit = |k: usize, state: &SolverState, rows: &mut Vec<MetricRow>| {
        let epoch = k as f64 * epoch_per_iter;
        for (metric, value) in metrics(k, epoch, state) {
            rows.push(MetricRow {
                iteration: k,
                epoch,
                metric,
                value,
            });
        }
    };
    emit(0, &state, &mut rows);
    let mut next_explicit = 0usize;
    let mut last_epoch_mark = 0u64;
    for k in 1..=opts.iters {
        match plan.variant {
            Variant::Plain | Variant::Linear => spdhg_step(problem, &mut state, plan)?,
            Variant::PrimalAccel => pa_spdhg_step(problem, &mut state, plan)?,
            Variant::DualAccel => da_spdhg_step(problem, &mut state, plan)?,
        }
        if opts.revalidate_every > 0 && k % opts.revalidate_every == 0 {
            state.revalidate_cache(problem)?;
        }
        let due = match &opts.schedule {
            Schedule::EveryEpoch => {
                let mark = (k as f64 * epoch_per_iter).floor() as u64;
                if mark > last_epoch_mark {
                    last_epoch_mark = mark;
                    true
                } else {
                    false
                }
            }
            Schedule::EveryIters(m) => *m > 0 && k % m == 0,
            Schedule::Explicit(list) => {
                let mut hit = false;
                while next_explicit < list.len() && list[next_explicit] <= k {
                    hit = hit || list[next_explicit] == k;
                    next_explicit += 1;
                }
                hit
            }
        };
        if due || k == opts.iters {
            if !state.x.iter().all(|v| v.is_finite()) || !state.y.all_finite() {
                return Err(Error::Divergence {
                    iteration: k,
                    what: "non-finite iterate at checkpoint".into(),
                });
            }
            emit(k, &state, &mut rows);
        }
    }
    let max_cache_drift = state.max_cache_drift;
    Ok(RunOutcome {
        rows,
        state,
        max_cache_drift,
    })
}
