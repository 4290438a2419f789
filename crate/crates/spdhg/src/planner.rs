//! Closed-form parameter planning for the fully strongly convex case under
//! serial sampling: uniform, importance, and optimal probabilities, plus the
//! rate from Zhang and Xiao's related method for comparison.
//!
//! Everything here is a pure function of per-block condition numbers
//! `kappa_i = |A_i|^2 / (mu_g mu_i)`; no solver calls, no randomness.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::op_norm;
use crate::sampling::{serial_sampling, EsoParams};
use crate::solvers::{SaddleProblem, StepPlan, Variant};

const NORM_TOL: f64 = 1e-12;
const NORM_MAX_ITER: usize = 100_000;
const NORM_SEED: u64 = 0x5eed;

/// Per-block conditioning data for planning. `kappa_i` is invariant under
/// the diagonal rescaling of primal and dual variables, so the planned rates
/// are too.
#[derive(Clone, Debug)]
pub struct ConditionProfile {
    pub mu_g: f64,
    pub mu: Vec<f64>,
    pub norms: Vec<f64>,
    pub rho: f64,
}

impl ConditionProfile {
    pub fn new(mu_g: f64, mu: Vec<f64>, norms: Vec<f64>, rho: f64) -> Result<Self> {
        if !(mu_g > 0.0) || !mu_g.is_finite() {
            return Err(Error::Plan(format!("mu_g = {mu_g} must be positive")));
        }
        if mu.is_empty() || mu.len() != norms.len() {
            return Err(Error::shape("profile needs one (mu, norm) pair per block"));
        }
        if mu.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(Error::Plan("every mu_i must be positive".into()));
        }
        if norms.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Plan(
                "every block norm must be positive; degenerate blocks are not planable".into(),
            ));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Plan(format!("rho = {rho} must lie in (0, 1]")));
        }
        Ok(ConditionProfile { mu_g, mu, norms, rho })
    }

    /// Builds the profile from a problem's strong-convexity constants and
    /// power-iteration block norms.
    pub fn from_problem(problem: &SaddleProblem, rho: f64) -> Result<Self> {
        let mut norms = Vec::with_capacity(problem.n_blocks());
        for i in 0..problem.n_blocks() {
            let est = op_norm(
                problem.a.block(i).as_ref(),
                NORM_TOL,
                NORM_MAX_ITER,
                NORM_SEED,
            )?;
            norms.push(est.safe_upper());
        }
        ConditionProfile::new(problem.mu_g, problem.mu.clone(), norms, rho)
    }

    pub fn n_blocks(&self) -> usize {
        self.mu.len()
    }

    pub fn kappa(&self, i: usize) -> f64 {
        self.norms[i] * self.norms[i] / (self.mu_g * self.mu[i])
    }

    pub fn kappa_tilde(&self, i: usize) -> f64 {
        1.0 + self.kappa(i) / (self.rho * self.rho)
    }
}

/// Serializable view of a planned configuration, for config files and the
/// CLI `plan` subcommand.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PlanParameters {
    pub theta: f64,
    pub tau: f64,
    pub sigma: Vec<f64>,
    pub p: Vec<f64>,
    pub rho: f64,
}

pub fn summarize(plan: &StepPlan, rho: f64) -> PlanParameters {
    PlanParameters {
        theta: plan.theta,
        tau: plan.tau,
        sigma: plan.sigma.clone(),
        p: plan.sampling.marginals().to_vec(),
        rho,
    }
}

fn assemble(
    profile: &ConditionProfile,
    p: Vec<f64>,
    tau: f64,
    sigma: Vec<f64>,
    theta: f64,
) -> Result<StepPlan> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Plan(format!(
            "planned theta = {theta} escaped (0,1); degenerate profile"
        )));
    }
    if !(tau > 0.0) || sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Plan("planned step sizes must be positive".into()));
    }
    let sampling = serial_sampling(p)?;
    let v: Vec<f64> = sigma
        .iter()
        .zip(&profile.norms)
        .map(|(&si, &ni)| si * tau * ni * ni)
        .collect();
    let eso = EsoParams::new(v, &sampling)?;
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

/// Uniform serial sampling: the rate is driven by the worst-conditioned
/// block.
pub fn plan_uniform(profile: &ConditionProfile, n: usize) -> Result<StepPlan> {
    if n != profile.n_blocks() || n == 0 {
        return Err(Error::shape("plan_uniform: n must match the profile"));
    }
    let max_rt = (0..n)
        .map(|i| profile.kappa_tilde(i).sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    if max_rt <= 1.0 {
        return Err(Error::Plan("degenerate profile: kappa_tilde = 1".into()));
    }
    let nf = n as f64;
    let theta = 1.0 - 2.0 / (nf + nf * max_rt);
    let sigma: Vec<f64> = profile.mu.iter().map(|&mi| 1.0 / (mi * (max_rt - 1.0))).collect();
    let tau = 1.0 / (profile.mu_g * (nf - 2.0 + nf * max_rt));
    assemble(profile, vec![1.0 / nf; n], tau, sigma, theta)
}

/// Importance sampling: `p_i` proportional to `sqrt(kappa_i)`.
pub fn plan_importance(profile: &ConditionProfile, n: usize) -> Result<StepPlan> {
    if n != profile.n_blocks() || n == 0 {
        return Err(Error::shape("plan_importance: n must match the profile"));
    }
    let rt_kappa: Vec<f64> = (0..n).map(|i| profile.kappa(i).sqrt()).collect();
    let sum_rt: f64 = rt_kappa.iter().sum();
    let nu = (0..n)
        .map(|i| rt_kappa[i] / (1.0 + profile.kappa_tilde(i).sqrt()))
        .fold(f64::INFINITY, f64::min);
    let p: Vec<f64> = rt_kappa.iter().map(|&r| r / sum_rt).collect();
    let theta = 1.0 - 2.0 * nu / sum_rt;
    let sigma: Vec<f64> = rt_kappa
        .iter()
        .zip(&profile.mu)
        .map(|(&r, &mi)| {
            let den = r - 2.0 * nu;
            if den <= 0.0 {
                return f64::NAN;
            }
            nu / (mi * den)
        })
        .collect();
    if sigma.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Plan(
            "degenerate profile for importance sampling: sqrt(kappa_i) <= 2 nu".into(),
        ));
    }
    let tau = nu / (profile.mu_g * (sum_rt - 2.0 * nu));
    assemble(profile, p, tau, sigma, theta)
}

/// Rate-optimal serial sampling: probabilities equalize the per-block rate
/// bounds, `theta (1 + sqrt(kappa_tilde_i)) = 1 + sqrt(kappa_tilde_i) - 2 p_i`.
pub fn plan_optimal(profile: &ConditionProfile, n: usize) -> Result<StepPlan> {
    if n != profile.n_blocks() || n == 0 {
        return Err(Error::shape("plan_optimal: n must match the profile"));
    }
    let rt: Vec<f64> = (0..n).map(|i| profile.kappa_tilde(i).sqrt()).collect();
    if rt.iter().any(|&r| r <= 1.0) {
        return Err(Error::Plan("degenerate profile: kappa_tilde_i = 1".into()));
    }
    let sum_rt: f64 = rt.iter().sum();
    let nf = n as f64;
    let theta = 1.0 - 2.0 / (nf + sum_rt);
    let p: Vec<f64> = rt.iter().map(|&r| (1.0 + r) / (nf + sum_rt)).collect();
    let sigma: Vec<f64> = rt
        .iter()
        .zip(&profile.mu)
        .map(|(&r, &mi)| 1.0 / (mi * (r - 1.0)))
        .collect();
    let tau = 1.0 / (profile.mu_g * (nf - 2.0 + sum_rt));
    assemble(profile, p, tau, sigma, theta)
}

/// Comparison rate for the related coordinate method with uniform serial
/// sampling and single-row blocks: `1 - 1/(n + n R / sqrt(mu_g mu_f))`.
pub fn rate_zhang_xiao(profile: &ConditionProfile, n: usize) -> Result<f64> {
    if n != profile.n_blocks() || n == 0 {
        return Err(Error::shape("rate_zhang_xiao: n must match the profile"));
    }
    let mu_f = profile.mu[0];
    if profile
        .mu
        .iter()
        .any(|&m| (m - mu_f).abs() > 1e-12 * mu_f.max(1.0))
    {
        return Err(Error::Plan(
            "comparison rate assumes uniform mu_i across blocks".into(),
        ));
    }
    let r = profile.norms.iter().cloned().fold(0.0, f64::max);
    let nf = n as f64;
    Ok(1.0 - 1.0 / (nf + nf * r / (profile.mu_g * mu_f).sqrt()))
}

/// One inequality check with its signed slack (`>= 0` means satisfied).
#[derive(Clone, Debug, Serialize)]
pub struct PlanCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub margin: f64,
    pub ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanReport {
    pub ok: bool,
    pub checks: Vec<PlanCheck>,
}

impl PlanReport {
    pub fn failures(&self) -> impl Iterator<Item = &PlanCheck> {
        self.checks.iter().filter(|c| !c.ok)
    }
}

/// Checks the three linear-rate conditions for a serial plan: the primal
/// contraction bound, the per-block dual contraction bound, and the
/// step-size condition `tau sigma_i |A_i|^2 theta <= rho^2 p_i`.
pub fn verify_plan(plan: &StepPlan, profile: &ConditionProfile) -> Result<PlanReport> {
    let n = profile.n_blocks();
    if plan.sigma.len() != n || plan.sampling.n_blocks() != n {
        return Err(Error::shape("verify_plan: plan/profile size mismatch"));
    }
    match plan.sampling.kind() {
        crate::sampling::SamplingKind::Serial => {}
        crate::sampling::SamplingKind::Full if n == 1 => {}
        _ => {
            return Err(Error::Plan(
                "verify_plan covers serial plans only".into(),
            ));
        }
    }
    let tol = 1e-9;
    let mut checks = Vec::new();
    let push = |name: String, lhs: f64, rhs: f64, checks: &mut Vec<PlanCheck>| {
        let margin = lhs - rhs;
        let ok = margin >= -tol * rhs.abs().max(1.0);
        checks.push(PlanCheck {
            name,
            lhs,
            rhs,
            margin,
            ok,
        });
    };
    push(
        "theta (1 + 2 mu_g tau) >= 1".into(),
        plan.theta * (1.0 + 2.0 * profile.mu_g * plan.tau),
        1.0,
        &mut checks,
    );
    let p = plan.sampling.marginals();
    for i in 0..n {
        let ms = profile.mu[i] * plan.sigma[i];
        push(
            format!("block {i}: theta (1 + 2 mu_i sigma_i) >= 1 + 2 (1 - p_i) mu_i sigma_i"),
            plan.theta * (1.0 + 2.0 * ms),
            1.0 + 2.0 * (1.0 - p[i]) * ms,
            &mut checks,
        );
    }
    for i in 0..n {
        let v = plan.tau * plan.sigma[i] * profile.norms[i] * profile.norms[i];
        push(
            format!("block {i}: rho^2 p_i >= tau sigma_i |A_i|^2 theta"),
            profile.rho * profile.rho * p[i],
            v * plan.theta,
            &mut checks,
        );
    }
    let ok = checks.iter().all(|c| c.ok);
    Ok(PlanReport { ok, checks })
}
