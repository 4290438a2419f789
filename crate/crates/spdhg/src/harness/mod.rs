//! Experiment harness: configuration, synthetic data, problem builders, step
//! planning, multi-seed runs, and metric-table output.
//!
//! A run is bit-reproducible from (config, seed): data generation draws from
//! a dedicated stream keyed by `data_seed`, solver randomness from per-seed
//! streams, and seeds execute on independent problem clones before their
//! tables are merged in seed order.

pub mod cli;
pub mod config;
pub mod experiments;
pub mod phantoms;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::diagnostics::{
    bregman_gap, fit_rate, metric_distances, RateFit, RateMode, SaddleReference,
};
use crate::error::{Error, Result};
use crate::planner::{plan_importance, plan_optimal, plan_uniform, summarize, ConditionProfile};
use crate::sampling::{
    arbitrary_sampling, full_sampling, serial_sampling, uniform_serial, Sampling,
};
use crate::solvers::{
    initial_step_sizes_dual_accel, initial_step_sizes_general, run, RunOptions, SaddleProblem,
    Schedule, StepPlan, Variant,
};

use config::{ExperimentConfig, PlanKind, SamplingId, VariantId};
use experiments::Experiment;

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub seed: u64,
    pub epoch: f64,
    pub iteration: usize,
    pub metric: String,
    pub value: f64,
}

/// Merged metric table across seeds; iteration indices are monotone within
/// each seed and all recorded values are finite.
#[derive(Clone, Debug, Default)]
pub struct MetricTable {
    pub rows: Vec<TableRow>,
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,epoch,iteration,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.seed, r.epoch, r.iteration, r.metric, r.value
            ));
        }
        out
    }

    /// Seed-averaged series of one metric, ordered by iteration.
    pub fn seed_mean_series(&self, metric: &str) -> Vec<(usize, f64)> {
        let mut acc: std::collections::BTreeMap<usize, (f64, usize)> =
            std::collections::BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.metric == metric) {
            let e = acc.entry(r.iteration).or_insert((0.0, 0));
            e.0 += r.value;
            e.1 += 1;
        }
        acc.into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect()
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.rows.iter().map(|r| r.metric.clone()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Builds the sampling requested by the config.
pub fn make_sampling(cfg: &ExperimentConfig, n: usize) -> Result<Sampling> {
    match cfg.sampling {
        SamplingId::Full => full_sampling(n),
        SamplingId::SerialUniform => uniform_serial(n),
        SamplingId::Serial => {
            let p = cfg
                .probs
                .clone()
                .ok_or_else(|| Error::Config("serial sampling needs probs".into()))?;
            if p.len() != n {
                return Err(Error::Config(format!(
                    "probs has {} entries for {n} blocks",
                    p.len()
                )));
            }
            serial_sampling(p)
        }
        SamplingId::Arbitrary => {
            let atoms = cfg
                .atoms
                .clone()
                .ok_or_else(|| Error::Config("arbitrary sampling needs atoms".into()))?;
            let probs = cfg
                .atom_probs
                .clone()
                .ok_or_else(|| Error::Config("arbitrary sampling needs atom_probs".into()))?;
            if atoms.len() != probs.len() {
                return Err(Error::Config("one probability per atom".into()));
            }
            arbitrary_sampling(n, atoms.into_iter().zip(probs).collect())
        }
    }
}

/// Assembles the step plan for the configured variant: recipe-based step
/// sizes for the plain and accelerated variants, the linear-rate planner
/// (which dictates its own serial sampling) for the linear one.
pub fn make_plan(cfg: &ExperimentConfig, problem: &SaddleProblem) -> Result<StepPlan> {
    let n = problem.n_blocks();
    match cfg.variant {
        VariantId::Plain => {
            let sampling = make_sampling(cfg, n)?;
            let (tau, sigma) = initial_step_sizes_general(&problem.a, &sampling, cfg.gamma)?;
            StepPlan::plain(&problem.a, sampling, tau, sigma)
        }
        VariantId::PrimalAccel => {
            let sampling = make_sampling(cfg, n)?;
            let (tau, sigma) = initial_step_sizes_general(&problem.a, &sampling, cfg.gamma)?;
            StepPlan::primal_accel(problem, sampling, tau, sigma)
        }
        VariantId::DualAccel => {
            let sampling = make_sampling(cfg, n)?;
            let (tau0, sigma_tilde0) =
                initial_step_sizes_dual_accel(&problem.a, &sampling, &problem.mu)?;
            StepPlan::dual_accel(problem, sampling, tau0, sigma_tilde0)
        }
        VariantId::Linear => {
            let profile = ConditionProfile::from_problem(problem, cfg.rho)?;
            match cfg.plan {
                PlanKind::Uniform => plan_uniform(&profile, n),
                PlanKind::Importance => plan_importance(&profile, n),
                PlanKind::Optimal => plan_optimal(&profile, n),
            }
        }
    }
}

/// Loads the persisted saddle reference for the experiment, computing and
/// persisting it with a long deterministic run when the files are missing.
/// Set `force` to recompute unconditionally.
pub fn ensure_reference(
    exp: &Experiment,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    force: bool,
) -> Result<SaddleReference> {
    let dir = out_dir.join("references");
    let stem = dir.join(&exp.reference_key);
    if !force {
        match SaddleReference::load(&exp.problem, &stem) {
            Ok(r) => return Ok(r),
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e),
        }
    }
    let n = exp.problem.n_blocks();
    let (tau, sigma) =
        initial_step_sizes_general(&exp.problem.a, &full_sampling(n)?, cfg.gamma)?;
    let reference = SaddleReference::compute(
        &exp.problem,
        tau,
        &sigma,
        cfg.reference_iters(),
        cfg.reference_tol(),
        &*exp.objective,
    )?;
    fs::create_dir_all(&dir)?;
    reference.save(&stem)?;
    Ok(reference)
}

/// Log-spaced 1-based iteration checkpoints, deduplicated and sorted.
pub fn log_spaced(iters: usize, points: usize) -> Vec<usize> {
    if iters <= points {
        return (1..=iters).collect();
    }
    let lo = 1.0_f64.ln();
    let hi = (iters as f64).ln();
    let mut out: Vec<usize> = (0..points)
        .map(|j| {
            let t = lo + (hi - lo) * j as f64 / (points - 1) as f64;
            t.exp().round() as usize
        })
        .map(|k| k.clamp(1, iters))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn slug(cfg: &ExperimentConfig) -> String {
    let variant = match cfg.variant {
        VariantId::Plain => "plain",
        VariantId::PrimalAccel => "pa",
        VariantId::DualAccel => "da",
        VariantId::Linear => match cfg.plan {
            PlanKind::Uniform => "linear_uniform",
            PlanKind::Importance => "linear_importance",
            PlanKind::Optimal => "linear_optimal",
        },
    };
    let sampling = match cfg.sampling {
        SamplingId::Full => "full",
        SamplingId::SerialUniform => "serial",
        SamplingId::Serial => "serial_weighted",
        SamplingId::Arbitrary => "arbitrary",
    };
    format!(
        "{}_{}_{}_k{}_s{}",
        cfg.experiment.as_str(),
        variant,
        sampling,
        cfg.epochs,
        cfg.seeds
    )
}

pub struct RunArtifacts {
    pub table: MetricTable,
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: String,
    pub reference_objective: f64,
    pub iters: usize,
}

/// Runs the configured experiment over all seeds and writes the merged CSV
/// table plus a structured summary with fitted rates to `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let exp = experiments::build(cfg)?;
    let reference = ensure_reference(&exp, cfg, out_dir, false)?;
    let plan = make_plan(cfg, &exp.problem)?;

    let epoch_per_iter =
        plan.sampling.expected_subset_size() / plan.sampling.n_blocks() as f64;
    let iters = ((cfg.epochs as f64 / epoch_per_iter).ceil() as usize).max(1);
    let schedule = Schedule::Explicit(log_spaced(iters, cfg.emissions));

    let x0 = exp.x0.clone();
    let y0 = exp.y0.clone();
    let phi0 = (exp.objective)(&x0);
    let denom = phi0 - reference.objective;
    if !(denom > 0.0) {
        return Err(Error::Reference(format!(
            "objective at the zero start ({phi0}) does not exceed the reference \
             objective ({}); relative objective undefined",
            reference.objective
        )));
    }

    let seed_rows: Vec<Vec<TableRow>> = (0..cfg.seeds as u64)
        .into_par_iter()
        .map(|seed| -> Result<Vec<TableRow>> {
            let problem = exp.problem.clone();
            let objective = exp.objective.clone();
            let reference = &reference;
            let plan_ref = &plan;
            let mut opts = RunOptions::new(iters, seed);
            opts.schedule = schedule.clone();
            let mut metrics = |_k: usize, _epoch: f64, st: &crate::solvers::SolverState| {
                let phi = objective(&st.x);
                let mut out = vec![
                    ("objective".to_string(), phi),
                    (
                        "rel_objective".to_string(),
                        (phi - reference.objective) / denom,
                    ),
                    (
                        "ergodic_gap".to_string(),
                        bregman_gap(&st.ergodic_x(), &st.ergodic_y(), reference, &problem),
                    ),
                ];
                out.extend(metric_distances(&st.x, &st.y, reference, plan_ref, &problem));
                out
            };
            let outcome = run(&problem, plan_ref, &x0, &y0, &opts, &mut metrics)?;
            Ok(outcome
                .rows
                .into_iter()
                .map(|r| TableRow {
                    seed,
                    epoch: r.epoch,
                    iteration: r.iteration,
                    metric: r.metric,
                    value: r.value,
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = MetricTable::default();
    for rows in seed_rows {
        table.rows.extend(rows);
    }

    let summary = render_summary(cfg, &plan, &table, iters, reference.objective);
    fs::create_dir_all(out_dir)?;
    let base = slug(cfg);
    let csv_path = out_dir.join(format!("{base}.csv"));
    let summary_path = out_dir.join(format!("{base}.summary.txt"));
    fs::write(&csv_path, table.to_csv())?;
    fs::write(&summary_path, &summary)?;
    Ok(RunArtifacts {
        table,
        csv_path,
        summary_path,
        summary,
        reference_objective: reference.objective,
        iters,
    })
}

fn fit_or_na(fit: Result<RateFit>) -> String {
    match fit {
        Ok(f) => format!("{} n_used {} n_filtered {}", f.rate, f.n_used, f.n_filtered),
        Err(_) => "na".to_string(),
    }
}

fn render_summary(
    cfg: &ExperimentConfig,
    plan: &StepPlan,
    table: &MetricTable,
    iters: usize,
    reference_objective: f64,
) -> String {
    let params = summarize(plan, cfg.rho);
    let mut s = String::from("spdhg-summary v1\n");
    s.push_str(&format!("run {}\n", slug(cfg)));
    s.push_str(&format!("seeds {}\n", cfg.seeds));
    s.push_str(&format!("iterations {}\n", iters));
    s.push_str(&format!("epochs {}\n", cfg.epochs));
    s.push_str(&format!("reference_objective {:.17e}\n", reference_objective));
    s.push_str(&format!("theta {}\n", params.theta));
    s.push_str(&format!("tau {}\n", params.tau));
    let fmt_list =
        |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
    s.push_str(&format!("sigma {}\n", fmt_list(&params.sigma)));
    s.push_str(&format!("p {}\n", fmt_list(&params.p)));
    for name in table.metric_names() {
        let series = table.seed_mean_series(&name);
        // drop the k = 0 point; rate fits are about the tail anyway
        let power = fit_or_na(fit_rate(&series, 0, RateMode::PowerLaw));
        s.push_str(&format!("metric {name} power_rate {power}\n"));
        if plan.variant == Variant::Linear {
            let geo = fit_or_na(fit_rate(&series, 0, RateMode::Geometric));
            s.push_str(&format!("metric {name} geometric_rate {geo}\n"));
        }
    }
    s
}
