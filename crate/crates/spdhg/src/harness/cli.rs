//! Command-line front end: `run`, `plan`, `validate-eso`, and `reference`
//! subcommands over a shared config/output interface.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Result;
use crate::harness::config::{ExperimentConfig, Scale};
use crate::harness::{ensure_reference, experiments, make_plan, run_experiment};
use crate::planner::{
    plan_importance, plan_optimal, plan_uniform, summarize, verify_plan, ConditionProfile,
    PlanReport,
};
use crate::sampling::validate_eso;
use crate::solvers::StepPlan;

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "SPDHG_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "spdhg",
    about = "Stochastic primal-dual experiment runner",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over all seeds and write metric tables
    Run(CommonArgs),
    /// Print linear-rate plans (uniform, importance, optimal) with checks
    Plan(CommonArgs),
    /// Numerically certify the step sizes against the sampling
    ValidateEso(CommonArgs),
    /// Compute and persist the saddle reference, replacing any existing one
    Reference(CommonArgs),
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the number of seeds
    #[arg(long)]
    seeds: Option<usize>,
    /// Output directory (default: config, then $SPDHG_OUT_DIR, then ./out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the problem scale
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,
}

impl CommonArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        cfg.validate()?;
        Ok((cfg, out))
    }
}

/// Parses `argv` and executes; returns the process exit code. Usage errors
/// exit 2 (clap's convention), runtime failures exit 1.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Plan(args) => cmd_plan(&args),
        Command::ValidateEso(args) => cmd_validate_eso(&args),
        Command::Reference(args) => cmd_reference(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_run(args: &CommonArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let artifacts = run_experiment(&cfg, &out)?;
    println!("table   {}", artifacts.csv_path.display());
    println!("summary {}", artifacts.summary_path.display());
    print!("{}", artifacts.summary);
    Ok(())
}

fn print_plan(label: &str, plan: &StepPlan, report: &PlanReport, rho: f64) {
    let params = summarize(plan, rho);
    let list = |v: &[f64]| {
        v.iter()
            .map(f64::to_string)
            .collect::<Vec<_>>()
            .join(" ")
    };
    println!("plan {label}");
    println!("  theta {}", params.theta);
    println!("  tau   {}", params.tau);
    println!("  sigma {}", list(&params.sigma));
    println!("  p     {}", list(&params.p));
    for c in &report.checks {
        println!(
            "  check {} lhs {} rhs {} margin {} {}",
            c.name,
            c.lhs,
            c.rhs,
            c.margin,
            if c.ok { "ok" } else { "VIOLATED" }
        );
    }
    println!("  verify {}", if report.ok { "ok" } else { "FAILED" });
}

fn cmd_plan(args: &CommonArgs) -> Result<()> {
    let (cfg, _out) = args.load()?;
    let exp = experiments::build(&cfg)?;
    let profile = ConditionProfile::from_problem(&exp.problem, cfg.rho)?;
    let n = exp.problem.n_blocks();
    for (label, plan) in [
        ("uniform", plan_uniform(&profile, n)?),
        ("importance", plan_importance(&profile, n)?),
        ("optimal", plan_optimal(&profile, n)?),
    ] {
        let report = verify_plan(&plan, &profile)?;
        print_plan(label, &plan, &report, cfg.rho);
    }
    Ok(())
}

fn cmd_validate_eso(args: &CommonArgs) -> Result<()> {
    let (cfg, _out) = args.load()?;
    let exp = experiments::build(&cfg)?;
    let plan = make_plan(&cfg, &exp.problem)?;
    let report = validate_eso(
        &plan.sampling,
        &exp.problem.a,
        plan.tau,
        &plan.sigma,
        &plan.eso,
        50,
        2 * exp.problem.n_blocks(),
        0,
    )?;
    println!("probes    {}", report.n_probes);
    println!("max_ratio {}", report.max_ratio);
    println!("worst     {}", report.worst_probe);
    println!(
        "verdict   {}",
        if report.max_ratio <= 1.0 + 1e-9 {
            "ok"
        } else {
            "VIOLATED"
        }
    );
    Ok(())
}

fn cmd_reference(args: &CommonArgs) -> Result<()> {
    let (cfg, out) = args.load()?;
    let exp = experiments::build(&cfg)?;
    let reference = ensure_reference(&exp, &cfg, &out, true)?;
    println!("key       {}", exp.reference_key);
    println!("objective {:.17e}", reference.objective);
    println!("residual  {:e}", reference.residual);
    println!("tolerance {:e}", reference.tolerance);
    println!(
        "stem      {}",
        out.join("references").join(&exp.reference_key).display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(main_with_args(["spdhg", "frobnicate"]), 2);
        assert_eq!(main_with_args(["spdhg"]), 2);
        assert_eq!(main_with_args(["spdhg", "run"]), 2, "missing --config");
    }

    #[test]
    fn missing_config_file_is_a_runtime_error() {
        assert_eq!(
            main_with_args(["spdhg", "run", "--config", "/nonexistent/x.toml"]),
            1
        );
    }

    #[test]
    fn scale_parser_accepts_the_two_scales() {
        assert_eq!(parse_scale("desk").unwrap(), Scale::Desk);
        assert_eq!(parse_scale("paper").unwrap(), Scale::Paper);
        assert!(parse_scale("poster").is_err());
    }
}
