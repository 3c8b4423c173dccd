//! Command implementations: build the numeric stack from a parsed config,
//! run, and emit CSV artifacts.

use std::path::PathBuf;

use beq_core::verify::{Candidate, Verifier};
use beq_core::{
    build_g_table, check_wellposedness, format_f64, solve_borrowing, solve_constrained, ConvexSet,
    EquilibriumSolution, GTable, ProblemKind, QuadratureRule, SimConfig, SlopeVerdict, Verdict,
};
use nalgebra::DVector;

use crate::config::RunConfig;
use crate::{plots, CliError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY_FAIL: u8 = 2;
pub const EXIT_NOT_PROVEN: u8 = 3;

pub struct Ctx {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
}

impl Ctx {
    pub fn new(
        mut cfg: RunConfig,
        out: Option<PathBuf>,
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        if let Some(s) = seed {
            cfg.verify.seed = s;
        }
        let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.directory));
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", out_dir.display())))?;
        Ok(Self { cfg, out_dir })
    }

    fn build_table(&self) -> Result<(QuadratureRule, GTable), CliError> {
        let quad = QuadratureRule::gauss_hermite(self.cfg.solver.quad_order)?;
        let table = build_g_table(
            &self.cfg.preference,
            self.cfg.solver.y_max,
            self.cfg.solver.table_nodes,
            &quad,
        )?;
        Ok((quad, table))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn solution_path(&self) -> PathBuf {
        self.out_dir.join("solution.csv")
    }

    fn emit_solution(&self, sol: &EquilibriumSolution) -> Result<(), CliError> {
        let path = self.write("solution.csv", &sol.to_csv())?;
        println!(
            "solved {:?}: nodes={} A(0)={} max_local_error={:.3e}",
            sol.problem,
            sol.t.len(),
            format_f64(sol.log_var[0]),
            sol.diagnostics.max_local_error
        );
        if sol.diagnostics.chattering_warning {
            println!(
                "warning: regime chattering ({} switches over {} steps)",
                sol.diagnostics.regime_switches, sol.diagnostics.steps
            );
        }
        if sol.diagnostics.flagged_threshold_nodes > 0 {
            println!(
                "note: {} nodes had nonpositive total candidate weight (threshold quotient undefined there)",
                sol.diagnostics.flagged_threshold_nodes
            );
        }
        println!("wrote {}", path.display());
        if self.cfg.output.emit_plots {
            let p = self.write("plot_solution.py", plots::solution_plot_script())?;
            println!("wrote {}", p.display());
        }
        Ok(())
    }
}

pub fn solve_constrained_cmd(ctx: &Ctx) -> Result<u8, CliError> {
    if !ctx.cfg.market.saving_rate_is_zero() {
        return Err(CliError::semantic(
            "market.r",
            "the constrained problem assumes a zero saving rate; use `solve borrowing`",
        ));
    }
    if !ctx.cfg.market.rates_coincide() {
        return Err(CliError::semantic(
            "market.R",
            "a distinct borrowing rate belongs to `solve borrowing`, not the constrained problem",
        ));
    }
    let (_, table) = ctx.build_table()?;
    let set = ctx
        .cfg
        .constraint
        .clone()
        .unwrap_or_else(|| ConvexSet::full_space(ctx.cfg.market.dim()));
    let sol = solve_constrained(&table, &ctx.cfg.market, &set, ctx.cfg.solver.n_steps)?;
    ctx.emit_solution(&sol)?;
    Ok(EXIT_OK)
}

pub fn solve_borrowing_cmd(ctx: &Ctx) -> Result<u8, CliError> {
    if ctx.cfg.constraint.is_some() {
        return Err(CliError::semantic(
            "constraint",
            "the borrowing problem is solved over unconstrained weights; remove the constraint section",
        ));
    }
    let (_, table) = ctx.build_table()?;
    let sol = solve_borrowing(&table, &ctx.cfg.market, ctx.cfg.solver.n_steps)?;
    ctx.emit_solution(&sol)?;
    Ok(EXIT_OK)
}

fn inferred_problem(ctx: &Ctx) -> ProblemKind {
    if ctx.cfg.constraint.is_some() || ctx.cfg.market.rates_coincide() {
        ProblemKind::Constrained
    } else {
        ProblemKind::Borrowing
    }
}

pub fn wellposedness_cmd(ctx: &Ctx) -> Result<u8, CliError> {
    let (_, table) = ctx.build_table()?;
    let problem = inferred_problem(ctx);
    let set = ctx
        .cfg
        .constraint
        .clone()
        .unwrap_or_else(|| ConvexSet::full_space(ctx.cfg.market.dim()));
    let report = check_wellposedness(problem, &table, &ctx.cfg.market, &set)?;

    let mut csv = String::from("condition,value,threshold,satisfied\n");
    for c in &report.conditions {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            c.name,
            format_f64(c.value),
            format_f64(c.threshold),
            c.satisfied
        ));
    }
    let path = ctx.write("wellposedness.csv", &csv)?;
    for c in &report.conditions {
        println!(
            "condition {}: value={:.6e} threshold={:.6e} satisfied={}",
            c.name, c.value, c.threshold, c.satisfied
        );
    }
    for n in &report.notes {
        println!("note: {n}");
    }
    println!("verdict: {:?}", report.verdict);
    println!("wrote {}", path.display());
    Ok(if report.verdict == Verdict::Proven {
        EXIT_OK
    } else {
        EXIT_NOT_PROVEN
    })
}

fn load_solution(ctx: &Ctx) -> Result<EquilibriumSolution, CliError> {
    let path = ctx.solution_path();
    let text = std::fs::read_to_string(&path).map_err(|_| {
        CliError::io(format!(
            "{} not found; run `beq solve constrained|borrowing` into this output directory first",
            path.display()
        ))
    })?;
    Ok(EquilibriumSolution::from_csv(&text)?)
}

fn check_problem_consistency(ctx: &Ctx, sol: &EquilibriumSolution) -> Result<(), CliError> {
    if sol.problem == ProblemKind::Borrowing && ctx.cfg.constraint.is_some() {
        return Err(CliError::semantic(
            "constraint",
            "solution.csv is a borrowing solution but the config has a constraint section",
        ));
    }
    if sol.dim() != ctx.cfg.market.dim() {
        return Err(CliError::semantic(
            "market.d",
            "solution.csv dimension disagrees with the config",
        ));
    }
    Ok(())
}

/// Recompute the fixed-point residual of the reloaded solution against the
/// config's market and constraint: every stored exposure must equal the
/// projection (or branch portfolio) implied by its own `A`. Catches stale or
/// mismatched solution/config pairs before any verification runs.
fn check_fixed_point(
    ctx: &Ctx,
    table: &GTable,
    set: Option<&ConvexSet>,
    sol: &EquilibriumSolution,
) -> Result<(), CliError> {
    let mut worst = 0.0f64;
    for k in 0..sol.t.len() {
        let t = sol.t[k];
        let expected = match sol.problem {
            ProblemKind::Constrained => {
                let g = table.g_at(sol.log_var[k])?;
                let kappa = ctx.cfg.market.kappa(t)?;
                let sigma_t = ctx.cfg.market.sigma_at(t);
                match set {
                    Some(s) => s.project_sigma_image(&sigma_t, &(kappa * g))?,
                    None => kappa * g,
                }
            }
            ProblemKind::Borrowing => {
                let branch = beq_core::borrowing_rhs(table, &ctx.cfg.market, t, sol.log_var[k])?;
                ctx.cfg.market.sigma_at(t).transpose() * branch.weights
            }
        };
        worst = worst.max((&sol.exposure[k] - expected).norm());
    }
    if worst > 1e-7 {
        return Err(CliError::semantic(
            "solution.csv",
            &format!(
                "fixed-point residual {worst:.3e} > 1e-7; the solution does not match this config"
            ),
        ));
    }
    Ok(())
}

fn make_verifier<'a>(
    ctx: &'a Ctx,
    quad: &'a QuadratureRule,
    table: &'a GTable,
    set: Option<&'a ConvexSet>,
    sol: &EquilibriumSolution,
    scale: f64,
) -> Result<Verifier<'a>, CliError> {
    let candidate = if scale == 1.0 {
        Candidate::from_solution(sol)?
    } else {
        Candidate::scaled_from_solution(sol, &ctx.cfg.market, scale)?
    };
    Ok(Verifier {
        pref: &ctx.cfg.preference,
        quad,
        table,
        model: &ctx.cfg.market,
        set,
        candidate,
    })
}

fn grids(ctx: &Ctx) -> (Vec<f64>, Vec<f64>) {
    let horizon = ctx.cfg.market.horizon();
    let (nt, nx) = (ctx.cfg.verify.grid_t, ctx.cfg.verify.grid_x);
    let t: Vec<f64> = (0..nt).map(|i| horizon * i as f64 / nt as f64).collect();
    let x: Vec<f64> = if nx == 1 {
        vec![1.0]
    } else {
        (0..nx)
            .map(|j| 0.5 * 4f64.powf(j as f64 / (nx - 1) as f64))
            .collect()
    };
    (t, x)
}

pub fn verify_hjb_cmd(ctx: &Ctx, scale: f64) -> Result<u8, CliError> {
    let sol = load_solution(ctx)?;
    check_problem_consistency(ctx, &sol)?;
    let (quad, table) = ctx.build_table()?;
    let set = match sol.problem {
        ProblemKind::Constrained => Some(
            ctx.cfg
                .constraint
                .clone()
                .unwrap_or_else(|| ConvexSet::full_space(ctx.cfg.market.dim())),
        ),
        ProblemKind::Borrowing => None,
    };
    if scale == 1.0 {
        check_fixed_point(ctx, &table, set.as_ref(), &sol)?;
    }
    let verifier = make_verifier(ctx, &quad, &table, set.as_ref(), &sol, scale)?;
    let (t_grid, x_grid) = grids(ctx);
    let report = verifier.hjb_report(&t_grid, &x_grid, ctx.cfg.verify.seed)?;
    let path = ctx.write("hjb_report.csv", &report.to_csv())?;
    let worst_cand = report
        .points
        .iter()
        .map(|p| p.residual_at_candidate.abs())
        .fold(0.0, f64::max);
    let worst_max = report
        .points
        .iter()
        .map(|p| p.max_residual)
        .fold(f64::MIN, f64::max);
    println!(
        "hjb: {} points, tolerance {:.1e}, worst |residual| {:.3e}, worst max residual {:.3e}",
        report.points.len(),
        report.tolerance,
        worst_cand,
        worst_max
    );
    println!("verdict: {}", if report.pass { "pass" } else { "fail" });
    println!("wrote {}", path.display());
    Ok(if report.pass {
        EXIT_OK
    } else {
        EXIT_VERIFY_FAIL
    })
}

pub fn verify_perturb_cmd(ctx: &Ctx, scale: f64) -> Result<u8, CliError> {
    let sol = load_solution(ctx)?;
    check_problem_consistency(ctx, &sol)?;
    let (quad, table) = ctx.build_table()?;
    let set = match sol.problem {
        ProblemKind::Constrained => Some(
            ctx.cfg
                .constraint
                .clone()
                .unwrap_or_else(|| ConvexSet::full_space(ctx.cfg.market.dim())),
        ),
        ProblemKind::Borrowing => None,
    };
    let verifier = make_verifier(ctx, &quad, &table, set.as_ref(), &sol, scale)?;

    let horizon = ctx.cfg.market.horizon();
    let t_star = ctx.cfg.verify.t.unwrap_or(horizon / 5.0);
    let alternatives = match &ctx.cfg.verify.alternatives {
        Some(alts) => alts.clone(),
        None => default_alternatives(&verifier, set.as_ref(), t_star)?,
    };
    let sim = SimConfig {
        n_paths: ctx.cfg.verify.n_paths,
        seed: ctx.cfg.verify.seed,
        scheme: ctx.cfg.verify.scheme,
        n_time_steps: ctx.cfg.verify.euler_steps,
    };
    let report = verifier.perturbation_test(
        t_star,
        ctx.cfg.verify.x,
        &alternatives,
        &ctx.cfg.verify.eps_ladder,
        &sim,
    )?;
    let path = ctx.write("perturbation.csv", &report.to_csv())?;
    println!(
        "perturb: t={t_star} x={} alternatives={} baseline gap {:.3e} (ci {:.3e})",
        ctx.cfg.verify.x,
        alternatives.len(),
        report.baseline_gap,
        report.baseline_ci
    );
    println!("verdict: {}", report.verdict.as_str());
    println!("wrote {}", path.display());
    Ok(if report.verdict == SlopeVerdict::Fail {
        EXIT_VERIFY_FAIL
    } else {
        EXIT_OK
    })
}

/// Four constant alternatives around the candidate: itself, half, a pushed
/// version projected back to feasibility, and the do-nothing portfolio.
fn default_alternatives(
    verifier: &Verifier<'_>,
    set: Option<&ConvexSet>,
    t_star: f64,
) -> Result<Vec<DVector<f64>>, CliError> {
    let u_hat = verifier.candidate.u_at(t_star)?;
    let dim = u_hat.len();
    let feasible = |u: DVector<f64>| -> Result<DVector<f64>, CliError> {
        match set {
            Some(s) => Ok(s.project_native(&u)?),
            None => Ok(u),
        }
    };
    Ok(vec![
        u_hat.clone(),
        feasible(&u_hat * 0.5)?,
        feasible(&u_hat * 1.25)?,
        feasible(DVector::zeros(dim))?,
    ])
}
