//! Independent verification that a candidate strategy is an equilibrium.
//!
//! Three routes, in increasing generality:
//!
//! 1. the analytic objective `J(t, x) = x e^{B(t)} H(A(t))` of a
//!    state-independent candidate,
//! 2. generator residuals: with `f(t,x,z) = E[F(X(T)/z) | X(t) = x]`, an
//!    equilibrium satisfies `A^u f(t, x, J) <= 0` for every feasible `u`
//!    with equality at the candidate itself, which this module evaluates by
//!    quadrature in closed form,
//! 3. Monte Carlo perturbation tests: simulate the candidate against
//!    strategies perturbed on `[t, t + eps)` under common random numbers and
//!    check that no perturbation improves the implicit objective to first
//!    order in eps.

pub mod sim;

use nalgebra::{DMatrix, DVector};

use crate::constraint::ConvexSet;
use crate::equilibrium::{
    backward_cumulative_simpson, borrowing_drift, format_f64, EquilibriumSolution, ProblemKind,
};
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::numeric::MonotoneCubic;
use crate::preference::BetweennessPreference;
use crate::quad::QuadratureRule;
use crate::rng::CounterRng;
use crate::table::GTable;
use sim::{implicit_j_mc, paired_j_difference, simulate_coupled, SimConfig};

/// Residual tolerance of the generator check at solver output.
pub const HJB_TOLERANCE: f64 = 2e-6;

/// Absolute resolution floor of a Monte Carlo slope estimate: the implicit
/// roots are solved to ~1e-13 relative, so slopes below this are roundoff
/// even when the coupled confidence interval collapses to zero.
pub const SLOPE_FLOOR: f64 = 1e-9;

/// Below this `A(t)` the singular `xi / sqrt(A)` factor in `f_t` is replaced
/// by its analytic limit.
const DEGENERATE_VARIANCE: f64 = 1e-11;

/// A state-independent candidate strategy with its accumulated variance
/// `A(t)` and log-drift `B(t)`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub problem: ProblemKind,
    t_lo: f64,
    t_hi: f64,
    a_interp: MonotoneCubic,
    b_interp: MonotoneCubic,
    u_interps: Vec<MonotoneCubic>,
}

impl Candidate {
    /// Wrap solver output; `A`, `B` and the weights are interpolated from the
    /// solution grid.
    pub fn from_solution(sol: &EquilibriumSolution) -> Result<Self> {
        let d = sol.dim();
        let mut u_interps = Vec::with_capacity(d);
        for i in 0..d {
            let comp: Vec<f64> = sol.weights.iter().map(|u| u[i]).collect();
            u_interps.push(MonotoneCubic::new(&sol.t, &comp)?);
        }
        Ok(Self {
            problem: sol.problem,
            t_lo: sol.t[0],
            t_hi: *sol.t.last().unwrap(),
            a_interp: MonotoneCubic::new(&sol.t, &sol.log_var)?,
            b_interp: MonotoneCubic::new(&sol.t, &sol.log_drift)?,
            u_interps,
        })
    }

    /// Build a candidate from an arbitrary state-independent strategy by
    /// integrating its variance and drift backward on a uniform grid.
    pub fn from_strategy<F: Fn(f64) -> DVector<f64>>(
        model: &MarketModel,
        problem: ProblemKind,
        strategy: F,
        n_steps: usize,
    ) -> Result<Self> {
        let horizon = model.horizon();
        let n = n_steps.max(2);
        let h = horizon / n as f64;
        let t: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();

        let var_at = |s: f64| -> f64 {
            let a = model.sigma_at(s).transpose() * strategy(s);
            a.norm_squared()
        };
        let drift_at = |s: f64| -> f64 {
            let u = strategy(s);
            match problem {
                ProblemKind::Constrained => u.dot(&model.mu_at(s)),
                ProblemKind::Borrowing => borrowing_drift(model, s, &u),
            }
        };
        let var_nodes: Vec<f64> = t.iter().map(|&s| var_at(s)).collect();
        let var_mids: Vec<f64> = (0..n).map(|k| var_at(t[k] + 0.5 * h)).collect();
        let drift_nodes: Vec<f64> = t.iter().map(|&s| drift_at(s)).collect();
        let drift_mids: Vec<f64> = (0..n).map(|k| drift_at(t[k] + 0.5 * h)).collect();
        let log_var = backward_cumulative_simpson(&var_nodes, &var_mids, h);
        let drift_integral = backward_cumulative_simpson(&drift_nodes, &drift_mids, h);
        let log_drift: Vec<f64> = (0..=n)
            .map(|k| drift_integral[k] - 0.5 * log_var[k])
            .collect();

        let d = model.dim();
        let mut u_interps = Vec::with_capacity(d);
        for i in 0..d {
            let comp: Vec<f64> = t.iter().map(|&s| strategy(s)[i]).collect();
            u_interps.push(MonotoneCubic::new(&t, &comp)?);
        }
        Ok(Self {
            problem,
            t_lo: 0.0,
            t_hi: horizon,
            a_interp: MonotoneCubic::new(&t, &log_var)?,
            b_interp: MonotoneCubic::new(&t, &log_drift)?,
            u_interps,
        })
    }

    /// The solution's strategy scaled by a constant factor, with `A` and `B`
    /// recomputed; a deliberate non-equilibrium candidate when `factor != 1`.
    pub fn scaled_from_solution(
        sol: &EquilibriumSolution,
        model: &MarketModel,
        factor: f64,
    ) -> Result<Self> {
        let base = Candidate::from_solution(sol)?;
        let steps = (sol.t.len() - 1).max(256);
        Candidate::from_strategy(
            model,
            sol.problem,
            |s| base.u_at(s).unwrap() * factor,
            steps,
        )
    }

    pub fn var_at(&self, t: f64) -> Result<f64> {
        Ok(self.a_interp.eval(t)?.max(0.0))
    }

    pub fn drift_at(&self, t: f64) -> Result<f64> {
        self.b_interp.eval(t)
    }

    pub fn u_at(&self, t: f64) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.u_interps.len());
        for (i, interp) in self.u_interps.iter().enumerate() {
            u[i] = interp.eval(t)?;
        }
        Ok(u)
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.t_lo, self.t_hi)
    }
}

/// All partial derivatives of the conditional generator expectation
/// `f(t, x, z)` needed by the extended-HJB residual.
#[derive(Debug, Clone, Copy)]
pub struct FDerivatives {
    pub f: f64,
    pub f_t: f64,
    pub f_x: f64,
    pub f_xx: f64,
    pub f_z: f64,
}

/// Verification context bundling the preference machinery with the market,
/// the constraint set and the candidate under test.
pub struct Verifier<'a> {
    pub pref: &'a BetweennessPreference,
    pub quad: &'a QuadratureRule,
    pub table: &'a GTable,
    pub model: &'a MarketModel,
    /// Feasible set of the constrained problem; `None` means all of R^d
    /// (the borrowing problem or an unconstrained market).
    pub set: Option<&'a ConvexSet>,
    pub candidate: Candidate,
}

impl<'a> Verifier<'a> {
    /// Analytic objective `J(t, x) = x e^{B(t)} H(A(t))`. The scale factor is
    /// computed once so positive homogeneity holds exactly.
    pub fn analytic_j(&self, t: f64, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::config("x", format!("wealth x = {x} must be > 0")));
        }
        let a = self.candidate.var_at(t)?;
        let b = self.candidate.drift_at(t)?;
        let h = self.table.h_at(a)?;
        Ok(x * (b.exp() * h))
    }

    /// `(f, f_t, f_x, f_xx, f_z)` at `(t, x, z)` by quadrature over the
    /// lognormal terminal wealth of the candidate.
    pub fn f_and_derivatives(&self, t: f64, x: f64, z: f64) -> Result<FDerivatives> {
        if !(x > 0.0 && z > 0.0) {
            return Err(Error::config(
                "x/z",
                "wealth and objective level must be > 0",
            ));
        }
        let a = self.candidate.var_at(t)?;
        let b = self.candidate.drift_at(t)?;
        let u = self.candidate.u_at(t)?;
        let exposure = self.model.sigma_at(t).transpose() * &u;
        let var_rate = -exposure.norm_squared(); // A'(t)
        let drift = match self.candidate.problem {
            ProblemKind::Constrained => u.dot(&self.model.mu_at(t)),
            ProblemKind::Borrowing => borrowing_drift(self.model, t, &u),
        };
        let drift_rate = -drift + 0.5 * exposure.norm_squared(); // B'(t)

        let pref = self.pref;
        let base = (x / z) * b.exp();
        let s = a.sqrt();
        let f = self.quad.expect(|xi| pref.f(base * (s * xi).exp()))?;
        let e_fq = self.quad.expect(|xi| {
            let q = base * (s * xi).exp();
            pref.df(q) * q
        })?;
        let f_x = e_fq / x;
        let f_xx = self.quad.expect(|xi| {
            let q = base * (s * xi).exp();
            pref.d2f(q) * q * q
        })? / (x * x);
        let f_z = -(x / z) * f_x;
        let f_t = if a > DEGENERATE_VARIANCE {
            self.quad.expect(|xi| {
                let q = base * (s * xi).exp();
                pref.df(q) * q * (drift_rate + 0.5 * var_rate / s * xi)
            })?
        } else {
            // Limit of the xi / sqrt(A) term as A -> 0.
            let dq = pref.df(base) * base;
            let ddq = pref.d2f(base) * base * base;
            dq * drift_rate + 0.5 * (ddq + dq) * var_rate
        };

        if !(f_z < 0.0) {
            return Err(Error::InternalInconsistency {
                what: format!("f_z = {f_z:.3e} not negative at (t, x, z) = ({t}, {x}, {z})"),
            });
        }
        if !(f_xx < 0.0) {
            return Err(Error::InternalInconsistency {
                what: format!("f_xx = {f_xx:.3e} not negative at (t, x, z) = ({t}, {x}, {z})"),
            });
        }
        Ok(FDerivatives {
            f,
            f_t,
            f_x,
            f_xx,
            f_z,
        })
    }

    fn wealth_drift(&self, t: f64, u: &DVector<f64>) -> f64 {
        match self.candidate.problem {
            ProblemKind::Constrained => u.dot(&self.model.mu_at(t)),
            ProblemKind::Borrowing => borrowing_drift(self.model, t, u),
        }
    }

    /// Generator residual `A^u f(t, x, J)`:
    /// `f_t + x drift(u) f_x + 0.5 ||sigma^T u||^2 x^2 f_xx` at the
    /// candidate's objective level.
    pub fn hjb_residual(&self, t: f64, x: f64, u: &DVector<f64>) -> Result<f64> {
        if let Some(set) = self.set {
            if !set.contains(u, 1e-6) {
                return Err(Error::config("u", "deviation strategy is not feasible"));
            }
        }
        let z = self.analytic_j(t, x)?;
        let d = self.f_and_derivatives(t, x, z)?;
        let a = self.model.sigma_at(t).transpose() * u;
        Ok(d.f_t + x * self.wealth_drift(t, u) * d.f_x + 0.5 * a.norm_squared() * x * x * d.f_xx)
    }

    fn residual_from_derivs(&self, t: f64, x: f64, u: &DVector<f64>, d: &FDerivatives) -> f64 {
        let a = self.model.sigma_at(t).transpose() * u;
        d.f_t + x * self.wealth_drift(t, u) * d.f_x + 0.5 * a.norm_squared() * x * x * d.f_xx
    }

    /// The feasible portfolio maximizing the residual. The residual is a
    /// concave quadratic in the exposure `a = sigma^T u`, so the maximizer is
    /// the projection of `G(A) kappa` (constrained) or the three-branch
    /// portfolio (borrowing).
    pub fn residual_maximizer(&self, t: f64) -> Result<DVector<f64>> {
        let a = self.candidate.var_at(t)?;
        match self.candidate.problem {
            ProblemKind::Constrained => {
                let g = self.table.g_at(a)?;
                let kappa = self.model.kappa(t)?;
                let sigma_t = self.model.sigma_at(t);
                let target = kappa * g;
                match self.set {
                    Some(set) => {
                        let (_, u) = set.project_sigma_image_with_weights(&sigma_t, &target)?;
                        Ok(u)
                    }
                    None => self.model.weights_from_exposure(t, &target),
                }
            }
            ProblemKind::Borrowing => {
                Ok(crate::equilibrium::borrowing_rhs(self.table, self.model, t, a)?.weights)
            }
        }
    }

    /// `(max residual, argmax)` over the feasible set, with a seeded
    /// 200-point random feasibility sweep that must not beat the analytic
    /// maximizer by more than 1e-7.
    pub fn max_hjb_residual(&self, t: f64, x: f64, seed: u64) -> Result<(f64, DVector<f64>)> {
        let u_star = self.residual_maximizer(t)?;
        let z = self.analytic_j(t, x)?;
        let d = self.f_and_derivatives(t, x, z)?;
        let best = self.residual_from_derivs(t, x, &u_star, &d);

        let dim = self.model.dim();
        let scale = 0.5 * (1.0 + u_star.norm());
        let mut rng = CounterRng::for_path(seed, 0x5eed);
        for k in 0..200 {
            let noise = DVector::from_iterator(dim, (0..dim).map(|_| rng.normal() * scale));
            let trial = &u_star + noise;
            let feasible = match self.set {
                Some(set) => set.project_native(&trial)?,
                None => trial,
            };
            let r = self.residual_from_derivs(t, x, &feasible, &d);
            if r > best + 1e-7 {
                return Err(Error::InternalInconsistency {
                    what: format!(
                        "random feasible point beats the analytic maximizer at t = {t}: {r:.6e} > {best:.6e} (sample {k})"
                    ),
                });
            }
        }
        Ok((best, u_star))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HjbPoint {
    pub t: f64,
    pub x: f64,
    pub residual_at_candidate: f64,
    pub max_residual: f64,
    pub argmax_u: DVector<f64>,
    /// Whether the candidate's own portfolio lies in the feasible set; the
    /// residual characterization only applies to feasible candidates, so an
    /// infeasible one fails the point outright.
    pub candidate_feasible: bool,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct HjbReport {
    pub tolerance: f64,
    pub points: Vec<HjbPoint>,
    pub pass: bool,
}

impl HjbReport {
    /// CSV schema: `t, x, residual_at_candidate, max_residual,
    /// argmax_u_1..d, verdict`.
    pub fn to_csv(&self) -> String {
        let d = self.points.first().map_or(0, |p| p.argmax_u.len());
        let mut head = vec![
            "t".to_string(),
            "x".into(),
            "residual_at_candidate".into(),
            "max_residual".into(),
        ];
        head.extend((1..=d).map(|i| format!("argmax_u_{i}")));
        head.push("verdict".into());
        let mut out = head.join(",");
        out.push('\n');
        for p in &self.points {
            let mut row = vec![
                format_f64(p.t),
                format_f64(p.x),
                format_f64(p.residual_at_candidate),
                format_f64(p.max_residual),
            ];
            row.extend(p.argmax_u.iter().map(|&v| format_f64(v)));
            row.push(if p.pass { "pass".into() } else { "fail".into() });
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

impl<'a> Verifier<'a> {
    /// Evaluate the residual identity on a `(t, x)` grid: at a true
    /// equilibrium both the candidate residual and the max residual vanish
    /// within tolerance.
    pub fn hjb_report(&self, t_points: &[f64], x_points: &[f64], seed: u64) -> Result<HjbReport> {
        let mut points = Vec::with_capacity(t_points.len() * x_points.len());
        let mut all_pass = true;
        for (i, &t) in t_points.iter().enumerate() {
            for &x in x_points {
                let u_cand = self.candidate.u_at(t)?;
                let candidate_feasible = self.set.is_none_or(|set| set.contains(&u_cand, 1e-8));
                let z = self.analytic_j(t, x)?;
                let d = self.f_and_derivatives(t, x, z)?;
                let res_cand = self.residual_from_derivs(t, x, &u_cand, &d);
                let (res_max, u_max) = self.max_hjb_residual(t, x, seed ^ (i as u64))?;
                let pass = candidate_feasible
                    && res_cand.abs() <= HJB_TOLERANCE
                    && res_max <= HJB_TOLERANCE;
                all_pass &= pass;
                points.push(HjbPoint {
                    t,
                    x,
                    residual_at_candidate: res_cand,
                    max_residual: res_max,
                    argmax_u: u_max,
                    candidate_feasible,
                    pass,
                });
            }
        }
        Ok(HjbReport {
            tolerance: HJB_TOLERANCE,
            points,
            pass: all_pass,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeVerdict {
    Pass,
    Inconclusive,
    Fail,
}

impl SlopeVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            SlopeVerdict::Pass => "pass",
            SlopeVerdict::Inconclusive => "inconclusive",
            SlopeVerdict::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlopeEstimate {
    pub alternative_index: usize,
    pub eps: f64,
    pub slope: f64,
    pub ci_halfwidth: f64,
    pub predicted: f64,
    pub prediction_consistent: bool,
    pub verdict: SlopeVerdict,
}

#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub t: f64,
    pub x: f64,
    pub alternatives: Vec<DVector<f64>>,
    pub eps_ladder: Vec<f64>,
    pub slopes: Vec<SlopeEstimate>,
    /// `J_mc(candidate) - J_analytic(candidate)` and its halfwidth; a
    /// consistency check of the two objective routes.
    pub baseline_gap: f64,
    pub baseline_ci: f64,
    pub verdict: SlopeVerdict,
}

impl PerturbationReport {
    /// CSV schema: `a_index, eps, slope, ci, predicted_slope, verdict`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a_index,eps,slope,ci,predicted_slope,verdict\n");
        for s in &self.slopes {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.alternative_index,
                format_f64(s.eps),
                format_f64(s.slope),
                format_f64(s.ci_halfwidth),
                format_f64(s.predicted),
                s.verdict.as_str()
            ));
        }
        out
    }
}

impl<'a> Verifier<'a> {
    /// First-order deviation test of the equilibrium property: for constant
    /// alternatives `a`, estimate
    /// `(J(u_{t,eps,a}) - J(candidate)) / eps` by coupled Monte Carlo and
    /// compare with the analytic prediction `A^a f / (-f_z)`.
    pub fn perturbation_test(
        &self,
        t: f64,
        x: f64,
        alternatives: &[DVector<f64>],
        eps_ladder: &[f64],
        cfg: &SimConfig,
    ) -> Result<PerturbationReport> {
        if cfg.n_paths < 1000 {
            return Err(Error::config(
                "n_paths",
                "perturbation reports need >= 1000 paths",
            ));
        }
        if alternatives.is_empty() {
            return Err(Error::config(
                "alternatives",
                "need at least one alternative",
            ));
        }
        if eps_ladder.is_empty() || eps_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config(
                "eps_ladder",
                "epsilons must be strictly decreasing",
            ));
        }
        let horizon = self.model.horizon();
        if eps_ladder[0] >= horizon - t {
            return Err(Error::config(
                "eps_ladder",
                "largest eps must fit inside [t, T)",
            ));
        }
        if let Some(set) = self.set {
            for (i, a) in alternatives.iter().enumerate() {
                if !set.contains(a, 1e-8) {
                    return Err(Error::config(
                        "alternatives",
                        format!("alternative {i} is not feasible"),
                    ));
                }
            }
        }

        // Strategy list: candidate first, then one perturbation per (a, eps),
        // all sharing segment boundaries and random streams.
        let cand = &self.candidate;
        let base = move |s: f64| cand.u_at(s).unwrap();
        let breakpoints: Vec<f64> = eps_ladder.iter().map(|&e| t + e).collect();
        let mut strategies: Vec<Box<dyn Fn(f64) -> DVector<f64> + Sync>> = vec![Box::new(base)];
        for a in alternatives {
            for &eps in eps_ladder {
                let a = a.clone();
                let cutoff = t + eps;
                strategies.push(Box::new(move |s: f64| {
                    if s < cutoff {
                        a.clone()
                    } else {
                        cand.u_at(s).unwrap()
                    }
                }));
            }
        }
        let all_samples = simulate_coupled(
            self.model,
            &strategies,
            t,
            x,
            cfg,
            self.candidate.problem,
            &breakpoints,
        )?;

        let j_analytic = self.analytic_j(t, x)?;
        let (j_base, base_ci) = implicit_j_mc(self.pref, &all_samples[0], Some(j_analytic))?;
        let d = self.f_and_derivatives(t, x, j_analytic)?;

        let mut slopes = Vec::new();
        let mut any_fail = false;
        let mut any_inconclusive = false;
        for (ai, a) in alternatives.iter().enumerate() {
            let predicted = self.residual_from_derivs(t, x, a, &d) / (-d.f_z);
            let mut prev: Option<(f64, f64)> = None;
            for (ei, &eps) in eps_ladder.iter().enumerate() {
                let samples = &all_samples[1 + ai * eps_ladder.len() + ei];
                let (j_diff, diff_ci) =
                    paired_j_difference(self.pref, &all_samples[0], samples, j_base)?;
                let slope = j_diff / eps;
                let ci = diff_ci / eps;
                let clearly_negative = predicted < -(3.0 * ci + SLOPE_FLOOR);
                let verdict = if slope > 3.0 * ci + SLOPE_FLOOR {
                    SlopeVerdict::Fail
                } else if clearly_negative && slope + ci >= 0.0 {
                    SlopeVerdict::Inconclusive
                } else {
                    SlopeVerdict::Pass
                };
                // The eps trend must not drift upward beyond noise.
                if let Some((ps, pci)) = prev {
                    if slope > ps + 3.0 * (ci + pci) + SLOPE_FLOOR {
                        any_inconclusive = true;
                    }
                }
                prev = Some((slope, ci));
                any_fail |= verdict == SlopeVerdict::Fail;
                any_inconclusive |= verdict == SlopeVerdict::Inconclusive;
                slopes.push(SlopeEstimate {
                    alternative_index: ai,
                    eps,
                    slope,
                    ci_halfwidth: ci,
                    predicted,
                    prediction_consistent: (slope - predicted).abs() <= 3.0 * ci + 1e-9,
                    verdict,
                });
            }
        }
        let verdict = if any_fail {
            SlopeVerdict::Fail
        } else if any_inconclusive {
            SlopeVerdict::Inconclusive
        } else {
            SlopeVerdict::Pass
        };
        Ok(PerturbationReport {
            t,
            x,
            alternatives: alternatives.to_vec(),
            eps_ladder: eps_ladder.to_vec(),
            slopes,
            baseline_gap: j_base - j_analytic,
            baseline_ci: base_ci,
            verdict,
        })
    }
}

/// Convenience: evaluate `sigma^T u` at `t`.
pub fn exposure_at(model: &MarketModel, t: f64, u: &DVector<f64>) -> DVector<f64> {
    model.sigma_at(t).transpose() * u
}

/// Identity matrix helper for tests and examples.
pub fn eye(d: usize) -> DMatrix<f64> {
    DMatrix::identity(d, d)
}
