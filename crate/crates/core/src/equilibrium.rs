//! Backward first-order ODE solvers for the equilibrium strategies.
//!
//! Constrained problem (zero saving rate):
//!
//! ```text
//! A'(t) = -||P_t(kappa(t) G(A(t)))||^2,   A(T) = 0,
//! u(t)  = (sigma^T(t))^{-1} P_t(kappa(t) G(A(t))),
//! ```
//!
//! borrowing-cost problem (rates r <= R):
//!
//! ```text
//! A'(t) = -H(t, A(t)),                    A(T) = 0,
//! ```
//!
//! with the three-branch right-hand side selecting between the saving-rate
//! portfolio, the borrowing-rate portfolio, and the fully-invested boundary
//! portfolio. Both ODEs are integrated time-reversed from zero by classical
//! RK4 with a per-step Richardson error estimate. Alongside `A`, the solver
//! accumulates the log-drift `B(t)` so the certainty equivalent
//! `J = x e^{B(t)} H(A(t))` is available downstream.

use nalgebra::DVector;

use crate::constraint::ConvexSet;
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::table::GTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Constrained,
    Borrowing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Constrained problem: the projection did not move the point.
    Unconstrained,
    /// Constrained problem: the constraint is active.
    Constrained,
    /// Borrowing problem: total weight below 1, invest at the saving rate.
    Save,
    /// Borrowing problem: fully invested, total weight pinned at 1.
    Boundary,
    /// Borrowing problem: total weight above 1, borrow at the higher rate.
    Borrow,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Unconstrained => "unconstrained",
            Regime::Constrained => "constrained",
            Regime::Save => "save",
            Regime::Boundary => "boundary",
            Regime::Borrow => "borrow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "unconstrained" => Regime::Unconstrained,
            "constrained" => Regime::Constrained,
            "save" => Regime::Save,
            "boundary" => Regime::Boundary,
            "borrow" => Regime::Borrow,
            other => {
                return Err(Error::config(
                    "csv.regime",
                    format!("unknown regime '{other}'"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveDiagnostics {
    pub steps: usize,
    pub max_local_error: f64,
    /// Number of regime changes along the grid (borrowing problem).
    pub regime_switches: usize,
    /// Set when regimes switch more than n_steps/4 times.
    pub chattering_warning: bool,
    /// Borrowing nodes where `1 . u_i <= 0`, where the reciprocal threshold
    /// form of the branch conditions would be ill-defined; selection by
    /// direct comparison still applies but the nodes are flagged.
    pub flagged_threshold_nodes: usize,
}

/// Time grid with the ODE state, the strategy and per-node diagnostics.
#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    pub problem: ProblemKind,
    /// Forward time, `t[0] = 0`, `t[last] = T`.
    pub t: Vec<f64>,
    /// `A(t) = Var[log X(T) | t]`, non-increasing, `A(T) = 0`.
    pub log_var: Vec<f64>,
    /// `B(t) = E[log(X(T)/x) | t]`.
    pub log_drift: Vec<f64>,
    /// Volatility exposure `a(t) = sigma^T(t) u(t)`.
    pub exposure: Vec<DVector<f64>>,
    /// Portfolio weights `u(t)`.
    pub weights: Vec<DVector<f64>>,
    pub regime: Vec<Regime>,
    /// `||a(t_k) - P_{t_k}(kappa G(A))||` recomputed per node.
    pub fp_residual: Vec<f64>,
    pub diagnostics: SolveDiagnostics,
}

const REGIME_TOL: f64 = 1e-9;
const LOCAL_ERROR_BUDGET: f64 = 1e-8;

/// One classical RK4 step of `y' = rhs(s, y)`.
fn rk4_step<F: FnMut(f64, f64) -> Result<f64>>(rhs: &mut F, s: f64, y: f64, h: f64) -> Result<f64> {
    let k1 = rhs(s, y)?;
    let k2 = rhs(s + 0.5 * h, y + 0.5 * h * k1)?;
    let k3 = rhs(s + 0.5 * h, y + 0.5 * h * k2)?;
    let k4 = rhs(s + h, y + h * k3)?;
    Ok(y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
}

/// Integrate the time-reversed state from 0 over `n_steps` uniform steps.
/// Returns states at the reversed nodes, states at step midpoints, and the
/// largest Richardson local-error estimate.
fn integrate_reversed<F: FnMut(f64, f64) -> Result<f64>>(
    rhs: &mut F,
    horizon: f64,
    n_steps: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let h = horizon / n_steps as f64;
    let mut nodes = Vec::with_capacity(n_steps + 1);
    let mut mids = Vec::with_capacity(n_steps);
    let mut max_err = 0.0f64;
    let mut y = 0.0;
    nodes.push(y);
    for j in 0..n_steps {
        let s = j as f64 * h;
        let full = rk4_step(rhs, s, y, h)?;
        let half = rk4_step(rhs, s, y, 0.5 * h)?;
        let two_halves = rk4_step(rhs, s + 0.5 * h, half, 0.5 * h)?;
        let err = (two_halves - full).abs() / 15.0;
        max_err = max_err.max(err);
        if err > LOCAL_ERROR_BUDGET * (1.0 + two_halves.abs()) {
            return Err(Error::StepControl {
                t: horizon - (s + h),
                estimate: err,
                limit: LOCAL_ERROR_BUDGET * (1.0 + two_halves.abs()),
            });
        }
        mids.push(half);
        y = two_halves;
        nodes.push(y);
    }
    Ok((nodes, mids, max_err))
}

fn g_checked(table: &GTable, y: f64) -> Result<f64> {
    table.g_at(y).map_err(|_| Error::TableRange {
        reached: y,
        y_max: table.y_max(),
    })
}

/// Backward cumulative Simpson: `out[k] = int_{t_k}^{T} f dt` from nodal and
/// midpoint samples on a uniform grid.
pub(crate) fn backward_cumulative_simpson(node_vals: &[f64], mid_vals: &[f64], h: f64) -> Vec<f64> {
    let n = mid_vals.len();
    let mut out = vec![0.0; n + 1];
    for k in (0..n).rev() {
        out[k] = out[k + 1] + h / 6.0 * (node_vals[k] + 4.0 * mid_vals[k] + node_vals[k + 1]);
    }
    out
}

/// Solve the constrained problem. Requires a zero saving rate and a valid
/// ellipticity certificate; the G-table must cover the reachable `A` range.
pub fn solve_constrained(
    table: &GTable,
    model: &MarketModel,
    set: &ConvexSet,
    n_steps: usize,
) -> Result<EquilibriumSolution> {
    if n_steps < 2 {
        return Err(Error::config("n_steps", "need at least 2 steps"));
    }
    if set.dim() != model.dim() {
        return Err(Error::config(
            "constraint",
            "constraint dimension disagrees with market.d",
        ));
    }
    if !model.saving_rate_is_zero() {
        return Err(Error::config(
            "market.r",
            "the constrained problem assumes r = 0; use the borrowing solver for nonzero rates",
        ));
    }
    model.certify_ellipticity(512)?;

    let horizon = model.horizon();
    let mut rhs = |s: f64, y: f64| -> Result<f64> {
        let t = horizon - s;
        let g = g_checked(table, y)?;
        let kappa = model.kappa(t)?;
        let sigma_t = model.sigma_at(t);
        let z = set.project_sigma_image(&sigma_t, &(kappa * g))?;
        Ok(z.norm_squared())
    };
    let (rev_nodes, rev_mids, max_err) = integrate_reversed(&mut rhs, horizon, n_steps)?;

    let h = horizon / n_steps as f64;
    let n = n_steps;
    let t: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let log_var: Vec<f64> = (0..=n).map(|k| rev_nodes[n - k]).collect();

    let mut exposure = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    let mut regime = Vec::with_capacity(n + 1);
    let mut fp_residual = Vec::with_capacity(n + 1);
    let mut drift_nodes = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let tk = t[k];
        let g = g_checked(table, log_var[k])?;
        let kappa = model.kappa(tk)?;
        let sigma_t = model.sigma_at(tk);
        let target = &kappa * g;
        let (z, u) = set.project_sigma_image_with_weights(&sigma_t, &target)?;
        // The exposure is defined as this projection, so the fixed-point
        // residual vanishes identically at solver output; reloading a CSV
        // against a different config is what makes it nonzero.
        fp_residual.push(0.0);
        regime.push(
            if (&z - &target).norm() <= REGIME_TOL * (1.0 + target.norm()) {
                Regime::Unconstrained
            } else {
                Regime::Constrained
            },
        );
        drift_nodes.push(z.dot(&kappa));
        exposure.push(z);
        weights.push(u);
    }
    // Midpoint drift samples for the Simpson accumulation of B. The forward
    // midpoint of step k lives at reversed index n-1-k.
    let mut drift_mids = Vec::with_capacity(n);
    for k in 0..n {
        let tm = t[k] + 0.5 * h;
        let a_mid = rev_mids[n - 1 - k];
        let g = g_checked(table, a_mid)?;
        let kappa = model.kappa(tm)?;
        let sigma_t = model.sigma_at(tm);
        let z = set.project_sigma_image(&sigma_t, &(&kappa * g))?;
        drift_mids.push(z.dot(&kappa));
    }
    let drift_integral = backward_cumulative_simpson(&drift_nodes, &drift_mids, h);
    let log_drift: Vec<f64> = (0..=n)
        .map(|k| drift_integral[k] - 0.5 * log_var[k])
        .collect();

    Ok(EquilibriumSolution {
        problem: ProblemKind::Constrained,
        t,
        log_var,
        log_drift,
        exposure,
        weights,
        regime,
        fp_residual,
        diagnostics: SolveDiagnostics {
            steps: n,
            max_local_error: max_err,
            ..Default::default()
        },
    })
}

/// Closed-form route for the unconstrained problem:
/// `A(t) = Gcal^{-1}(int_t^T ||kappa||^2 ds)`. Serves as the oracle for
/// `solve_constrained` with a full-space constraint.
pub fn solve_unconstrained_closed_form(
    table: &GTable,
    model: &MarketModel,
    n_steps: usize,
) -> Result<EquilibriumSolution> {
    if n_steps < 2 {
        return Err(Error::config("n_steps", "need at least 2 steps"));
    }
    if !model.saving_rate_is_zero() {
        return Err(Error::config(
            "market.r",
            "the unconstrained closed form assumes r = 0",
        ));
    }
    let horizon = model.horizon();
    let n = n_steps;
    let h = horizon / n as f64;

    // Cumulative ||kappa||^2 at half-step resolution so A is available at
    // both nodes and step midpoints.
    let k2 = |t: f64| -> Result<f64> { Ok(model.kappa(t)?.norm_squared()) };
    let fine = 2 * n;
    let fine_h = 0.5 * h;
    let mut fine_nodes = Vec::with_capacity(fine + 1);
    for j in 0..=fine {
        fine_nodes.push(k2(j as f64 * fine_h)?);
    }
    let mut fine_mids = Vec::with_capacity(fine);
    for j in 0..fine {
        fine_mids.push(k2((j as f64 + 0.5) * fine_h)?);
    }
    let kappa_energy = backward_cumulative_simpson(&fine_nodes, &fine_mids, fine_h);

    let budget = table.gcal_at(table.y_max())?;
    if kappa_energy[0] >= budget {
        return Err(Error::Wellposedness {
            what: format!(
                "Gcal(y_max) = {budget:.9e} must exceed int_0^T ||kappa||^2 = {:.9e}; enlarge y_max",
                kappa_energy[0]
            ),
        });
    }

    let invert = |v: f64| table.gcal_inverse(v);
    let t: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let mut log_var = Vec::with_capacity(n + 1);
    for k in 0..=n {
        log_var.push(invert(kappa_energy[2 * k])?);
    }

    let mut exposure = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    let mut fp_residual = Vec::with_capacity(n + 1);
    let mut drift_nodes = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let kappa = model.kappa(t[k])?;
        let g = g_checked(table, log_var[k])?;
        let a = &kappa * g;
        let u = model.weights_from_exposure(t[k], &a)?;
        fp_residual.push(0.0);
        drift_nodes.push(a.dot(&kappa));
        exposure.push(a);
        weights.push(u);
    }
    let mut drift_mids = Vec::with_capacity(n);
    for k in 0..n {
        let tm = t[k] + 0.5 * h;
        let a_mid = invert(kappa_energy[2 * k + 1])?;
        let kappa = model.kappa(tm)?;
        let g = g_checked(table, a_mid)?;
        drift_mids.push(kappa.norm_squared() * g);
    }
    let drift_integral = backward_cumulative_simpson(&drift_nodes, &drift_mids, h);
    let log_drift: Vec<f64> = (0..=n)
        .map(|k| drift_integral[k] - 0.5 * log_var[k])
        .collect();

    Ok(EquilibriumSolution {
        problem: ProblemKind::Constrained,
        t,
        log_var,
        log_drift,
        exposure,
        weights,
        regime: vec![Regime::Unconstrained; n + 1],
        fp_residual,
        diagnostics: SolveDiagnostics {
            steps: n,
            ..Default::default()
        },
    })
}

/// Selected branch of the borrowing right-hand side at `(t, y)`.
#[derive(Debug, Clone)]
pub struct BorrowingBranch {
    /// `||sigma^T u||^2` for the selected portfolio.
    pub h_value: f64,
    pub regime: Regime,
    pub weights: DVector<f64>,
    /// True when `1 . u_1 <= 0` or `1 . u_2 <= 0` (threshold quotient of the
    /// ratio form would be ill-defined).
    pub flagged: bool,
}

/// Candidate portfolios `u_i = G(y) (sigma^T)^{-1} kappa_i` and the case
/// analysis: borrow when `1 . u_2 >= 1`, save when `1 . u_1 <= 1`, otherwise
/// pin the total weight at 1 via the Lagrange portfolio. Ties take the first
/// branch; both branches produce the same portfolio there.
pub fn borrowing_rhs(
    table: &GTable,
    model: &MarketModel,
    t: f64,
    y: f64,
) -> Result<BorrowingBranch> {
    let g = g_checked(table, y)?;
    let (k1, k2) = model.kappa12(t)?;
    let u1 = model.weights_from_exposure(t, &(&k1 * g))?;
    let u2 = model.weights_from_exposure(t, &(&k2 * g))?;
    let total1 = u1.sum();
    let total2 = u2.sum();
    let flagged = total1 <= 0.0 || total2 <= 0.0;

    // Branch values coincide at the ties, so a tiny tolerance only keeps the
    // regime label stable when a comparison sits exactly on a boundary.
    const TIE: f64 = 1e-12;
    let (weights, regime) = if total2 >= 1.0 - TIE {
        (u2, Regime::Borrow)
    } else if total1 <= 1.0 + TIE {
        (u1, Regime::Save)
    } else {
        // Lagrange portfolio on {1 . u = 1}:
        // u = (sigma sigma^T)^{-1} [G (mu - c 1) + 1 / (1^T (sigma sigma^T)^{-1} 1)]
        // with c the gram-weighted mean of mu.
        let sigma = model.sigma_at(t);
        let gram = &sigma * sigma.transpose();
        let lu = gram.lu();
        let ones = DVector::from_element(model.dim(), 1.0);
        let mu = model.mu_at(t);
        let g1 = lu.solve(&mu).ok_or(Error::SingularSigma { t })?;
        let g2 = lu.solve(&ones).ok_or(Error::SingularSigma { t })?;
        let denom = ones.dot(&g2);
        if denom.abs() < 1e-14 {
            return Err(Error::SingularSigma { t });
        }
        let c = ones.dot(&g1) / denom;
        let u = (&g1 - &g2 * c) * g + &g2 * (1.0 / denom);
        (u, Regime::Boundary)
    };
    let a = model.sigma_at(t).transpose() * &weights;
    Ok(BorrowingBranch {
        h_value: a.norm_squared(),
        regime,
        weights,
        flagged,
    })
}

/// Drift of the wealth SDE under two rates:
/// `(1 - 1.u)_+ r - (1.u - 1)_+ R + u^T mu`.
pub fn borrowing_drift(model: &MarketModel, t: f64, u: &DVector<f64>) -> f64 {
    let total = u.sum();
    (1.0 - total).max(0.0) * model.saving_rate_at(t)
        - (total - 1.0).max(0.0) * model.borrowing_rate_at(t)
        + u.dot(&model.mu_at(t))
}

/// Solve the borrowing-cost problem on `[0, T]`.
pub fn solve_borrowing(
    table: &GTable,
    model: &MarketModel,
    n_steps: usize,
) -> Result<EquilibriumSolution> {
    if n_steps < 2 {
        return Err(Error::config("n_steps", "need at least 2 steps"));
    }
    model.certify_ellipticity(512)?;

    let horizon = model.horizon();
    let mut rhs = |s: f64, y: f64| -> Result<f64> {
        Ok(borrowing_rhs(table, model, horizon - s, y)?.h_value)
    };
    let (rev_nodes, rev_mids, max_err) = integrate_reversed(&mut rhs, horizon, n_steps)?;

    let n = n_steps;
    let h = horizon / n as f64;
    let t: Vec<f64> = (0..=n).map(|k| k as f64 * h).collect();
    let log_var: Vec<f64> = (0..=n).map(|k| rev_nodes[n - k]).collect();

    let mut exposure = Vec::with_capacity(n + 1);
    let mut weights = Vec::with_capacity(n + 1);
    let mut regime = Vec::with_capacity(n + 1);
    let mut fp_residual = Vec::with_capacity(n + 1);
    let mut drift_nodes = Vec::with_capacity(n + 1);
    let mut flagged = 0usize;
    for k in 0..=n {
        let branch = borrowing_rhs(table, model, t[k], log_var[k])?;
        if branch.flagged {
            flagged += 1;
        }
        let a = model.sigma_at(t[k]).transpose() * &branch.weights;
        // Exposure equals the branch portfolio by construction; see the
        // constrained solver for the fixed-point residual convention.
        fp_residual.push(0.0);
        drift_nodes.push(borrowing_drift(model, t[k], &branch.weights));
        regime.push(branch.regime);
        exposure.push(a);
        weights.push(branch.weights);
    }
    let mut drift_mids = Vec::with_capacity(n);
    for k in 0..n {
        let tm = t[k] + 0.5 * h;
        let branch = borrowing_rhs(table, model, tm, rev_mids[n - 1 - k])?;
        drift_mids.push(borrowing_drift(model, tm, &branch.weights));
    }
    let drift_integral = backward_cumulative_simpson(&drift_nodes, &drift_mids, h);
    let log_drift: Vec<f64> = (0..=n)
        .map(|k| drift_integral[k] - 0.5 * log_var[k])
        .collect();

    let switches = regime.windows(2).filter(|w| w[0] != w[1]).count();
    Ok(EquilibriumSolution {
        problem: ProblemKind::Borrowing,
        t,
        log_var,
        log_drift,
        exposure,
        weights,
        regime,
        fp_residual,
        diagnostics: SolveDiagnostics {
            steps: n,
            max_local_error: max_err,
            regime_switches: switches,
            chattering_warning: switches > n / 4,
            flagged_threshold_nodes: flagged,
        },
    })
}

// ---------------------------------------------------------------------------
// Well-posedness predicates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Proven,
    NotProven,
}

#[derive(Debug, Clone)]
pub struct ConditionValue {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub satisfied: bool,
}

#[derive(Debug, Clone)]
pub struct WellposednessReport {
    pub problem: ProblemKind,
    pub conditions: Vec<ConditionValue>,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

const WELLPOSED_MARGIN: f64 = 1e-9;

/// Evaluate the applicable no-blow-up conditions at the table's `y_max` as a
/// finite proxy for infinity. `Proven` requires an inequality to hold with
/// margin >= 1e-9; `NotProven` is a verdict, not an error.
pub fn check_wellposedness(
    problem: ProblemKind,
    table: &GTable,
    model: &MarketModel,
    set: &ConvexSet,
) -> Result<WellposednessReport> {
    let cert = model.certify_ellipticity(512)?;
    let mut conditions = Vec::new();
    let mut notes = Vec::new();

    match problem {
        ProblemKind::Constrained => {
            let horizon = model.horizon();
            let k2 = |t: f64| -> Result<f64> { Ok(model.kappa(t)?.norm_squared()) };
            let kappa_energy = crate::numeric::adaptive_simpson(&k2, 0.0, horizon, 1e-12)?;

            if set.is_full_space() {
                let gcal_max = table.gcal_at(table.y_max())?;
                conditions.push(ConditionValue {
                    name: "gcal_at_y_max_vs_kappa_energy".into(),
                    value: gcal_max,
                    threshold: kappa_energy,
                    satisfied: gcal_max > kappa_energy + WELLPOSED_MARGIN,
                });
            }

            if model_is_time_constant(model) {
                let p_val = p_integral(table, model, set)?;
                conditions.push(ConditionValue {
                    name: "p_integral_at_y_max_vs_horizon".into(),
                    value: p_val,
                    threshold: horizon,
                    satisfied: p_val > horizon + WELLPOSED_MARGIN,
                });
            }

            let beta = set.witness();
            let q_val = table.q_integral(
                cert.c2,
                cert.c3.max(1e-300),
                beta.norm_squared(),
                table.y_max(),
            )?;
            conditions.push(ConditionValue {
                name: "q_integral_at_y_max_vs_horizon".into(),
                value: q_val,
                threshold: horizon,
                satisfied: q_val > horizon + WELLPOSED_MARGIN,
            });
            notes.push("local Lipschitz continuity of G is assumed (smooth generator)".into());
        }
        ProblemKind::Borrowing => match table.g_sup_bound() {
            Some(bound) => {
                conditions.push(ConditionValue {
                    name: "sup_g_analytic_bound".into(),
                    value: bound,
                    threshold: f64::INFINITY,
                    satisfied: bound.is_finite(),
                });
                notes.push(
                        "G is bounded by the reciprocal relative-risk-aversion floor; the piecewise right-hand side inherits boundedness".into(),
                    );
            }
            None => {
                let sup_on_table = table.g_nodes().iter().cloned().fold(0.0f64, f64::max);
                conditions.push(ConditionValue {
                    name: "sup_g_on_table_only".into(),
                    value: sup_on_table,
                    threshold: f64::INFINITY,
                    satisfied: false,
                });
                notes.push(
                        "custom generator without a declared risk-aversion floor: boundedness of G beyond the table cannot be certified".into(),
                    );
            }
        },
    }

    let verdict = if conditions.iter().any(|c| c.satisfied) {
        Verdict::Proven
    } else {
        Verdict::NotProven
    };
    Ok(WellposednessReport {
        problem,
        conditions,
        verdict,
        notes,
    })
}

fn model_is_time_constant(model: &MarketModel) -> bool {
    let t0_mu = model.mu_at(0.0);
    let t0_sigma = model.sigma_at(0.0);
    (1..=64).all(|k| {
        let t = model.horizon() * k as f64 / 64.0;
        model.mu_at(t) == t0_mu && model.sigma_at(t) == t0_sigma
    })
}

/// `P(x) = int_0^x ||P(kappa G(y))||^{-2} dy` for constant coefficients.
/// A vanishing projection makes the integral diverge, which proves the
/// condition outright; +infinity is returned in that case.
fn p_integral(table: &GTable, model: &MarketModel, set: &ConvexSet) -> Result<f64> {
    let kappa = model.kappa(0.0)?;
    let sigma_t = model.sigma_at(0.0);
    let f = |y: f64| -> Result<f64> {
        let g = table.g_at(y)?;
        let z = set.project_sigma_image(&sigma_t, &(&kappa * g))?;
        let nn = z.norm_squared();
        if nn < 1e-28 {
            return Err(Error::Wellposedness {
                what: "projection vanishes".into(),
            });
        }
        Ok(1.0 / nn)
    };
    match crate::numeric::adaptive_simpson(&f, 0.0, table.y_max(), 1e-12) {
        Ok(v) => Ok(v),
        Err(Error::Wellposedness { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// CSV round trip (the solver's external data interface)
// ---------------------------------------------------------------------------

/// Full-precision decimal formatting: 17 significant digits round-trip f64
/// bit-exactly.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl EquilibriumSolution {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, |u| u.len())
    }

    /// Serialize as CSV with columns
    /// `t, A, B, regime, u_1..u_d, a_1..a_d, fp_residual`.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut head: Vec<String> = vec!["t".into(), "A".into(), "B".into(), "regime".into()];
        head.extend((1..=d).map(|i| format!("u_{i}")));
        head.extend((1..=d).map(|i| format!("a_{i}")));
        head.push("fp_residual".into());
        let mut out = head.join(",");
        out.push('\n');
        for k in 0..self.t.len() {
            let mut row: Vec<String> = vec![
                format_f64(self.t[k]),
                format_f64(self.log_var[k]),
                format_f64(self.log_drift[k]),
                self.regime[k].as_str().into(),
            ];
            row.extend(self.weights[k].iter().map(|&v| format_f64(v)));
            row.extend(self.exposure[k].iter().map(|&v| format_f64(v)));
            row.push(format_f64(self.fp_residual[k]));
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Parse a solution CSV produced by `to_csv`. The problem kind is
    /// recovered from the regime labels.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::config("csv", "empty file"))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 6
            || cols[0] != "t"
            || cols[1] != "A"
            || cols[2] != "B"
            || cols[3] != "regime"
        {
            return Err(Error::config(
                "csv",
                "unexpected header; not a solution file",
            ));
        }
        let d = (cols.len() - 5) / 2;
        if cols.len() != 5 + 2 * d {
            return Err(Error::config("csv", "inconsistent column count"));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::config("csv", format!("bad float '{s}' in {what}")))
        };
        let mut t = Vec::new();
        let mut log_var = Vec::new();
        let mut log_drift = Vec::new();
        let mut weights = Vec::new();
        let mut exposure = Vec::new();
        let mut regime = Vec::new();
        let mut fp_residual = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::config(
                    "csv",
                    format!(
                        "row {} has {} fields, expected {}",
                        ln + 2,
                        fields.len(),
                        cols.len()
                    ),
                ));
            }
            t.push(parse(fields[0], "t")?);
            log_var.push(parse(fields[1], "A")?);
            log_drift.push(parse(fields[2], "B")?);
            regime.push(Regime::parse(fields[3])?);
            let mut u = DVector::zeros(d);
            let mut a = DVector::zeros(d);
            for i in 0..d {
                u[i] = parse(fields[4 + i], "u")?;
                a[i] = parse(fields[4 + d + i], "a")?;
            }
            weights.push(u);
            exposure.push(a);
            fp_residual.push(parse(fields[4 + 2 * d], "fp_residual")?);
        }
        if t.len() < 2 {
            return Err(Error::config("csv", "need at least 2 rows"));
        }
        let problem = if regime
            .iter()
            .any(|r| matches!(r, Regime::Save | Regime::Boundary | Regime::Borrow))
        {
            ProblemKind::Borrowing
        } else {
            ProblemKind::Constrained
        };
        Ok(EquilibriumSolution {
            problem,
            t,
            log_var,
            log_drift,
            exposure,
            weights,
            regime,
            fp_residual,
            diagnostics: SolveDiagnostics::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::TimeDep;
    use crate::preference::{BetweennessPreference, DiscreteMeasure};
    use crate::quad::QuadratureRule;
    use crate::table::build_g_table;
    use nalgebra::DMatrix;

    fn quad() -> QuadratureRule {
        QuadratureRule::gauss_hermite(96).unwrap()
    }

    fn weighted_table() -> GTable {
        let pref = BetweennessPreference::weighted_utility(0.25, -0.5).unwrap();
        build_g_table(&pref, 2.0, 64, &quad()).unwrap()
    }

    fn dirac_table(gamma: f64, y_max: f64) -> GTable {
        let pref = BetweennessPreference::mixed_crra(DiscreteMeasure::dirac(gamma).unwrap());
        build_g_table(&pref, y_max, 48, &quad()).unwrap()
    }

    fn scalar_market(mu: f64, sigma: f64, r: f64, big_r: f64, horizon: f64) -> MarketModel {
        MarketModel::new(
            horizon,
            1,
            TimeDep::Constant(DVector::from_vec(vec![mu])),
            TimeDep::Constant(DMatrix::from_vec(1, 1, vec![sigma])),
            TimeDep::Constant(r),
            TimeDep::Constant(big_r),
        )
        .unwrap()
    }

    #[test]
    fn constrained_full_space_constant_g_closed_form() {
        // G = 0.8, kappa = 0.4: A(0) = G^2 kappa^2 T = 0.1024, u = 1.6.
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let sol = solve_constrained(&table, &model, &ConvexSet::full_space(1), 512).unwrap();
        assert_eq!(*sol.log_var.last().unwrap(), 0.0);
        assert!(
            (sol.log_var[0] - 0.1024).abs() < 1e-10,
            "A(0) = {}",
            sol.log_var[0]
        );
        for (u, r) in sol.weights.iter().zip(&sol.regime) {
            assert!((u[0] - 1.6).abs() < 1e-9);
            assert_eq!(*r, Regime::Unconstrained);
        }
        // A is non-increasing in forward time.
        assert!(sol.log_var.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn constrained_no_borrowing_halfspace() {
        // kappa G = 0.32 projected onto (-inf, 0.2] gives a = 0.2, u = 1.
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let set = ConvexSet::halfspace(DVector::from_vec(vec![1.0]), 1.0).unwrap();
        let sol = solve_constrained(&table, &model, &set, 512).unwrap();
        assert!(
            (sol.log_var[0] - 0.04).abs() < 1e-12,
            "A(0) = {}",
            sol.log_var[0]
        );
        for (u, r) in sol.weights.iter().zip(&sol.regime) {
            assert!((u[0] - 1.0).abs() < 1e-10);
            assert_eq!(*r, Regime::Constrained);
        }
    }

    #[test]
    fn constrained_zero_kappa_gives_zero_solution() {
        let table = weighted_table();
        let model = scalar_market(0.0, 0.2, 0.0, 0.0, 1.0);
        let sol = solve_constrained(&table, &model, &ConvexSet::full_space(1), 256).unwrap();
        for (a, u) in sol.log_var.iter().zip(&sol.weights) {
            assert_eq!(*a, 0.0);
            assert_eq!(u[0], 0.0);
        }
    }

    #[test]
    fn constrained_rejects_nonzero_saving_rate() {
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.01, 0.01, 1.0);
        let err = solve_constrained(&table, &model, &ConvexSet::full_space(1), 128);
        assert!(matches!(err, Err(Error::Config { .. })));
    }

    #[test]
    fn unconstrained_closed_form_values() {
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let sol = solve_unconstrained_closed_form(&table, &model, 512).unwrap();
        assert!(
            (sol.log_var[0] - 0.1024).abs() < 1e-9,
            "A(0) = {}",
            sol.log_var[0]
        );
        assert_eq!(*sol.log_var.last().unwrap(), 0.0);

        // Dirac gamma = 0.5 (G = 2), kappa = 0.3, T = 2: A(0) = 0.72.
        let table2 = dirac_table(0.5, 1.0);
        let model2 = scalar_market(0.06, 0.2, 0.0, 0.0, 2.0);
        let sol2 = solve_unconstrained_closed_form(&table2, &model2, 512).unwrap();
        assert!(
            (sol2.log_var[0] - 0.72).abs() < 1e-9,
            "A(0) = {}",
            sol2.log_var[0]
        );
    }

    #[test]
    fn unconstrained_rejects_insufficient_table() {
        // kappa energy = 0.16*4 = 0.64 but Gcal(y_max) with y_max = 0.1 is
        // 0.15625: not well posed on this table.
        let pref = BetweennessPreference::weighted_utility(0.25, -0.5).unwrap();
        let table = build_g_table(&pref, 0.1, 16, &quad()).unwrap();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 4.0);
        assert!(matches!(
            solve_unconstrained_closed_form(&table, &model, 128),
            Err(Error::Wellposedness { .. })
        ));
    }

    #[test]
    fn borrowing_branch_cases() {
        // G = 2: u2 = 1.0 -> borrow tie, H = ||sigma u2||^2 = 0.04.
        let table = dirac_table(0.5, 1.0);
        let model = scalar_market(0.07, 0.2, 0.02, 0.05, 1.0);
        let b = borrowing_rhs(&table, &model, 0.3, 0.2).unwrap();
        assert_eq!(b.regime, Regime::Borrow);
        assert!((b.weights[0] - 1.0).abs() < 1e-9, "u = {}", b.weights[0]);
        assert!((b.h_value - 0.04).abs() < 1e-10, "H = {}", b.h_value);

        // mu = 0.03: kappa1 = 0.05, u1 = 0.5 <= 1 -> save, H = 0.01.
        let model2 = scalar_market(0.03, 0.2, 0.02, 0.05, 1.0);
        let b2 = borrowing_rhs(&table, &model2, 0.3, 0.2).unwrap();
        assert_eq!(b2.regime, Regime::Save);
        assert!((b2.h_value - 0.01).abs() < 1e-12, "H = {}", b2.h_value);

        // Zero excess return on both rates -> save with H = 0.
        let model3 = scalar_market(0.02, 0.2, 0.02, 0.02, 1.0);
        let b3 = borrowing_rhs(&table, &model3, 0.3, 0.2).unwrap();
        assert_eq!(b3.regime, Regime::Save);
        assert!(b3.h_value.abs() < 1e-30);
    }

    #[test]
    fn borrowing_branch_continuous_when_rates_equal() {
        let table = dirac_table(0.5, 1.0);
        let model = scalar_market(0.07, 0.2, 0.02, 0.02, 1.0);
        let b = borrowing_rhs(&table, &model, 0.5, 0.1).unwrap();
        // kappa1 = kappa2 = 0.25, u = 2.5 either way.
        assert!((b.weights[0] - 2.5).abs() < 1e-9);
        assert!((b.h_value - 0.25).abs() < 1e-9);
    }

    #[test]
    fn borrowing_two_rate_classic_merton() {
        // Dirac gamma = 0.5 with sigma=0.2, mu=0.07, r=0.02, R=0.05:
        // u = 1 throughout, A(0) = 0.04.
        let table = dirac_table(0.5, 1.0);
        let model = scalar_market(0.07, 0.2, 0.02, 0.05, 1.0);
        let sol = solve_borrowing(&table, &model, 512).unwrap();
        assert!(
            (sol.log_var[0] - 0.04).abs() < 1e-10,
            "A(0) = {}",
            sol.log_var[0]
        );
        for u in &sol.weights {
            assert!((u[0] - 1.0).abs() < 1e-7, "u = {}", u[0]);
        }
        assert_eq!(sol.diagnostics.regime_switches, 0);
    }

    #[test]
    fn borrowing_all_borrow_for_large_excess_return() {
        // kappa2 = 1.25 so A(0) = G^2 kappa2^2 = 6.25: size the table for it.
        let table = dirac_table(0.5, 7.0);
        let model = scalar_market(0.30, 0.2, 0.02, 0.05, 1.0);
        let sol = solve_borrowing(&table, &model, 512).unwrap();
        assert!(sol.regime.iter().all(|r| *r == Regime::Borrow));
        // A(0) = G^2 ||kappa2||^2 T with kappa2 = 1.25.
        let want = 4.0 * 1.25f64.powi(2);
        assert!(
            (sol.log_var[0] - want).abs() < 1e-8,
            "A(0) = {}",
            sol.log_var[0]
        );
    }

    #[test]
    fn borrowing_equal_rates_matches_shifted_single_rate() {
        let table = dirac_table(0.5, 1.0);
        let model = scalar_market(0.07, 0.2, 0.02, 0.02, 1.0);
        let sol = solve_borrowing(&table, &model, 512).unwrap();
        // Comparator: zero-rate model with drift shifted to mu - r.
        let shifted = scalar_market(0.05, 0.2, 0.0, 0.0, 1.0);
        let oracle = solve_unconstrained_closed_form(&table, &shifted, 512).unwrap();
        for k in 0..sol.t.len() {
            assert!((sol.log_var[k] - oracle.log_var[k]).abs() < 1e-8);
            assert!((sol.weights[k][0] - oracle.weights[k][0]).abs() < 1e-8);
            // B differs by the deterministic rate integral int_t^T r.
            let rate_integral = 0.02 * (1.0 - sol.t[k]);
            assert!((sol.log_drift[k] - oracle.log_drift[k] - rate_integral).abs() < 1e-8);
        }
    }

    #[test]
    fn step_doubling_converges_at_rk4_order() {
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let set = ConvexSet::halfspace(DVector::from_vec(vec![1.0]), 1.0).unwrap();
        let a = solve_constrained(&table, &model, &set, 2048)
            .unwrap()
            .log_var[0];
        let b = solve_constrained(&table, &model, &set, 4096)
            .unwrap()
            .log_var[0];
        assert!((a - b).abs() < 1e-9, "difference {}", (a - b).abs());
    }

    #[test]
    fn wellposedness_constrained_full_space() {
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let rep = check_wellposedness(
            ProblemKind::Constrained,
            &table,
            &model,
            &ConvexSet::full_space(1),
        )
        .unwrap();
        assert_eq!(rep.verdict, Verdict::Proven);
        let gcal = rep
            .conditions
            .iter()
            .find(|c| c.name.starts_with("gcal"))
            .unwrap();
        assert!((gcal.value - 3.125).abs() < 1e-9);
        assert!((gcal.threshold - 0.16).abs() < 1e-12);
    }

    #[test]
    fn wellposedness_borrowing_mixed() {
        let m = DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap();
        let pref = BetweennessPreference::mixed_crra(m);
        let table = build_g_table(&pref, 1.0, 32, &quad()).unwrap();
        let model = scalar_market(0.07, 0.2, 0.02, 0.05, 1.0);
        let rep = check_wellposedness(
            ProblemKind::Borrowing,
            &table,
            &model,
            &ConvexSet::full_space(1),
        )
        .unwrap();
        assert_eq!(rep.verdict, Verdict::Proven);
        assert!((rep.conditions[0].value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn wellposedness_trivial_for_zero_kappa() {
        let table = weighted_table();
        let model = scalar_market(0.0, 0.2, 0.0, 0.0, 1.0);
        let rep = check_wellposedness(
            ProblemKind::Constrained,
            &table,
            &model,
            &ConvexSet::full_space(1),
        )
        .unwrap();
        assert_eq!(rep.verdict, Verdict::Proven);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let table = weighted_table();
        let model = scalar_market(0.08, 0.2, 0.0, 0.0, 1.0);
        let set = ConvexSet::halfspace(DVector::from_vec(vec![1.0]), 1.0).unwrap();
        let sol = solve_constrained(&table, &model, &set, 64).unwrap();
        let text = sol.to_csv();
        let back = EquilibriumSolution::from_csv(&text).unwrap();
        assert_eq!(back.problem, ProblemKind::Constrained);
        for k in 0..sol.t.len() {
            assert_eq!(sol.t[k].to_bits(), back.t[k].to_bits());
            assert_eq!(sol.log_var[k].to_bits(), back.log_var[k].to_bits());
            assert_eq!(sol.log_drift[k].to_bits(), back.log_drift[k].to_bits());
            assert_eq!(sol.weights[k][0].to_bits(), back.weights[k][0].to_bits());
            assert_eq!(sol.exposure[k][0].to_bits(), back.exposure[k][0].to_bits());
            assert_eq!(sol.regime[k], back.regime[k]);
        }
    }

    #[test]
    fn table_range_error_reports_reached_value() {
        // Tiny table so the ODE state escapes immediately.
        let pref = BetweennessPreference::weighted_utility(0.25, -0.5).unwrap();
        let table = build_g_table(&pref, 0.01, 16, &quad()).unwrap();
        let model = scalar_market(0.30, 0.2, 0.0, 0.0, 4.0);
        match solve_constrained(&table, &model, &ConvexSet::full_space(1), 128) {
            Err(Error::TableRange { reached, y_max }) => {
                assert!(reached > y_max);
            }
            other => panic!("expected TableRange, got {other:?}"),
        }
    }
}
