//! Equilibrium portfolio strategies for CRRA betweenness preferences.
//!
//! The objective `J(t, x; u)` of a strategy is defined implicitly by
//! `E[F(X(T) / J) | X(t) = x] = 0` for a concave increasing generator `F`
//! with `F(1) = 0`. Such objectives are time-inconsistent; this crate
//! computes the closed-loop equilibrium strategies under
//!
//! * closed convex constraints on portfolio weights (zero interest rate), and
//! * a borrowing rate exceeding the saving rate (unconstrained weights),
//!
//! by integrating first-order ODEs for the accumulated variance `A(t)`
//! backward from `A(T) = 0`, and then verifies candidates independently via
//! generator residuals and Monte Carlo perturbation tests.

pub mod constraint;
pub mod equilibrium;
pub mod error;
pub mod market;
pub mod numeric;
pub mod preference;
pub mod quad;
pub mod rng;
pub mod table;
pub mod verify;

pub use constraint::ConvexSet;
pub use equilibrium::{
    borrowing_drift, borrowing_rhs, check_wellposedness, format_f64, solve_borrowing,
    solve_constrained, solve_unconstrained_closed_form, BorrowingBranch, ConditionValue,
    EquilibriumSolution, ProblemKind, Regime, SolveDiagnostics, Verdict, WellposednessReport,
};
pub use error::{Error, Result};
pub use market::{EllipticityCertificate, MarketModel, TimeDep};
pub use preference::{
    compute_g, compute_g_mixed_closed, compute_h, expected_f, BetweennessPreference,
    DiscreteMeasure,
};
pub use quad::QuadratureRule;
pub use table::{build_g_table, GTable};
pub use verify::sim::{implicit_j_mc, simulate_terminal_wealth, Scheme, SimConfig};
pub use verify::{
    Candidate, FDerivatives, HjbPoint, HjbReport, PerturbationReport, SlopeEstimate, SlopeVerdict,
    Verifier, HJB_TOLERANCE,
};
