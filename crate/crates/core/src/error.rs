//! Error type shared across the library.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A function evaluation produced a non-finite value.
    #[error("numerical domain violation: {what}")]
    NumericalDomain { what: String },

    /// Root bracketing or iteration failed; usually means the preference
    /// violates its stated monotonicity/curvature assumptions numerically.
    #[error("root bracketing failed: {what}")]
    RootBracket { what: String },

    /// The curvature expectation in the risk-tolerance ratio is ~0.
    #[error("degenerate curvature: |denominator| = {denom:.3e} at y = {y:.6e}")]
    DegenerateCurvature { y: f64, denom: f64 },

    /// Query outside a tabulated or interpolated range.
    #[error("extrapolation refused: {x:.9e} outside [{lo:.9e}, {hi:.9e}]")]
    Extrapolation { x: f64, lo: f64, hi: f64 },

    /// sigma(t) is numerically singular.
    #[error("sigma(t) singular at t = {t:.9e}")]
    SingularSigma { t: f64 },

    /// Ellipticity certificate failed: smallest eigenvalue of sigma sigma^T.
    #[error("degenerate market: c1 = {c1:.3e} <= 1e-12")]
    DegenerateMarket { c1: f64 },

    /// Iterative projection did not converge.
    #[error("projection did not converge: gap = {gap:.3e} after {iters} iterations")]
    ProjectionConvergence { gap: f64, iters: usize },

    /// The ODE state left the tabulated range; rebuild the table larger.
    #[error("ODE state A = {reached:.9e} left the table range [0, {y_max:.9e}]; rebuild the G-table with a larger y_max")]
    TableRange { reached: f64, y_max: f64 },

    /// Per-step Richardson error estimate exceeded the budget.
    #[error(
        "local error estimate {estimate:.3e} exceeds {limit:.3e} at t = {t:.6e}; increase n_steps"
    )]
    StepControl { t: f64, estimate: f64, limit: f64 },

    /// A well-posedness precondition was not established.
    #[error("well-posedness not established: {what}")]
    Wellposedness { what: String },

    /// Two routes that must agree disagreed.
    #[error("internal inconsistency: {what}")]
    InternalInconsistency { what: String },

    /// Invalid input to a constructor or operation.
    #[error("config error: {key}: {reason}")]
    Config { key: String, reason: String },
}

impl Error {
    pub(crate) fn internal(what: impl Into<String>) -> Self {
        Error::InternalInconsistency { what: what.into() }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    /// Stable machine-readable tag for CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NumericalDomain { .. } => "numerical_domain",
            Error::RootBracket { .. } => "root_bracket",
            Error::DegenerateCurvature { .. } => "degenerate_curvature",
            Error::Extrapolation { .. } => "extrapolation",
            Error::SingularSigma { .. } => "singular_sigma",
            Error::DegenerateMarket { .. } => "degenerate_market",
            Error::ProjectionConvergence { .. } => "projection_convergence",
            Error::TableRange { .. } => "table_range",
            Error::StepControl { .. } => "step_control",
            Error::Wellposedness { .. } => "wellposedness",
            Error::InternalInconsistency { .. } => "internal_inconsistency",
            Error::Config { .. } => "config",
        }
    }
}
