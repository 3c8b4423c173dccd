//! CRRA betweenness preference generators.
//!
//! A preference is described by a generator `F` with `F(1) = 0`, `F' > 0`,
//! `F'' < 0` and polynomial growth. The certainty equivalent of a lognormal
//! `exp(sqrt(y) xi)` is the implicit root `H(y)` of
//!
//! ```text
//! E[F(exp(sqrt(y) xi) / H(y))] = 0,        xi ~ N(0,1),
//! ```
//!
//! and the risk tolerance is
//!
//! ```text
//! G(y) = H(y) E[e^{sqrt(y) xi} F'(e^{sqrt(y) xi}/H(y))]
//!        / (-E[e^{2 sqrt(y) xi} F''(e^{sqrt(y) xi}/H(y))]).
//! ```

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quad::QuadratureRule;

/// Finite discrete mixing measure over CRRA exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<(f64, f64)>,
}

impl DiscreteMeasure {
    /// `atoms` are `(gamma_i, weight_i)` with strictly increasing exponents
    /// below 1, positive weights summing to 1 (within 1e-10).
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::config("atoms", "at least one atom required"));
        }
        let mut total = 0.0;
        for (i, &(g, w)) in atoms.iter().enumerate() {
            if !g.is_finite() || g >= 1.0 {
                return Err(Error::config(
                    "atoms",
                    format!("gamma[{i}] = {g} must be finite and < 1"),
                ));
            }
            if !(w > 0.0) {
                return Err(Error::config(
                    "atoms",
                    format!("weight[{i}] = {w} must be > 0"),
                ));
            }
            if i > 0 && atoms[i - 1].0 >= g {
                return Err(Error::config("atoms", "gammas must be strictly increasing"));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::config(
                "atoms",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(Self { atoms })
    }

    pub fn dirac(gamma: f64) -> Result<Self> {
        Self::new(vec![(gamma, 1.0)])
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn gamma_min(&self) -> f64 {
        self.atoms[0].0
    }

    pub fn gamma_max(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].0
    }

    /// CRRA utility `U_gamma` evaluated at `x > 0`.
    fn u(gamma: f64, x: f64) -> f64 {
        if gamma == 0.0 {
            x.ln()
        } else {
            (x.powf(gamma) - 1.0) / gamma
        }
    }
}

type Evaluator = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Betweenness generator family.
#[derive(Clone)]
pub enum BetweennessPreference {
    /// `F(x) = x^{1-rho+gamma} - x^{gamma}` with `-1 < gamma <= 0`,
    /// `gamma <= rho < gamma + 1`.
    WeightedUtility { rho: f64, gamma: f64 },
    /// `F(x) = sum_i w_i U_{gamma_i}(x)`.
    MixedCrra(DiscreteMeasure),
    /// Caller-supplied `F`, `F'`, `F''` plus a declared polynomial-growth
    /// exponent used to size the quadrature safety check.
    Custom {
        f: Evaluator,
        df: Evaluator,
        d2f: Evaluator,
        growth: f64,
    },
}

impl fmt::Debug for BetweennessPreference {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::WeightedUtility { rho, gamma } => {
                write!(fm, "WeightedUtility {{ rho: {rho}, gamma: {gamma} }}")
            }
            Self::MixedCrra(m) => write!(fm, "MixedCrra({:?})", m.atoms()),
            Self::Custom { growth, .. } => write!(fm, "Custom {{ growth: {growth} }}"),
        }
    }
}

impl BetweennessPreference {
    pub fn weighted_utility(rho: f64, gamma: f64) -> Result<Self> {
        if !(-1.0 < gamma && gamma <= 0.0) {
            return Err(Error::config(
                "preference.gamma",
                format!("gamma = {gamma} violates -1 < gamma <= 0"),
            ));
        }
        if !(gamma <= rho && rho < gamma + 1.0) {
            return Err(Error::config(
                "preference.rho",
                format!("rho = {rho} violates gamma <= rho < gamma + 1"),
            ));
        }
        Ok(Self::WeightedUtility { rho, gamma })
    }

    pub fn mixed_crra(measure: DiscreteMeasure) -> Self {
        Self::MixedCrra(measure)
    }

    /// A custom generator is spot-checked numerically at construction:
    /// `F(1) = 0` within 1e-12 and `F' > 0 > F''` on a log grid over
    /// `[1e-3, 1e3]`. Global validity cannot be verified and stays the
    /// caller's responsibility.
    pub fn custom(f: Evaluator, df: Evaluator, d2f: Evaluator, growth: f64) -> Result<Self> {
        let pref = Self::Custom { f, df, d2f, growth };
        pref.validate_shape()?;
        Ok(pref)
    }

    pub fn f(&self, x: f64) -> f64 {
        match self {
            Self::WeightedUtility { rho, gamma } => x.powf(1.0 - rho + gamma) - x.powf(*gamma),
            Self::MixedCrra(m) => m
                .atoms
                .iter()
                .map(|&(g, w)| w * DiscreteMeasure::u(g, x))
                .sum(),
            Self::Custom { f, .. } => f(x),
        }
    }

    pub fn df(&self, x: f64) -> f64 {
        match self {
            Self::WeightedUtility { rho, gamma } => {
                let a = 1.0 - rho + gamma;
                a * x.powf(a - 1.0) - gamma * x.powf(gamma - 1.0)
            }
            Self::MixedCrra(m) => m.atoms.iter().map(|&(g, w)| w * x.powf(g - 1.0)).sum(),
            Self::Custom { df, .. } => df(x),
        }
    }

    pub fn d2f(&self, x: f64) -> f64 {
        match self {
            Self::WeightedUtility { rho, gamma } => {
                let a = 1.0 - rho + gamma;
                a * (a - 1.0) * x.powf(a - 2.0) - gamma * (gamma - 1.0) * x.powf(gamma - 2.0)
            }
            Self::MixedCrra(m) => m
                .atoms
                .iter()
                .map(|&(g, w)| w * (g - 1.0) * x.powf(g - 2.0))
                .sum(),
            Self::Custom { d2f, .. } => d2f(x),
        }
    }

    /// Largest absolute power of `x` appearing in `F`; bounds the lognormal
    /// moments the quadrature must resolve.
    pub fn growth_exponent(&self) -> f64 {
        match self {
            Self::WeightedUtility { rho, gamma } => (1.0 - rho + gamma).abs().max(gamma.abs()),
            Self::MixedCrra(m) => m.gamma_min().abs().max(m.gamma_max().abs()),
            Self::Custom { growth, .. } => *growth,
        }
    }

    /// Lower bound on the index of relative risk aversion `-x F''/F'`, when
    /// one is known analytically. `G <= 1 / bound` then holds everywhere.
    pub fn rra_lower_bound(&self) -> Option<f64> {
        match self {
            // RRA is a weighted mediant of rho - gamma and 1 - gamma.
            Self::WeightedUtility { rho, gamma } => Some((rho - gamma).min(1.0 - gamma)),
            Self::MixedCrra(m) => Some(1.0 - m.gamma_max()),
            Self::Custom { .. } => None,
        }
    }

    /// Spot-check the shape assumptions on `[1e-3, 1e3]`.
    pub fn validate_shape(&self) -> Result<()> {
        if self.f(1.0).abs() > 1e-12 {
            return Err(Error::NumericalDomain {
                what: format!("F(1) = {:.3e} != 0", self.f(1.0)),
            });
        }
        let n = 61;
        for k in 0..n {
            let x = 10f64.powf(-3.0 + 6.0 * k as f64 / (n - 1) as f64);
            let d = self.df(x);
            let dd = self.d2f(x);
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NumericalDomain {
                    what: format!("F'({x:.3e}) = {d:.3e} not > 0"),
                });
            }
            if !(dd < 0.0) || !dd.is_finite() {
                return Err(Error::NumericalDomain {
                    what: format!("F''({x:.3e}) = {dd:.3e} not < 0"),
                });
            }
        }
        Ok(())
    }
}

/// Quadrature approximation of `E[F(exp(sqrt(y) xi) / z)]`; strictly
/// decreasing in `z`.
pub fn expected_f(
    pref: &BetweennessPreference,
    y: f64,
    z: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::config("y", format!("y = {y} must be >= 0")));
    }
    if !(z > 0.0) {
        return Err(Error::config("z", format!("z = {z} must be > 0")));
    }
    let s = y.sqrt();
    quad.expect(|xi| pref.f((s * xi).exp() / z))
}

/// Implicit certainty-equivalent factor `H(y)`: the unique `z` with
/// `expected_f(pref, y, z) = 0`, found by bracketing plus Brent iteration to
/// an absolute residual of 1e-10. `H(0)` is returned as exactly 1.
pub fn compute_h(pref: &BetweennessPreference, y: f64, quad: &QuadratureRule) -> Result<f64> {
    if !(y >= 0.0) {
        return Err(Error::config("y", format!("y = {y} must be >= 0")));
    }
    if y == 0.0 {
        return Ok(1.0);
    }
    let s = y.sqrt();
    let h = |z: f64| -> Result<f64> { quad.expect(|xi| pref.f((s * xi).exp() / z)) };

    // Bracket around the support of exp(sqrt(y) xi); h is decreasing in z so
    // we need h(lo) > 0 > h(hi). Expand geometrically on failure.
    let mut lo = (-6.0 * s).exp().min(0.5);
    let mut hi = (6.0 * s).exp().max(2.0);
    let mut f_lo = h(lo)?;
    let mut f_hi = h(hi)?;
    let mut doublings = 0usize;
    while f_lo <= 0.0 || f_hi >= 0.0 {
        if doublings >= 60 {
            return Err(Error::RootBracket {
                what: format!(
                    "no sign change for H at y = {y:.6e} after 60 expansions (h({lo:.3e}) = {f_lo:.3e}, h({hi:.3e}) = {f_hi:.3e}); F may violate the shape assumptions"
                ),
            });
        }
        if f_lo <= 0.0 {
            lo *= 0.5;
            f_lo = h(lo)?;
        }
        if f_hi >= 0.0 {
            hi *= 2.0;
            f_hi = h(hi)?;
        }
        doublings += 1;
    }
    let root = crate::numeric::brent_root(
        |z| h(z).unwrap_or(f64::NAN),
        lo,
        hi,
        f64::EPSILON,
        1e-10,
        200,
    )?;
    let residual = h(root)?;
    if residual.abs() > 1e-10 {
        return Err(Error::RootBracket {
            what: format!("H residual {residual:.3e} > 1e-10 at y = {y:.6e}"),
        });
    }
    Ok(root)
}

/// Risk-tolerance function `G(y)`; requires `compute_h` to succeed at `y`.
pub fn compute_g(pref: &BetweennessPreference, y: f64, quad: &QuadratureRule) -> Result<f64> {
    let h = compute_h(pref, y, quad)?;
    compute_g_with_h(pref, y, h, quad)
}

pub(crate) fn compute_g_with_h(
    pref: &BetweennessPreference,
    y: f64,
    h: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    let s = y.sqrt();
    let numer = quad.expect(|xi| {
        let e = (s * xi).exp();
        e * pref.df(e / h)
    })?;
    let denom = -quad.expect(|xi| {
        let e = (s * xi).exp();
        e * e * pref.d2f(e / h)
    })?;
    if denom.abs() < 1e-14 {
        return Err(Error::DegenerateCurvature { y, denom });
    }
    let g = h * numer / denom;
    if !(g > 0.0) {
        return Err(Error::NumericalDomain {
            what: format!("G({y:.6e}) = {g:.3e} not > 0"),
        });
    }
    Ok(g)
}

/// Closed-form mixed-CRRA risk tolerance:
///
/// ```text
/// G(y) = sum_i w_i H^{1-g_i} e^{g_i^2 y / 2}
///        / sum_i w_i (1 - g_i) H^{1-g_i} e^{g_i^2 y / 2}
/// ```
///
/// evaluated with a common exponent shift so that large `y` cannot overflow;
/// must agree with `compute_g` within 1e-8.
pub fn compute_g_mixed_closed(measure: &DiscreteMeasure, y: f64, h_y: f64) -> Result<f64> {
    if !(h_y > 0.0) {
        return Err(Error::config("h_y", format!("H = {h_y} must be > 0")));
    }
    let ln_h = h_y.ln();
    let exps: Vec<f64> = measure
        .atoms
        .iter()
        .map(|&(g, _)| (1.0 - g) * ln_h + g * g * y / 2.0)
        .collect();
    let shift = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(Error::NumericalDomain {
            what: "mixed-CRRA exponent overflow".into(),
        });
    }
    let mut numer = 0.0;
    let mut denom = 0.0;
    for (&(g, w), &e) in measure.atoms.iter().zip(&exps) {
        let shifted = e - shift;
        if shifted < -745.0 {
            // Underflows to zero after the shift; the term is negligible but
            // an exact zero keeps the ratio well defined.
            continue;
        }
        let term = w * shifted.exp();
        numer += term;
        denom += (1.0 - g) * term;
    }
    if !(numer.is_finite() && denom.is_finite() && denom > 0.0) {
        return Err(Error::NumericalDomain {
            what: format!("mixed-CRRA closed form degenerate at y = {y:.6e}"),
        });
    }
    Ok(numer / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> QuadratureRule {
        QuadratureRule::gauss_hermite(96).unwrap()
    }

    fn weighted() -> BetweennessPreference {
        BetweennessPreference::weighted_utility(0.25, -0.5).unwrap()
    }

    #[test]
    fn weighted_utility_parameter_bounds() {
        assert!(BetweennessPreference::weighted_utility(0.25, 0.5).is_err());
        assert!(BetweennessPreference::weighted_utility(0.25, -1.0).is_err());
        assert!(BetweennessPreference::weighted_utility(-0.6, -0.5).is_err());
        // rho must stay strictly below gamma + 1.
        assert!(BetweennessPreference::weighted_utility(0.5, -0.5).is_err());
        assert!(BetweennessPreference::weighted_utility(0.3, -0.5).is_ok());
    }

    #[test]
    fn shape_assumptions_hold_for_builtins() {
        weighted().validate_shape().unwrap();
        let m = DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap();
        BetweennessPreference::mixed_crra(m)
            .validate_shape()
            .unwrap();
    }

    #[test]
    fn expected_f_at_unit_argument_is_zero() {
        // F(1) = 0, so y = 0, z = 1 integrates the zero function.
        let got = expected_f(&weighted(), 0.0, 1.0, &quad()).unwrap();
        assert!(got.abs() < 1e-14, "got {got}");
    }

    #[test]
    fn expected_f_log_utility_zero_mean() {
        // log utility: E[log e^{2 xi}] = 2 E[xi] = 0.
        let pref = BetweennessPreference::mixed_crra(DiscreteMeasure::dirac(0.0).unwrap());
        let got = expected_f(&pref, 4.0, 1.0, &quad()).unwrap();
        assert!(got.abs() < 1e-12, "got {got}");
    }

    #[test]
    fn expected_f_vanishes_at_weighted_closed_form_h() {
        // H(y) = exp((1 - rho + 2 gamma) y / 2) for the weighted family.
        let z = (-0.125f64).exp(); // y = 1, rho = 0.25, gamma = -0.5
        let got = expected_f(&weighted(), 1.0, z, &quad()).unwrap();
        assert!(got.abs() < 1e-8, "got {got}");
    }

    #[test]
    fn expected_f_strictly_decreasing_in_z() {
        let q = quad();
        for pref in [
            weighted(),
            BetweennessPreference::mixed_crra(
                DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap(),
            ),
        ] {
            for y in [0.0, 0.3, 2.0] {
                let mut prev = f64::INFINITY;
                for k in 0..9 {
                    let z = 0.25 * 2f64.powf(k as f64 * 0.5);
                    let v = expected_f(&pref, y, z, &q).unwrap();
                    assert!(v < prev, "not decreasing at y={y}, z={z}");
                    prev = v;
                }
            }
        }
    }

    #[test]
    fn h_at_zero_is_exactly_one() {
        assert_eq!(compute_h(&weighted(), 0.0, &quad()).unwrap(), 1.0);
    }

    #[test]
    fn h_log_utility_is_one_everywhere() {
        let pref = BetweennessPreference::mixed_crra(DiscreteMeasure::dirac(0.0).unwrap());
        let h = compute_h(&pref, 2.0, &quad()).unwrap();
        assert!((h - 1.0).abs() < 1e-10, "h = {h}");
    }

    #[test]
    fn h_matches_weighted_closed_form() {
        let q = quad();
        for y in [0.1, 0.5, 1.0, 2.0, 5.0] {
            let h = compute_h(&weighted(), y, &q).unwrap();
            let want = (-0.125 * y).exp();
            assert!((h - want).abs() < 1e-8, "y={y}: h={h}, want={want}");
        }
        let h2 = compute_h(&weighted(), 2.0, &q).unwrap();
        assert!((h2 - (-0.25f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn h_residual_pluggable_back() {
        let q = quad();
        let m = DiscreteMeasure::new(vec![(-2.0, 0.25), (-0.5, 0.5), (0.7, 0.25)]).unwrap();
        let pref = BetweennessPreference::mixed_crra(m);
        for k in 0..12 {
            let y = 0.35 * k as f64;
            let h = compute_h(&pref, y, &q).unwrap();
            let res = expected_f(&pref, y, h, &q).unwrap();
            assert!(res.abs() <= 1e-10, "y={y}: residual {res}");
        }
    }

    #[test]
    fn g_matches_weighted_closed_form() {
        let q = quad();
        for y in [0.0, 1.0, 3.0, 5.0] {
            let g = compute_g(&weighted(), y, &q).unwrap();
            assert!((g - 0.8).abs() < 1e-8, "y={y}: g={g}");
        }
    }

    #[test]
    fn g_dirac_half_is_two() {
        let pref = BetweennessPreference::mixed_crra(DiscreteMeasure::dirac(0.5).unwrap());
        let g = compute_g(&pref, 1.0, &quad()).unwrap();
        assert!((g - 2.0).abs() < 1e-8, "g = {g}");
    }

    #[test]
    fn g_mixed_within_example_bounds_at_zero() {
        let m = DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap();
        let pref = BetweennessPreference::mixed_crra(m);
        let g = compute_g(&pref, 0.0, &quad()).unwrap();
        assert!((0.5..=2.0).contains(&g), "g = {g}");
        // At y = 0, H = 1 and the closed form is 1 / (0.5*2 + 0.5*0.5) = 0.8.
        assert!((g - 0.8).abs() < 1e-10, "g = {g}");
    }

    #[test]
    fn g_mixed_closed_form_dirac_reduction() {
        for gamma in [-1.0, -0.3, 0.5] {
            let m = DiscreteMeasure::dirac(gamma).unwrap();
            let g = compute_g_mixed_closed(&m, 1.7, 0.9).unwrap();
            assert!(
                (g - 1.0 / (1.0 - gamma)).abs() < 1e-14,
                "gamma={gamma}: g={g}"
            );
        }
    }

    #[test]
    fn g_mixed_closed_form_unit_at_log_utility() {
        let m = DiscreteMeasure::dirac(0.0).unwrap();
        assert_eq!(compute_g_mixed_closed(&m, 0.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn g_mixed_closed_form_agrees_with_quadrature() {
        let q = quad();
        let m = DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap();
        let pref = BetweennessPreference::mixed_crra(m.clone());
        for y in [0.0, 0.4, 1.0, 2.5] {
            let h = compute_h(&pref, y, &q).unwrap();
            let via_quad = compute_g(&pref, y, &q).unwrap();
            let closed = compute_g_mixed_closed(&m, y, h).unwrap();
            assert!(
                (via_quad - closed).abs() < 1e-8,
                "y={y}: {via_quad} vs {closed}"
            );
        }
    }

    #[test]
    fn quadrature_order_doubling_is_converged() {
        let q96 = quad();
        let q192 = QuadratureRule::gauss_hermite(192).unwrap();
        let m = DiscreteMeasure::new(vec![(-1.0, 0.5), (0.5, 0.5)]).unwrap();
        for pref in [weighted(), BetweennessPreference::mixed_crra(m)] {
            for y in [0.2, 1.0, 3.0] {
                let h1 = compute_h(&pref, y, &q96).unwrap();
                let h2 = compute_h(&pref, y, &q192).unwrap();
                assert!(
                    (h1 - h2).abs() < 1e-9,
                    "H order drift {} at y={y}",
                    (h1 - h2).abs()
                );
                let g1 = compute_g(&pref, y, &q96).unwrap();
                let g2 = compute_g(&pref, y, &q192).unwrap();
                assert!(
                    (g1 - g2).abs() < 1e-9,
                    "G order drift {} at y={y}",
                    (g1 - g2).abs()
                );
            }
        }
    }

    #[test]
    fn custom_preference_is_shape_checked() {
        // A valid custom generator: log utility.
        let ok = BetweennessPreference::custom(
            Arc::new(|x: f64| x.ln()),
            Arc::new(|x: f64| 1.0 / x),
            Arc::new(|x: f64| -1.0 / (x * x)),
            1.0,
        );
        assert!(ok.is_ok());
        // Convex F is rejected.
        let bad = BetweennessPreference::custom(
            Arc::new(|x: f64| x * x - 1.0),
            Arc::new(|x: f64| 2.0 * x),
            Arc::new(|_| 2.0),
            2.0,
        );
        assert!(bad.is_err());
    }
}
