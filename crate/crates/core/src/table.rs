//! Tabulated risk-tolerance profile of a preference.
//!
//! `GTable` caches `H(y)`, `G(y)` and the cumulative map
//! `Gcal(y) = int_0^y G(s)^-2 ds` on a grid over `[0, y_max]`, with monotone
//! cubic interpolation in between. The ODE right-hand sides and the
//! well-posedness checks read from here instead of re-solving the implicit
//! root at every evaluation. The table refuses extrapolation: queries beyond
//! `y_max` are errors, never silent clamps.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::MonotoneCubic;
use crate::preference::{compute_g_with_h, compute_h, BetweennessPreference};
use crate::quad::QuadratureRule;

#[derive(Debug, Clone)]
pub struct GTable {
    y: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
    gcal: Vec<f64>,
    h_interp: MonotoneCubic,
    g_interp: MonotoneCubic,
    gcal_interp: MonotoneCubic,
    y_max: f64,
    /// Analytic bound `sup G <= 1/c` from the preference's relative
    /// risk-aversion floor, when one is known.
    g_sup_bound: Option<f64>,
}

/// Evaluates `(H, G)` at arbitrary `y`, memoizing by bit pattern so the
/// adaptive accumulation below never re-solves the implicit root.
struct NodeCache<'a> {
    pref: &'a BetweennessPreference,
    quad: &'a QuadratureRule,
    seen: HashMap<u64, (f64, f64)>,
}

impl<'a> NodeCache<'a> {
    fn new(pref: &'a BetweennessPreference, quad: &'a QuadratureRule) -> Self {
        Self {
            pref,
            quad,
            seen: HashMap::new(),
        }
    }

    fn h_g(&mut self, y: f64) -> Result<(f64, f64)> {
        if let Some(&v) = self.seen.get(&y.to_bits()) {
            return Ok(v);
        }
        let h = compute_h(self.pref, y, self.quad)?;
        let g = compute_g_with_h(self.pref, y, h, self.quad)?;
        self.seen.insert(y.to_bits(), (h, g));
        Ok((h, g))
    }
}

/// Build the table on a uniform grid of `n_nodes` points over `[0, y_max]`.
///
/// `Gcal` is accumulated per grid interval by Simpson with midpoint
/// refinement: spacing halves until successive values differ by less than
/// 1e-9 over the whole range.
pub fn build_g_table(
    pref: &BetweennessPreference,
    y_max: f64,
    n_nodes: usize,
    quad: &QuadratureRule,
) -> Result<GTable> {
    if !(y_max > 0.0) {
        return Err(Error::config(
            "y_max",
            format!("y_max = {y_max} must be > 0"),
        ));
    }
    if n_nodes < 16 {
        return Err(Error::config(
            "n_nodes",
            format!("n_nodes = {n_nodes} must be >= 16"),
        ));
    }
    quadrature_reach_check(pref, y_max, quad)?;

    let mut cache = NodeCache::new(pref, quad);
    let y: Vec<f64> = (0..n_nodes)
        .map(|i| y_max * i as f64 / (n_nodes - 1) as f64)
        .collect();
    let mut h = Vec::with_capacity(n_nodes);
    let mut g = Vec::with_capacity(n_nodes);
    for &yi in &y {
        let (hi, gi) = cache.h_g(yi)?;
        h.push(hi);
        g.push(gi);
    }
    debug_assert_eq!(h[0], 1.0);

    if let Some(c) = pref.rra_lower_bound() {
        let cap = 1.0 / c + 1e-8;
        for (i, &gi) in g.iter().enumerate() {
            if gi > cap {
                return Err(Error::InternalInconsistency {
                    what: format!("G({:.6e}) = {gi:.9e} exceeds 1/c = {:.9e}", y[i], 1.0 / c),
                });
            }
        }
    }

    // Accumulate Gcal interval by interval with per-interval tolerance such
    // that the total drift stays below 1e-9.
    let tol = 1e-9 / (n_nodes - 1) as f64;
    let mut gcal = Vec::with_capacity(n_nodes);
    gcal.push(0.0);
    for i in 1..n_nodes {
        let inc = refine_interval(&mut cache, y[i - 1], y[i], tol)?;
        gcal.push(gcal[i - 1] + inc);
    }
    for w in gcal.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::internal(
                "cumulative 1/G^2 integral is not strictly increasing",
            ));
        }
    }

    let h_interp = MonotoneCubic::new(&y, &h)?;
    let g_interp = MonotoneCubic::new(&y, &g)?;
    let gcal_interp = MonotoneCubic::new(&y, &gcal)?;
    let g_sup_bound = pref.rra_lower_bound().map(|c| 1.0 / c);
    Ok(GTable {
        y,
        h,
        g,
        gcal,
        h_interp,
        g_interp,
        gcal_interp,
        y_max,
        g_sup_bound,
    })
}

/// Simpson value of `int 1/G^2` over one grid interval, halving the spacing
/// until two successive refinements agree.
fn refine_interval(cache: &mut NodeCache, a: f64, b: f64, tol: f64) -> Result<f64> {
    let mut n_sub = 1usize;
    let mut prev = simpson_subdivided(cache, a, b, n_sub)?;
    for _ in 0..16 {
        n_sub *= 2;
        let next = simpson_subdivided(cache, a, b, n_sub)?;
        if (next - prev).abs() < tol {
            return Ok(next);
        }
        prev = next;
    }
    Ok(prev)
}

fn simpson_subdivided(cache: &mut NodeCache, a: f64, b: f64, n_sub: usize) -> Result<f64> {
    let h = (b - a) / n_sub as f64;
    let mut acc = 0.0;
    for k in 0..n_sub {
        let x0 = a + k as f64 * h;
        let f0 = cache.h_g(x0)?.1.powi(-2);
        let fm = cache.h_g(x0 + 0.5 * h)?.1.powi(-2);
        let f1 = cache.h_g(x0 + h)?.1.powi(-2);
        acc += h / 6.0 * (f0 + 4.0 * fm + f1);
    }
    Ok(acc)
}

/// The quadrature rule must resolve lognormal moments up to the generator's
/// growth exponent at the largest tabulated variance.
fn quadrature_reach_check(
    pref: &BetweennessPreference,
    y_max: f64,
    quad: &QuadratureRule,
) -> Result<()> {
    let gamma = pref.growth_exponent().max(1.0);
    let s = gamma * y_max.sqrt();
    let got = quad.expect(|xi| (s * xi).exp())?;
    let want = (s * s / 2.0).exp();
    let rel = (got / want - 1.0).abs();
    if rel > 1e-9 {
        return Err(Error::NumericalDomain {
            what: format!(
                "quadrature order {} cannot resolve growth exponent {gamma:.3} at y_max = {y_max:.3e} (relative moment error {rel:.3e}); increase quad_order or declare a smaller growth exponent",
                quad.order()
            ),
        });
    }
    Ok(())
}

impl GTable {
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    /// Analytic `sup G` bound inherited from the preference, when known.
    pub fn g_sup_bound(&self) -> Option<f64> {
        self.g_sup_bound
    }

    pub fn grid(&self) -> &[f64] {
        &self.y
    }

    pub fn h_nodes(&self) -> &[f64] {
        &self.h
    }

    pub fn g_nodes(&self) -> &[f64] {
        &self.g
    }

    pub fn gcal_nodes(&self) -> &[f64] {
        &self.gcal
    }

    pub fn h_at(&self, y: f64) -> Result<f64> {
        self.h_interp.eval(y)
    }

    pub fn g_at(&self, y: f64) -> Result<f64> {
        self.g_interp.eval(y)
    }

    pub fn gcal_at(&self, y: f64) -> Result<f64> {
        self.gcal_interp.eval(y)
    }

    /// Invert the strictly increasing cumulative map: the `y` with
    /// `Gcal(y) = v`.
    pub fn gcal_inverse(&self, v: f64) -> Result<f64> {
        self.gcal_interp.invert_increasing(v)
    }

    /// No-blow-up integral of the constrained problem:
    ///
    /// ```text
    /// Q(x) = int_0^x 1 / (6 c3 G(y)^2 + 4 c2 ||beta||^2) dy,
    /// ```
    ///
    /// strictly increasing in `x`; `x` must lie within the table range.
    pub fn q_integral(&self, c2: f64, c3: f64, beta_norm2: f64, x: f64) -> Result<f64> {
        if !(c2 > 0.0 && c3 > 0.0) {
            return Err(Error::config("c2/c3", "ellipticity constants must be > 0"));
        }
        if !(beta_norm2 >= 0.0) {
            return Err(Error::config("beta", "||beta||^2 must be >= 0"));
        }
        if x == 0.0 {
            return Ok(0.0);
        }
        if !(x > 0.0) || x > self.y_max {
            return Err(Error::Extrapolation {
                x,
                lo: 0.0,
                hi: self.y_max,
            });
        }
        let f = |y: f64| -> Result<f64> {
            let g = self.g_at(y)?;
            Ok(1.0 / (6.0 * c3 * g * g + 4.0 * c2 * beta_norm2))
        };
        crate::numeric::adaptive_simpson(&f, 0.0, x, 1e-12)
    }
}
