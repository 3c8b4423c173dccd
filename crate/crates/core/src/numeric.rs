//! Shared numeric kernels: monotone cubic interpolation, Simpson quadrature,
//! bracketed root finding, and deterministic summation.

use crate::error::{Error, Result};

/// Monotone cubic Hermite interpolant (Fritsch–Carlson slope limiting).
///
/// Strictly monotone data produces a strictly monotone interpolant; data with
/// interior extrema is flattened there instead of overshooting.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() || xs.len() < 2 {
            return Err(Error::internal(
                "interpolant needs >= 2 nodes of equal length",
            ));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::internal(
                "interpolant abscissae must be strictly increasing",
            ));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();

        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            if delta[i - 1] * delta[i] <= 0.0 {
                d[i] = 0.0;
            } else {
                // Weighted harmonic mean of the adjacent secants.
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
            }
        }
        d[0] = endpoint_slope(
            h[0],
            h.get(1).copied().unwrap_or(h[0]),
            delta[0],
            delta.get(1).copied().unwrap_or(delta[0]),
        );
        d[n - 1] = endpoint_slope(
            h[n - 2],
            if n >= 3 { h[n - 3] } else { h[n - 2] },
            delta[n - 2],
            if n >= 3 { delta[n - 3] } else { delta[n - 2] },
        );

        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            slopes: d,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.xs[0]
    }

    pub fn x_max(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluate at `x`, which must lie within the node range.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if !x.is_finite() || x < self.x_min() || x > self.x_max() {
            return Err(Error::Extrapolation {
                x,
                lo: self.x_min(),
                hi: self.x_max(),
            });
        }
        let i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(k) => return Ok(self.ys[k]),
            Err(k) => k - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        Ok(h00 * self.ys[i]
            + h10 * h * self.slopes[i]
            + h01 * self.ys[i + 1]
            + h11 * h * self.slopes[i + 1])
    }

    /// Solve `eval(y) = target` on the node range for data that is strictly
    /// monotone increasing. Used to invert cumulative integrals.
    pub fn invert_increasing(&self, target: f64) -> Result<f64> {
        let (lo, hi) = (self.x_min(), self.x_max());
        let (flo, fhi) = (self.ys[0], *self.ys.last().unwrap());
        if target < flo - 1e-12 || target > fhi + 1e-12 {
            return Err(Error::Extrapolation {
                x: target,
                lo: flo,
                hi: fhi,
            });
        }
        let f = |x: f64| self.eval(x).unwrap_or(f64::NAN) - target;
        brent_root(f, lo, hi, 1e-14, 1e-13, 200)
    }
}

fn endpoint_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    // One-sided three-point estimate, clamped to keep monotonicity.
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Composite Simpson over `[a, b]` with `n` sub-intervals (midpoint rule per
/// sub-interval, so the integrand is sampled at endpoints and midpoints).
pub fn simpson<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 1);
    let h = (b - a) / n as f64;
    let mut acc = 0.0;
    let mut left = f(a);
    for k in 0..n {
        let x0 = a + k as f64 * h;
        let mid = f(x0 + 0.5 * h);
        let right = f(x0 + h);
        acc += h / 6.0 * (left + 4.0 * mid + right);
        left = right;
    }
    acc
}

/// Adaptive Simpson on `[a, b]`: the spacing halves until two successive
/// refinements differ by less than `tol`, starting from one midpoint pass.
pub fn adaptive_simpson<F: Fn(f64) -> Result<f64>>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    fn recurse<F: Fn(f64) -> Result<f64>>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let refined = left + right;
        if (refined - whole).abs() < tol || depth >= 24 {
            return Ok(refined);
        }
        let half = 0.5 * tol;
        Ok(recurse(f, a, m, fa, flm, fm, left, half, depth + 1)?
            + recurse(f, m, b, fm, frm, fb, right, half, depth + 1)?)
    }

    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let fm = f(0.5 * (a + b))?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 0)
}

/// Brent's method on a sign-changing bracket `[a, b]`.
///
/// Stops when `|f| <= f_tol` or the bracket shrinks below `x_tol`.
pub fn brent_root<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    x_tol: f64,
    f_tol: f64,
    max_iter: usize,
) -> Result<f64> {
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa * fb > 0.0 {
        return Err(Error::RootBracket {
            what: format!("no sign change on [{a:.6e}, {b:.6e}] (f: {fa:.3e}, {fb:.3e})"),
        });
    }
    if fa.abs() < fb.abs() {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let (mut c, mut fc) = (a, fa);
    let mut mflag = true;
    let mut d = c;
    for _ in 0..max_iter {
        if fb.abs() <= f_tol {
            return Ok(b);
        }
        let s = if fa != fc && fb != fc {
            // Inverse quadratic interpolation.
            a * fb * fc / ((fa - fb) * (fa - fc))
                + b * fa * fc / ((fb - fa) * (fb - fc))
                + c * fa * fb / ((fc - fa) * (fc - fb))
        } else {
            b - fb * (b - a) / (fb - fa)
        };
        let between = {
            let lo = (3.0 * a + b) / 4.0;
            (lo.min(b)..=lo.max(b)).contains(&s)
        };
        let use_bisect = !between
            || (mflag && (s - b).abs() >= (b - c).abs() / 2.0)
            || (!mflag && (s - b).abs() >= (c - d).abs() / 2.0)
            || (mflag && (b - c).abs() < x_tol)
            || (!mflag && (c - d).abs() < x_tol);
        let s = if use_bisect { 0.5 * (a + b) } else { s };
        mflag = use_bisect;
        let fs = f(s);
        d = c;
        c = b;
        fc = fb;
        if fa * fs < 0.0 {
            b = s;
            fb = fs;
        } else {
            a = s;
            fa = fs;
        }
        if fa.abs() < fb.abs() {
            std::mem::swap(&mut a, &mut b);
            std::mem::swap(&mut fa, &mut fb);
        }
        if (b - a).abs() <= x_tol {
            return Ok(b);
        }
    }
    if fb.abs() <= f_tol.max(1e-9) {
        return Ok(b);
    }
    Err(Error::RootBracket {
        what: format!("root iteration stalled near {b:.9e} (f = {fb:.3e})"),
    })
}

/// Deterministic pairwise summation; the result does not depend on how the
/// slice was produced (sequential or parallel fill).
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
