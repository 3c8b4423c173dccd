//! Deterministic Black–Scholes market with a saving rate and a (possibly
//! higher) borrowing rate.
//!
//! Coefficients are constant or piecewise linear in time, which keeps them
//! continuous on `[0, T]` and makes the ellipticity certificate by dense
//! sampling defensible. The market price of risk is `kappa = sigma^{-1} mu`;
//! the two-rate variants shift the drift by the respective rate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Scalar-, vector- or matrix-valued coefficient, constant or piecewise
/// linear between user-supplied nodes.
#[derive(Debug, Clone)]
pub enum TimeDep<T> {
    Constant(T),
    PiecewiseLinear { ts: Vec<f64>, values: Vec<T> },
}

impl<T> TimeDep<T>
where
    T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
{
    pub fn eval(&self, t: f64) -> T {
        match self {
            TimeDep::Constant(v) => v.clone(),
            TimeDep::PiecewiseLinear { ts, values } => {
                if t <= ts[0] {
                    return values[0].clone();
                }
                if t >= *ts.last().unwrap() {
                    return values.last().unwrap().clone();
                }
                let i = ts.partition_point(|&s| s <= t) - 1;
                let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
                values[i].clone() * (1.0 - w) + values[i + 1].clone() * w
            }
        }
    }

    fn validate_nodes(&self, key: &str, horizon: f64) -> Result<()> {
        if let TimeDep::PiecewiseLinear { ts, values } = self {
            if ts.len() != values.len() || ts.len() < 2 {
                return Err(Error::config(key, "nodes need >= 2 (t, value) pairs"));
            }
            if ts.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(key, "node times must be strictly increasing"));
            }
            if ts[0] > 0.0 || *ts.last().unwrap() < horizon {
                return Err(Error::config(
                    key,
                    format!("nodes must cover [0, {horizon}]"),
                ));
            }
        }
        Ok(())
    }
}

/// Certified ellipticity constants of `sigma sigma^T` over a sampling grid.
#[derive(Debug, Clone)]
pub struct EllipticityCertificate {
    /// Smallest eigenvalue of `sigma sigma^T` over the grid.
    pub c1: f64,
    /// Largest eigenvalue over the grid.
    pub c2: f64,
    /// `max_t ||kappa(t)||^2`.
    pub c3: f64,
    /// Number of grid intervals used, recorded for reproducibility.
    pub grid_n: usize,
}

#[derive(Debug, Clone)]
pub struct MarketModel {
    horizon: f64,
    dim: usize,
    mu: TimeDep<DVector<f64>>,
    sigma: TimeDep<DMatrix<f64>>,
    saving_rate: TimeDep<f64>,
    borrowing_rate: TimeDep<f64>,
}

impl MarketModel {
    pub fn new(
        horizon: f64,
        dim: usize,
        mu: TimeDep<DVector<f64>>,
        sigma: TimeDep<DMatrix<f64>>,
        saving_rate: TimeDep<f64>,
        borrowing_rate: TimeDep<f64>,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::config(
                "market.T",
                format!("T = {horizon} must be > 0"),
            ));
        }
        if dim == 0 {
            return Err(Error::config("market.d", "d must be >= 1"));
        }
        mu.validate_nodes("market.mu", horizon)?;
        sigma.validate_nodes("market.sigma", horizon)?;
        saving_rate.validate_nodes("market.r", horizon)?;
        borrowing_rate.validate_nodes("market.R", horizon)?;
        let model = Self {
            horizon,
            dim,
            mu,
            sigma,
            saving_rate,
            borrowing_rate,
        };
        // Shape and rate-ordering checks on a dense sample.
        for k in 0..=512 {
            let t = horizon * k as f64 / 512.0;
            let m = model.mu_at(t);
            if m.len() != dim {
                return Err(Error::config(
                    "market.mu",
                    format!("mu({t}) has dimension {}, expected {dim}", m.len()),
                ));
            }
            let s = model.sigma_at(t);
            if s.nrows() != dim || s.ncols() != dim {
                return Err(Error::config(
                    "market.sigma",
                    format!(
                        "sigma({t}) is {}x{}, expected {dim}x{dim}",
                        s.nrows(),
                        s.ncols()
                    ),
                ));
            }
            if model.borrowing_rate_at(t) < model.saving_rate_at(t) - 1e-15 {
                return Err(Error::config(
                    "market.R",
                    format!("R({t}) < r({t}); the borrowing rate must dominate the saving rate"),
                ));
            }
        }
        Ok(model)
    }

    /// Single-rate constructor; the borrowing rate defaults to the saving rate.
    pub fn single_rate(
        horizon: f64,
        dim: usize,
        mu: TimeDep<DVector<f64>>,
        sigma: TimeDep<DMatrix<f64>>,
        rate: TimeDep<f64>,
    ) -> Result<Self> {
        let borrowing = rate.clone();
        Self::new(horizon, dim, mu, sigma, rate, borrowing)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mu_at(&self, t: f64) -> DVector<f64> {
        self.mu.eval(t)
    }

    pub fn sigma_at(&self, t: f64) -> DMatrix<f64> {
        self.sigma.eval(t)
    }

    pub fn saving_rate_at(&self, t: f64) -> f64 {
        self.saving_rate.eval(t)
    }

    pub fn borrowing_rate_at(&self, t: f64) -> f64 {
        self.borrowing_rate.eval(t)
    }

    /// True when the saving rate vanishes identically (dense sample).
    pub fn saving_rate_is_zero(&self) -> bool {
        (0..=512).all(|k| self.saving_rate_at(self.horizon * k as f64 / 512.0) == 0.0)
    }

    /// True when borrowing and saving rates agree identically (dense sample).
    pub fn rates_coincide(&self) -> bool {
        (0..=512).all(|k| {
            let t = self.horizon * k as f64 / 512.0;
            self.borrowing_rate_at(t) == self.saving_rate_at(t)
        })
    }

    fn solve_sigma(&self, t: f64, rhs: DVector<f64>) -> Result<DVector<f64>> {
        let sigma = self.sigma_at(t);
        sigma.lu().solve(&rhs).ok_or(Error::SingularSigma { t })
    }

    /// Market price of risk `kappa(t) = sigma(t)^{-1} mu(t)` (LU with partial
    /// pivoting).
    pub fn kappa(&self, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        self.solve_sigma(t, self.mu_at(t))
    }

    /// Two-rate prices of risk
    /// `kappa_1 = sigma^{-1}(mu - r 1)`, `kappa_2 = sigma^{-1}(mu - R 1)`.
    pub fn kappa12(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_time(t)?;
        let ones = DVector::from_element(self.dim, 1.0);
        let mu = self.mu_at(t);
        let k1 = self.solve_sigma(t, &mu - &ones * self.saving_rate_at(t))?;
        let k2 = self.solve_sigma(t, &mu - &ones * self.borrowing_rate_at(t))?;
        Ok((k1, k2))
    }

    /// Solve `sigma^T(t) u = a` for the portfolio weights behind a volatility
    /// exposure.
    pub fn weights_from_exposure(&self, t: f64, a: &DVector<f64>) -> Result<DVector<f64>> {
        self.sigma_at(t)
            .transpose()
            .lu()
            .solve(a)
            .ok_or(Error::SingularSigma { t })
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Extrapolation {
                x: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(())
    }

    /// Sample `sigma sigma^T` eigenvalues and `||kappa||^2` on a grid of
    /// `grid_n >= 512` intervals.
    pub fn certify_ellipticity(&self, grid_n: usize) -> Result<EllipticityCertificate> {
        if grid_n < 512 {
            return Err(Error::config(
                "grid_n",
                format!("grid_n = {grid_n} must be >= 512"),
            ));
        }
        let mut c1 = f64::INFINITY;
        let mut c2 = 0.0f64;
        let mut c3 = 0.0f64;
        for k in 0..=grid_n {
            let t = self.horizon * k as f64 / grid_n as f64;
            let sigma = self.sigma_at(t);
            let gram = &sigma * sigma.transpose();
            let eig = gram.symmetric_eigen();
            for &lambda in eig.eigenvalues.iter() {
                c1 = c1.min(lambda);
                c2 = c2.max(lambda);
            }
            if c1 <= 1e-12 {
                return Err(Error::DegenerateMarket { c1 });
            }
            c3 = c3.max(self.kappa(t)?.norm_squared());
        }
        Ok(EllipticityCertificate { c1, c2, c3, grid_n })
    }
}
