//! Monte Carlo simulation of terminal wealth and the implicit certainty
//! equivalent of a sample.
//!
//! The exact scheme draws `log X(T)` segment by segment with exact per-segment
//! moments (integrated on the solver grid), one standard normal per segment.
//! Perturbed strategies share segment boundaries and per-path streams with
//! the base strategy, so common random numbers hold across strategies and
//! across the epsilon ladder. Aggregation is pairwise, which makes parallel
//! and sequential runs bit-identical for a fixed seed.

use nalgebra::DVector;

use crate::equilibrium::{borrowing_drift, ProblemKind};
use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::numeric::{pairwise_sum, simpson};
use crate::preference::BetweennessPreference;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Segment-exact lognormal draws; valid for state-independent strategies.
    ExactLognormal,
    /// Log-Euler stepping with `n_time_steps` uniform steps.
    EulerLog,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Euler scheme only.
    pub n_time_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            seed: 42,
            scheme: Scheme::ExactLognormal,
            n_time_steps: 256,
        }
    }
}

/// Worker cap from `BEQ_THREADS` (0 = sequential); defaults to a small pool.
fn worker_count() -> usize {
    match std::env::var("BEQ_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(0) | Some(1) => 1,
        Some(n) => n.min(64),
        None => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(4),
    }
}

pub(crate) fn wealth_drift(
    model: &MarketModel,
    problem: ProblemKind,
    t: f64,
    u: &DVector<f64>,
) -> f64 {
    match problem {
        ProblemKind::Constrained => u.dot(&model.mu_at(t)),
        ProblemKind::Borrowing => borrowing_drift(model, t, u),
    }
}

/// Per-segment exact moments of `log X`: mean `int (drift - ||a||^2/2)` and
/// standard deviation `sqrt(int ||a||^2)`.
fn segment_moments<F: Fn(f64) -> DVector<f64>>(
    model: &MarketModel,
    problem: ProblemKind,
    strategy: &F,
    s0: f64,
    s1: f64,
    n_sub: usize,
) -> (f64, f64) {
    let var = simpson(
        |s| {
            let a = model.sigma_at(s).transpose() * strategy(s);
            a.norm_squared()
        },
        s0,
        s1,
        n_sub,
    );
    let mean = simpson(
        |s| {
            let u = strategy(s);
            let a = model.sigma_at(s).transpose() * &u;
            wealth_drift(model, problem, s, &u) - 0.5 * a.norm_squared()
        },
        s0,
        s1,
        n_sub,
    );
    (mean, var.max(0.0).sqrt())
}

fn segment_boundaries(t: f64, horizon: f64, breakpoints: &[f64]) -> Vec<f64> {
    let mut bounds = vec![t];
    for &b in breakpoints {
        if b > t + 1e-15 && b < horizon - 1e-15 {
            bounds.push(b);
        }
    }
    bounds.push(horizon);
    bounds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    bounds.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    bounds
}

/// Simulate terminal wealth for several strategies under shared randomness.
/// Strategy `j` of path `i` uses the same per-segment normals, so differences
/// between strategies are driven only by their coefficients.
pub fn simulate_coupled<F: Fn(f64) -> DVector<f64> + Sync>(
    model: &MarketModel,
    strategies: &[F],
    t: f64,
    x: f64,
    cfg: &SimConfig,
    problem: ProblemKind,
    breakpoints: &[f64],
) -> Result<Vec<Vec<f64>>> {
    if !(x > 0.0) {
        return Err(Error::config(
            "x",
            format!("initial wealth {x} must be > 0"),
        ));
    }
    let horizon = model.horizon();
    if !(0.0..horizon).contains(&t) {
        return Err(Error::config("t", format!("t = {t} must lie in [0, T)")));
    }
    if cfg.n_paths == 0 {
        return Err(Error::config("n_paths", "need at least one path"));
    }
    match cfg.scheme {
        Scheme::ExactLognormal => {
            let bounds = segment_boundaries(t, horizon, breakpoints);
            let total_len = horizon - t;
            let mut moments = vec![Vec::with_capacity(bounds.len() - 1); strategies.len()];
            for w in bounds.windows(2) {
                let n_sub = (((w[1] - w[0]) / total_len * 1024.0).ceil() as usize).clamp(4, 4096);
                for (j, strategy) in strategies.iter().enumerate() {
                    moments[j].push(segment_moments(model, problem, strategy, w[0], w[1], n_sub));
                }
            }
            let n_segs = bounds.len() - 1;
            let n_strategies = strategies.len();
            let compute = move |path: usize, out: &mut [f64]| {
                let mut rng = CounterRng::for_path(cfg.seed, path as u64);
                out.iter_mut().for_each(|v| *v = 0.0);
                for seg in 0..n_segs {
                    let z = rng.normal();
                    for (j, m) in moments.iter().enumerate() {
                        let (mean, sd) = m[seg];
                        out[j] += mean + sd * z;
                    }
                }
                for v in out.iter_mut() {
                    *v = x * v.exp();
                }
            };
            Ok(run_paths(cfg.n_paths, n_strategies, compute))
        }
        Scheme::EulerLog => {
            if cfg.n_time_steps == 0 {
                return Err(Error::config(
                    "n_time_steps",
                    "Euler scheme needs n_time_steps >= 1",
                ));
            }
            let n = cfg.n_time_steps;
            let dt = (horizon - t) / n as f64;
            // Left-endpoint coefficients, shared across strategies.
            let mut coeffs = vec![Vec::with_capacity(n); strategies.len()];
            for k in 0..n {
                let s = t + k as f64 * dt;
                for (j, strategy) in strategies.iter().enumerate() {
                    let u = strategy(s);
                    let a = model.sigma_at(s).transpose() * &u;
                    let drift = wealth_drift(model, problem, s, &u);
                    coeffs[j].push((drift - 0.5 * a.norm_squared()) * dt);
                    coeffs[j].push(a.norm() * dt.sqrt());
                }
            }
            let n_strategies = strategies.len();
            let compute = move |path: usize, out: &mut [f64]| {
                let mut rng = CounterRng::for_path(cfg.seed, path as u64);
                out.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..n {
                    let z = rng.normal();
                    for (j, c) in coeffs.iter().enumerate() {
                        out[j] += c[2 * k] + c[2 * k + 1] * z;
                    }
                }
                for v in out.iter_mut() {
                    *v = x * v.exp();
                }
            };
            Ok(run_paths(cfg.n_paths, n_strategies, compute))
        }
    }
}

/// Simulate one strategy; see `simulate_coupled` for the scheme details.
pub fn simulate_terminal_wealth<F: Fn(f64) -> DVector<f64> + Sync>(
    model: &MarketModel,
    strategy: F,
    t: f64,
    x: f64,
    cfg: &SimConfig,
    problem: ProblemKind,
) -> Result<Vec<f64>> {
    Ok(simulate_coupled(
        model,
        std::slice::from_ref(&strategy),
        t,
        x,
        cfg,
        problem,
        &[],
    )?
    .remove(0))
}

/// Evaluate `compute(path, out)` for every path, chunked across workers; the
/// output layout and values are independent of the worker count.
fn run_paths<C: Fn(usize, &mut [f64]) + Sync>(
    n_paths: usize,
    n_strategies: usize,
    compute: C,
) -> Vec<Vec<f64>> {
    let threads = worker_count().min(n_paths.max(1));
    let mut per_strategy = vec![vec![0.0f64; n_paths]; n_strategies];
    if threads <= 1 {
        let mut buf = vec![0.0f64; n_strategies];
        for i in 0..n_paths {
            compute(i, &mut buf);
            for (j, &v) in buf.iter().enumerate() {
                per_strategy[j][i] = v;
            }
        }
        return per_strategy;
    }
    let chunk = n_paths.div_ceil(threads);
    let results: Vec<Vec<Vec<f64>>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..threads {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n_paths);
            let compute = &compute;
            handles.push(scope.spawn(move || {
                let mut local = vec![vec![0.0f64; hi.saturating_sub(lo)]; n_strategies];
                let mut buf = vec![0.0f64; n_strategies];
                for i in lo..hi {
                    compute(i, &mut buf);
                    for (j, &v) in buf.iter().enumerate() {
                        local[j][i - lo] = v;
                    }
                }
                local
            }));
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation worker panicked"))
            .collect()
    });
    for (w, local) in results.into_iter().enumerate() {
        let lo = w * chunk;
        for (j, vals) in local.into_iter().enumerate() {
            per_strategy[j][lo..lo + vals.len()].copy_from_slice(&vals);
        }
    }
    per_strategy
}

/// Monte Carlo implicit certainty equivalent: the root of
/// `mean_i F(X_i / z) = 0`, with a delta-method confidence halfwidth.
pub fn implicit_j_mc(
    pref: &BetweennessPreference,
    samples: &[f64],
    bracket_hint: Option<f64>,
) -> Result<(f64, f64)> {
    let n = samples.len();
    if n < 1000 {
        return Err(Error::config(
            "n_paths",
            format!("{n} samples; implicit root needs >= 1000"),
        ));
    }
    let mean_f = |z: f64| -> f64 {
        let vals: Vec<f64> = samples.iter().map(|&xi| pref.f(xi / z)).collect();
        pairwise_sum(&vals) / n as f64
    };
    let lo0 = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo0 > 0.0) {
        return Err(Error::NumericalDomain {
            what: "nonpositive wealth sample".into(),
        });
    }

    // F is increasing with F(1) = 0, so mean F(X/z) >= 0 at z = min X and
    // <= 0 at z = max X: [min, max] always brackets. A hint can tighten it.
    let (mut lo, mut hi) = (lo0, hi0);
    if let Some(h) = bracket_hint {
        if h > 0.0 {
            let (hl, hh) = (h * 0.5, h * 2.0);
            if mean_f(hl) > 0.0 && mean_f(hh) < 0.0 {
                lo = hl;
                hi = hh;
            }
        }
    }
    if lo == hi {
        return Ok((lo, 0.0));
    }
    let mut f_lo = mean_f(lo);
    let mut f_hi = mean_f(hi);
    if f_lo == 0.0 {
        return Ok(finish_ci(pref, samples, lo));
    }
    if f_hi == 0.0 {
        return Ok(finish_ci(pref, samples, hi));
    }
    if f_lo < 0.0 || f_hi > 0.0 {
        return Err(Error::RootBracket {
            what: format!(
                "implicit root bracket failed: g({lo:.3e}) = {f_lo:.3e}, g({hi:.3e}) = {f_hi:.3e}"
            ),
        });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = mean_f(mid);
        if fm == 0.0 {
            return Ok(finish_ci(pref, samples, mid));
        }
        if fm > 0.0 {
            lo = mid;
            f_lo = fm;
        } else {
            hi = mid;
            f_hi = fm;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    let _ = (f_lo, f_hi);
    Ok(finish_ci(pref, samples, 0.5 * (lo + hi)))
}

fn finish_ci(pref: &BetweennessPreference, samples: &[f64], z: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let f_vals: Vec<f64> = samples.iter().map(|&xi| pref.f(xi / z)).collect();
    let mean = pairwise_sum(&f_vals) / n;
    let var_terms: Vec<f64> = f_vals.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let sd = (pairwise_sum(&var_terms) / (n - 1.0)).sqrt();
    // |d/dz mean F(X/z)| = mean F'(q) q / z at q = X/z.
    let deriv_terms: Vec<f64> = samples
        .iter()
        .map(|&xi| {
            let q = xi / z;
            pref.df(q) * q
        })
        .collect();
    let deriv = (pairwise_sum(&deriv_terms) / n / z).abs();
    let halfwidth = if deriv > 0.0 {
        1.96 * sd / (n.sqrt() * deriv)
    } else {
        f64::INFINITY
    };
    (z, halfwidth)
}

/// Paired difference of implicit roots under common random numbers:
/// `J(pert) - J(base)` with a delta-method halfwidth computed from per-path
/// differences, which is what makes O(eps) signals resolvable.
pub fn paired_j_difference(
    pref: &BetweennessPreference,
    base_samples: &[f64],
    pert_samples: &[f64],
    z_base: f64,
) -> Result<(f64, f64)> {
    if base_samples.len() != pert_samples.len() {
        return Err(Error::internal("paired samples length mismatch"));
    }
    let (z_pert, _) = implicit_j_mc(pref, pert_samples, Some(z_base))?;
    let n = base_samples.len() as f64;
    let diffs: Vec<f64> = base_samples
        .iter()
        .zip(pert_samples)
        .map(|(&xb, &xp)| pref.f(xp / z_base) - pref.f(xb / z_base))
        .collect();
    let mean = pairwise_sum(&diffs) / n;
    let var_terms: Vec<f64> = diffs.iter().map(|&v| (v - mean) * (v - mean)).collect();
    let sd = (pairwise_sum(&var_terms) / (n - 1.0).max(1.0)).sqrt();
    let deriv_terms: Vec<f64> = base_samples
        .iter()
        .map(|&xi| {
            let q = xi / z_base;
            pref.df(q) * q
        })
        .collect();
    let deriv = (pairwise_sum(&deriv_terms) / n / z_base).abs();
    let halfwidth = if deriv > 0.0 {
        1.96 * sd / (n.sqrt() * deriv)
    } else {
        f64::INFINITY
    };
    Ok((z_pert - z_base, halfwidth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::TimeDep;
    use crate::preference::DiscreteMeasure;
    use nalgebra::DMatrix;

    fn scalar_market(mu: f64, sigma: f64, r: f64, big_r: f64) -> MarketModel {
        MarketModel::new(
            1.0,
            1,
            TimeDep::Constant(DVector::from_vec(vec![mu])),
            TimeDep::Constant(DMatrix::from_vec(1, 1, vec![sigma])),
            TimeDep::Constant(r),
            TimeDep::Constant(big_r),
        )
        .unwrap()
    }

    #[test]
    fn zero_strategy_constrained_keeps_wealth_constant() {
        let model = scalar_market(0.08, 0.2, 0.0, 0.0);
        let cfg = SimConfig {
            n_paths: 2000,
            ..Default::default()
        };
        let samples = simulate_terminal_wealth(
            &model,
            |_t| DVector::from_vec(vec![0.0]),
            0.0,
            1.0,
            &cfg,
            ProblemKind::Constrained,
        )
        .unwrap();
        assert!(samples.iter().all(|&v| v == 1.0), "wealth must stay at x");
    }

    #[test]
    fn zero_strategy_borrowing_grows_at_saving_rate() {
        let model = scalar_market(0.08, 0.2, 0.03, 0.06);
        let cfg = SimConfig {
            n_paths: 1500,
            ..Default::default()
        };
        let samples = simulate_terminal_wealth(
            &model,
            |_t| DVector::from_vec(vec![0.0]),
            0.0,
            1.0,
            &cfg,
            ProblemKind::Borrowing,
        )
        .unwrap();
        let want = (0.03f64).exp();
        assert!(samples.iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn lognormal_mean_of_log_matches_moments() {
        // Constant u: E log X(T) = log x + (u mu - a^2/2)(T - t).
        let model = scalar_market(0.08, 0.2, 0.0, 0.0);
        let cfg = SimConfig {
            n_paths: 60_000,
            seed: 7,
            ..Default::default()
        };
        let u = 1.3;
        let samples = simulate_terminal_wealth(
            &model,
            |_t| DVector::from_vec(vec![u]),
            0.0,
            1.0,
            &cfg,
            ProblemKind::Constrained,
        )
        .unwrap();
        let logs: Vec<f64> = samples.iter().map(|&v| v.ln()).collect();
        let mean = pairwise_sum(&logs) / logs.len() as f64;
        let want = u * 0.08 - 0.5 * (0.2 * u) * (0.2 * u);
        let se = (0.2 * u) / (logs.len() as f64).sqrt();
        assert!(
            (mean - want).abs() < 4.0 * se,
            "mean {mean} vs {want} (se {se})"
        );
    }

    #[test]
    fn euler_log_agrees_with_exact_in_distribution() {
        let model = scalar_market(0.08, 0.2, 0.0, 0.0);
        let exact = SimConfig {
            n_paths: 40_000,
            seed: 3,
            ..Default::default()
        };
        let euler = SimConfig {
            n_paths: 40_000,
            seed: 3,
            scheme: Scheme::EulerLog,
            n_time_steps: 64,
        };
        let strat = |_t: f64| DVector::from_vec(vec![0.8]);
        let a = simulate_terminal_wealth(&model, strat, 0.0, 1.0, &exact, ProblemKind::Constrained)
            .unwrap();
        let b = simulate_terminal_wealth(&model, strat, 0.0, 1.0, &euler, ProblemKind::Constrained)
            .unwrap();
        let mean = |v: &[f64]| pairwise_sum(v) / v.len() as f64;
        assert!(
            (mean(&a) - mean(&b)).abs() < 0.005,
            "{} vs {}",
            mean(&a),
            mean(&b)
        );
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let model = scalar_market(0.08, 0.2, 0.0, 0.0);
        let cfg = SimConfig {
            n_paths: 5000,
            seed: 11,
            ..Default::default()
        };
        let strat = |_t: f64| DVector::from_vec(vec![1.1]);
        std::env::set_var("BEQ_THREADS", "0");
        let seq = simulate_terminal_wealth(&model, strat, 0.0, 1.0, &cfg, ProblemKind::Constrained)
            .unwrap();
        std::env::set_var("BEQ_THREADS", "3");
        let par = simulate_terminal_wealth(&model, strat, 0.0, 1.0, &cfg, ProblemKind::Constrained)
            .unwrap();
        std::env::remove_var("BEQ_THREADS");
        assert_eq!(seq.len(), par.len());
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn implicit_root_degenerate_samples() {
        let pref = crate::preference::BetweennessPreference::weighted_utility(0.25, -0.5).unwrap();
        let samples = vec![1.7; 1500];
        let (z, ci) = implicit_j_mc(&pref, &samples, None).unwrap();
        assert_eq!(z, 1.7);
        assert_eq!(ci, 0.0);
    }

    #[test]
    fn implicit_root_log_utility_is_geometric_mean() {
        let pref = crate::preference::BetweennessPreference::mixed_crra(
            DiscreteMeasure::dirac(0.0).unwrap(),
        );
        let samples: Vec<f64> = (0..2000).map(|i| 0.5 + (i as f64) / 1000.0).collect();
        let (z, _) = implicit_j_mc(&pref, &samples, None).unwrap();
        let logs: Vec<f64> = samples.iter().map(|&v| v.ln()).collect();
        let want = (pairwise_sum(&logs) / logs.len() as f64).exp();
        assert!((z - want).abs() < 1e-9, "z = {z}, want {want}");
    }

    #[test]
    fn implicit_root_requires_enough_samples() {
        let pref = crate::preference::BetweennessPreference::weighted_utility(0.25, -0.5).unwrap();
        assert!(implicit_j_mc(&pref, &[1.0; 10], None).is_err());
    }
}
