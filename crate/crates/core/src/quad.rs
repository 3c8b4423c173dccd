//! Gauss–Hermite quadrature adapted to standard-normal expectations.
//!
//! For `xi ~ N(0,1)` the rule computes `E[g(xi)] ~= sum_i w_i g(x_i)` with
//! nodes and weights obtained from the physicists' Hermite rule by the change
//! of variable `x -> sqrt(2) x`, `w -> w / sqrt(pi)`. Nodes are exactly
//! symmetric about 0 and weights sum to 1.

use crate::error::{Error, Result};

/// Quadrature rule for expectations under the standard normal density.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    order: usize,
}

/// Value and derivative of the orthonormal Hermite polynomial at `x` via the
/// stable three-term recurrence. Orthonormal scaling keeps tail weights
/// relatively accurate, which an eigenvector-based construction cannot do:
/// tail weights of large rules underflow the eigenvector noise floor and the
/// rule then fails on integrands with fat lognormal tails.
fn hermite_poly(order: usize, x: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0f64;
    for j in 1..=order {
        let p3 = p2;
        p2 = p1;
        p1 = x * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
    }
    let dp = (2.0 * order as f64).sqrt() * p2;
    (p1, dp)
}

impl QuadratureRule {
    /// Build a rule of the given order: Newton iteration on the orthonormal
    /// Hermite recurrence, asymptotic initial guesses for the roots.
    pub fn gauss_hermite(order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::config("quad_order", "order must be >= 2"));
        }
        if order > 192 {
            // The asymptotic root guesses degrade mid-spectrum beyond this
            // and Newton can land on a neighboring root.
            return Err(Error::config("quad_order", "order must be <= 192"));
        }
        let n = order;
        let mut roots = vec![0.0f64; n.div_ceil(2)];
        let mut weights_half = vec![0.0f64; n.div_ceil(2)];
        let mut z = 0.0f64;
        for i in 0..n.div_ceil(2) {
            // Root guesses from largest to smallest (Stroud/Secrest style).
            z = match i {
                0 => {
                    let a = (2 * n + 1) as f64;
                    a.sqrt() - 1.85575 * a.powf(-1.0 / 6.0)
                }
                1 => z - 1.14 * (n as f64).powf(0.426) / z,
                2 => 1.86 * z - 0.86 * roots[0],
                3 => 1.91 * z - 0.91 * roots[1],
                _ => 2.0 * z - roots[i - 2],
            };
            let mut converged = false;
            for _ in 0..100 {
                let (p, dp) = hermite_poly(n, z);
                let step = p / dp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::internal(format!(
                    "Hermite root {i} did not converge at order {n}"
                )));
            }
            if i > 0 && z >= roots[i - 1] - 1e-12 {
                return Err(Error::internal(format!(
                    "Hermite roots collided at order {n}: root {i} = {z} vs {}",
                    roots[i - 1]
                )));
            }
            let (_, dp) = hermite_poly(n, z);
            roots[i] = z;
            weights_half[i] = 2.0 / (dp * dp);
        }

        // Mirror to the full symmetric rule; physicists' nodes scale by
        // sqrt(2) for the standard normal and weights normalize to 1.
        let mut nodes = vec![0.0f64; n];
        let mut weights = vec![0.0f64; n];
        for i in 0..n / 2 {
            let x = roots[i] * std::f64::consts::SQRT_2;
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = weights_half[i];
            weights[n - 1 - i] = weights_half[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
            weights[n / 2] = weights_half[n / 2];
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self {
            nodes,
            weights,
            order,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[g(xi)]` for `xi ~ N(0,1)`; errors if any node evaluation is
    /// non-finite, naming the offending node.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mut g: F) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.order);
        for (i, (&x, &w)) in self.nodes.iter().zip(&self.weights).enumerate() {
            let v = g(x);
            if !v.is_finite() {
                return Err(Error::NumericalDomain {
                    what: format!("integrand non-finite at quadrature node {i} (xi = {x:.9e})"),
                });
            }
            terms.push(w * v);
        }
        Ok(crate::numeric::pairwise_sum(&terms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_normalized_and_nodes_symmetric() {
        for order in [3, 8, 33, 96] {
            let q = QuadratureRule::gauss_hermite(order).unwrap();
            let sum: f64 = q.weights().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "order {order}: weight sum {sum}");
            for i in 0..order / 2 {
                assert_eq!(
                    q.nodes()[i],
                    -q.nodes()[order - 1 - i],
                    "order {order} node {i}"
                );
            }
        }
    }

    #[test]
    fn normal_moments_are_exact() {
        let q = QuadratureRule::gauss_hermite(96).unwrap();
        assert!(q.expect(|x| x).unwrap().abs() < 1e-14);
        assert!((q.expect(|x| x * x).unwrap() - 1.0).abs() < 1e-13);
        assert!((q.expect(|x| x.powi(4)).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn lognormal_mean_matches_closed_form() {
        let q = QuadratureRule::gauss_hermite(96).unwrap();
        for s in [0.1, 0.5, 1.0, 2.0] {
            let got = q.expect(|x| (s * x).exp()).unwrap();
            let want = (s * s / 2.0f64).exp();
            assert!(
                (got / want - 1.0).abs() < 1e-12,
                "s={s}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn rejects_non_finite_integrand() {
        let q = QuadratureRule::gauss_hermite(16).unwrap();
        let err = q
            .expect(|x| if x > 0.0 { f64::NAN } else { 1.0 })
            .unwrap_err();
        assert!(matches!(err, Error::NumericalDomain { .. }), "got {err:?}");
    }
}
