//! Closed convex constraint sets for portfolio weights and the projection
//! onto their volatility image `sigma^T(t) U`.
//!
//! Primitive families have closed-form Euclidean projections; intersections
//! use Dykstra's alternating projections. The image projection
//! `P_t(x) = argmin_{z in sigma^T U} ||x - z||` is computed in weight space
//! by projected gradient descent (the image set has no native membership
//! test, the weight set does), with closed forms where available.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const DYKSTRA_TOL: f64 = 1e-10;
const DYKSTRA_MAX_SWEEPS: usize = 10_000;
const PGD_TOL: f64 = 1e-10;
const PGD_MAX_ITERS: usize = 20_000;

#[derive(Debug, Clone)]
enum Family {
    FullSpace,
    NonnegOrthant,
    Box { lo: DVector<f64>, hi: DVector<f64> },
    Ball { center: DVector<f64>, radius: f64 },
    Halfspace { normal: DVector<f64>, offset: f64 },
    Intersection { members: Vec<ConvexSet> },
}

/// A nonempty closed convex subset of weight space, with a stored feasible
/// witness point.
#[derive(Debug, Clone)]
pub struct ConvexSet {
    dim: usize,
    family: Family,
    witness: DVector<f64>,
}

impl ConvexSet {
    pub fn full_space(dim: usize) -> Self {
        Self {
            dim,
            family: Family::FullSpace,
            witness: DVector::zeros(dim),
        }
    }

    /// No short-selling: all weights nonnegative.
    pub fn nonneg_orthant(dim: usize) -> Self {
        Self {
            dim,
            family: Family::NonnegOrthant,
            witness: DVector::zeros(dim),
        }
    }

    pub fn boxed(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::config(
                "constraint.lo/hi",
                "bounds must be nonempty and equally sized",
            ));
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l > h) {
            return Err(Error::config(
                "constraint.lo/hi",
                "requires lo <= hi componentwise",
            ));
        }
        let witness = lo.zip_map(&hi, |l, h| 0.0f64.clamp(l, h));
        Ok(Self {
            dim: lo.len(),
            family: Family::Box { lo, hi },
            witness,
        })
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::config(
                "constraint.radius",
                format!("radius = {radius} must be > 0"),
            ));
        }
        let witness = center.clone();
        Ok(Self {
            dim: center.len(),
            family: Family::Ball { center, radius },
            witness,
        })
    }

    /// `{u : normal . u <= offset}`; e.g. `1 . u <= 1` forbids borrowing.
    pub fn halfspace(normal: DVector<f64>, offset: f64) -> Result<Self> {
        let nn = normal.norm_squared();
        if !(nn > 0.0) {
            return Err(Error::config("constraint.normal", "normal must be nonzero"));
        }
        let witness = if offset >= 0.0 {
            DVector::zeros(normal.len())
        } else {
            &normal * (offset / nn)
        };
        Ok(Self {
            dim: normal.len(),
            family: Family::Halfspace { normal, offset },
            witness,
        })
    }

    /// Intersection of members; the feasible `witness` is mandatory and is
    /// verified against every member.
    pub fn intersection(members: Vec<ConvexSet>, witness: DVector<f64>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::config(
                "constraint.members",
                "intersection needs >= 2 members",
            ));
        }
        let dim = members[0].dim;
        if members.iter().any(|m| m.dim != dim) || witness.len() != dim {
            return Err(Error::config(
                "constraint.members",
                "member dimensions disagree",
            ));
        }
        let set = Self {
            dim,
            family: Family::Intersection { members },
            witness: witness.clone(),
        };
        if !set.contains(&witness, 1e-9) {
            return Err(Error::config(
                "constraint.witness",
                "witness point is not feasible",
            ));
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// A stored feasible point (the `beta` of the no-blow-up integral).
    pub fn witness(&self) -> &DVector<f64> {
        &self.witness
    }

    pub fn is_full_space(&self) -> bool {
        matches!(self.family, Family::FullSpace)
    }

    /// Euclidean distance to the set, exact per primitive family.
    fn distance(&self, u: &DVector<f64>) -> f64 {
        match &self.family {
            Family::FullSpace => 0.0,
            Family::NonnegOrthant => u.iter().map(|&v| v.min(0.0).powi(2)).sum::<f64>().sqrt(),
            Family::Box { lo, hi } => u
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .map(|(&v, (&l, &h))| (v - v.clamp(l, h)).powi(2))
                .sum::<f64>()
                .sqrt(),
            Family::Ball { center, radius } => ((u - center).norm() - radius).max(0.0),
            Family::Halfspace { normal, offset } => {
                ((normal.dot(u) - offset) / normal.norm()).max(0.0)
            }
            Family::Intersection { members } => {
                // Not the exact distance; membership for intersections is
                // defined as membership in every member.
                members.iter().map(|m| m.distance(u)).fold(0.0, f64::max)
            }
        }
    }

    /// Whether `u` lies within `tol` of the set (all members, for
    /// intersections).
    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        match &self.family {
            Family::Intersection { members } => members.iter().all(|m| m.contains(u, tol)),
            _ => self.distance(u) <= tol,
        }
    }

    /// Euclidean projection onto the set itself.
    pub fn project_native(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.family {
            Family::FullSpace => Ok(x.clone()),
            Family::NonnegOrthant => Ok(x.map(|v| v.max(0.0))),
            Family::Box { lo, hi } => Ok(DVector::from_iterator(
                x.len(),
                x.iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .map(|(&v, (&l, &h))| v.clamp(l, h)),
            )),
            Family::Ball { center, radius } => {
                let diff = x - center;
                let norm = diff.norm();
                if norm <= *radius {
                    Ok(x.clone())
                } else {
                    Ok(center + diff * (*radius / norm))
                }
            }
            Family::Halfspace { normal, offset } => {
                let excess = normal.dot(x) - offset;
                if excess <= 0.0 {
                    Ok(x.clone())
                } else {
                    Ok(x - normal * (excess / normal.norm_squared()))
                }
            }
            Family::Intersection { members } => self.dykstra(members, x),
        }
    }

    fn dykstra(&self, members: &[ConvexSet], x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut current = x.clone();
        let mut increments = vec![DVector::zeros(x.len()); members.len()];
        for _sweep in 0..DYKSTRA_MAX_SWEEPS {
            let before = current.clone();
            for (m, p) in members.iter().zip(increments.iter_mut()) {
                let shifted = &current + &*p;
                let projected = m.project_native(&shifted)?;
                *p = shifted - &projected;
                current = projected;
            }
            if (&current - &before).norm() < DYKSTRA_TOL {
                return Ok(current);
            }
        }
        let gap = members
            .iter()
            .map(|m| m.distance(&current))
            .fold(0.0, f64::max);
        Err(Error::ProjectionConvergence {
            gap,
            iters: DYKSTRA_MAX_SWEEPS,
        })
    }

    /// Projection of `x` onto the image `sigma^T U`, returned as
    /// `(z, u)` with `z = sigma^T u`, `u in U`.
    pub fn project_sigma_image_with_weights(
        &self,
        sigma_t: &DMatrix<f64>,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let st = sigma_t.transpose();

        match &self.family {
            Family::FullSpace => {
                let u = st
                    .clone()
                    .lu()
                    .solve(x)
                    .ok_or(Error::SingularSigma { t: f64::NAN })?;
                return Ok((x.clone(), u));
            }
            // sigma^T {u : n.u <= b} = {z : (sigma^{-1} n).z <= b}: still a
            // halfspace, so the projection is closed form.
            Family::Halfspace { normal, offset } => {
                let m = sigma_t
                    .clone()
                    .lu()
                    .solve(normal)
                    .ok_or(Error::SingularSigma { t: f64::NAN })?;
                let excess = m.dot(x) - offset;
                let z = if excess <= 0.0 {
                    x.clone()
                } else {
                    x - &m * (excess / m.norm_squared())
                };
                let u = st
                    .clone()
                    .lu()
                    .solve(&z)
                    .ok_or(Error::SingularSigma { t: f64::NAN })?;
                return Ok((z, u));
            }
            _ => {}
        }

        // Diagonal sigma maps boxes/orthants to boxes: componentwise clamp.
        if is_diagonal(sigma_t) {
            let s: Vec<f64> = (0..self.dim).map(|i| sigma_t[(i, i)]).collect();
            let bounds = match &self.family {
                Family::NonnegOrthant => Some((vec![0.0; self.dim], vec![f64::INFINITY; self.dim])),
                Family::Box { lo, hi } => {
                    Some((lo.iter().cloned().collect(), hi.iter().cloned().collect()))
                }
                _ => None,
            };
            if let Some((lo, hi)) = bounds {
                let mut z = DVector::zeros(self.dim);
                let mut u = DVector::zeros(self.dim);
                for i in 0..self.dim {
                    let (mut zl, mut zh) = (s[i] * lo[i], s[i] * hi[i]);
                    if zl > zh {
                        std::mem::swap(&mut zl, &mut zh);
                    }
                    z[i] = x[i].clamp(zl, zh);
                    u[i] = z[i] / s[i];
                }
                return Ok((z, u));
            }
        }

        self.project_sigma_image_pgd(sigma_t, x)
    }

    /// Projection of `x` onto `sigma^T U`.
    pub fn project_sigma_image(
        &self,
        sigma_t: &DMatrix<f64>,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        self.project_sigma_image_with_weights(sigma_t, x)
            .map(|(z, _)| z)
    }

    /// Minimize `0.5 ||x - sigma^T u||^2` over `u in U` by projected gradient
    /// with step `1 / lambda_max(sigma sigma^T)`.
    fn project_sigma_image_pgd(
        &self,
        sigma_t: &DMatrix<f64>,
        x: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let st = sigma_t.transpose();
        let gram = sigma_t * &st;
        let lip = gram
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        if !(lip > 0.0) {
            return Err(Error::SingularSigma { t: f64::NAN });
        }
        let step = 1.0 / lip;
        let unconstrained = st
            .clone()
            .lu()
            .solve(x)
            .ok_or(Error::SingularSigma { t: f64::NAN })?;
        let mut u = self.project_native(&unconstrained)?;
        for _ in 0..PGD_MAX_ITERS {
            let grad = sigma_t * (&st * &u - x);
            let next = self.project_native(&(&u - &grad * step))?;
            let delta = (&next - &u).norm();
            u = next;
            if delta < PGD_TOL {
                return Ok((&st * &u, u));
            }
        }
        let grad = sigma_t * (&st * &u - x);
        let gap = (&u - self.project_native(&(&u - &grad * step))?).norm();
        Err(Error::ProjectionConvergence {
            gap,
            iters: PGD_MAX_ITERS,
        })
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}
