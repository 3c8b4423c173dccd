//! Brute-force oracle for the image projection: multi-stage grid
//! minimization of `||x - sigma^T u||` over the feasible set at an effective
//! resolution of 1e-3, independent of the projection solver.

use beq_core::rng::CounterRng;
use beq_core::ConvexSet;
use nalgebra::{DMatrix, DVector};

fn v2(a: f64, b: f64) -> DVector<f64> {
    DVector::from_vec(vec![a, b])
}

/// Grid search over `[center - half, center + half]^2` restricted to the
/// feasible set; returns the best feasible weight vector, if any.
fn grid_search(
    set: &ConvexSet,
    sigma_t: &DMatrix<f64>,
    x: &DVector<f64>,
    center: &DVector<f64>,
    half: f64,
    step: f64,
) -> Option<(DVector<f64>, f64)> {
    let st = sigma_t.transpose();
    let n = (2.0 * half / step).round() as i64;
    let mut best: Option<(DVector<f64>, f64)> = None;
    for i in 0..=n {
        for j in 0..=n {
            let u = v2(
                center[0] - half + i as f64 * step,
                center[1] - half + j as f64 * step,
            );
            if !set.contains(&u, 0.0) {
                continue;
            }
            let d = (&st * &u - x).norm();
            if best.as_ref().is_none_or(|(_, bd)| d < *bd) {
                best = Some((u, d));
            }
        }
    }
    best
}

fn brute_force_projection(
    set: &ConvexSet,
    sigma_t: &DMatrix<f64>,
    x: &DVector<f64>,
    seed_center: &DVector<f64>,
) -> DVector<f64> {
    // Staged refinement with final resolution 1e-3; the stage windows are
    // sized so that convexity keeps the true cell inside every refinement.
    let stages = [(2.5, 0.05), (0.3, 0.01), (0.06, 0.001)];
    let mut center = seed_center.clone();
    let mut found = None;
    for (half, step) in stages {
        if let Some((u, _)) = grid_search(set, sigma_t, x, &center, half, step) {
            center = u.clone();
            found = Some(u);
        }
    }
    let u = found.expect("feasible grid point must exist near the witness");
    sigma_t.transpose() * u
}

fn random_sigma(rng: &mut CounterRng) -> DMatrix<f64> {
    // Well-conditioned: dominant diagonal with small off-diagonal coupling.
    let d0 = 0.3 + 0.4 * rng.uniform_open();
    let d1 = 0.3 + 0.4 * rng.uniform_open();
    let o0 = 0.2 * (rng.uniform_open() - 0.5);
    let o1 = 0.2 * (rng.uniform_open() - 0.5);
    DMatrix::from_row_slice(2, 2, &[d0, o0, o1, d1])
}

fn random_set(family: usize, rng: &mut CounterRng) -> ConvexSet {
    match family {
        0 => ConvexSet::full_space(2),
        1 => ConvexSet::nonneg_orthant(2),
        2 => {
            let l0 = -1.0 + 0.8 * rng.uniform_open();
            let l1 = -1.0 + 0.8 * rng.uniform_open();
            ConvexSet::boxed(
                v2(l0, l1),
                v2(l0 + 0.5 + rng.uniform_open(), l1 + 0.5 + rng.uniform_open()),
            )
            .unwrap()
        }
        3 => ConvexSet::ball(
            v2(
                0.6 * (rng.uniform_open() - 0.5),
                0.6 * (rng.uniform_open() - 0.5),
            ),
            0.4 + 0.8 * rng.uniform_open(),
        )
        .unwrap(),
        4 => ConvexSet::halfspace(
            v2(0.5 + rng.uniform_open(), 0.5 + rng.uniform_open()),
            0.3 + rng.uniform_open(),
        )
        .unwrap(),
        _ => {
            let ball = ConvexSet::ball(v2(0.0, 0.0), 1.0 + rng.uniform_open()).unwrap();
            let half = ConvexSet::halfspace(v2(1.0, 1.0), 0.5 + rng.uniform_open()).unwrap();
            ConvexSet::intersection(vec![ball, half], v2(0.0, 0.0)).unwrap()
        }
    }
}

#[test]
fn image_projection_matches_brute_force_grid() {
    let families = 6;
    let per_family = 50;
    for family in 0..families {
        for instance in 0..per_family {
            let mut rng = CounterRng::for_path(1337 + family as u64, instance as u64);
            let set = random_set(family, &mut rng);
            let sigma_t = random_sigma(&mut rng);
            // Target exposure near the witness image, plus a deliberate
            // infeasible push so the projection is nontrivial.
            let push = v2(
                2.0 * (rng.uniform_open() - 0.5),
                2.0 * (rng.uniform_open() - 0.5),
            );
            let x = sigma_t.transpose() * (set.witness() + &push * 0.8);

            let z = set
                .project_sigma_image(&sigma_t, &x)
                .unwrap_or_else(|e| panic!("family {family} instance {instance}: {e}"));
            let z_brute = brute_force_projection(&set, &sigma_t, &x, set.witness());

            // The minimization value must match within 2e-3 and the solver
            // may never be beaten by a feasible grid point.
            let (d, db) = ((&x - &z).norm(), (&x - &z_brute).norm());
            assert!(
                (d - db).abs() <= 2e-3,
                "family {family} instance {instance}: objective {d:.9} vs brute {db:.9}"
            );
            assert!(
                d <= db + 1e-9,
                "family {family} instance {instance}: {d} > {db}"
            );

            // Argmin positions agree up to the grid's tangential
            // quantization near active boundaries (O(sqrt(step)) there).
            let gap = (&z - &z_brute).norm();
            assert!(
                gap <= 5e-3,
                "family {family} instance {instance}: |z - brute| = {gap:.3e} (z = {z:?})"
            );
        }
    }
}

#[test]
fn image_projection_optimality_against_random_feasible_points() {
    // The returned point must (weakly) beat 100 random feasible points.
    for family in 1..6 {
        let mut rng = CounterRng::for_path(99, family as u64);
        let set = random_set(family, &mut rng);
        let sigma_t = random_sigma(&mut rng);
        let x = v2(0.9, -0.7);
        let z = set.project_sigma_image(&sigma_t, &x).unwrap();
        let d_star = (&x - &z).norm();
        for _ in 0..100 {
            let raw = v2(
                4.0 * (rng.uniform_open() - 0.5),
                4.0 * (rng.uniform_open() - 0.5),
            );
            let feasible = set.project_native(&raw).unwrap();
            let d = (&x - sigma_t.transpose() * feasible).norm();
            assert!(d_star <= d + 1e-8, "family {family}: {d_star} > {d}");
        }
    }
}

#[test]
fn image_projection_idempotent_through_sigma() {
    for family in 1..6 {
        let mut rng = CounterRng::for_path(7, family as u64);
        let set = random_set(family, &mut rng);
        let sigma_t = random_sigma(&mut rng);
        let x = v2(1.3, 0.4);
        let z = set.project_sigma_image(&sigma_t, &x).unwrap();
        let zz = set.project_sigma_image(&sigma_t, &z).unwrap();
        assert!(
            (&zz - &z).norm() < 1e-9,
            "family {family}: re-projection moved by {}",
            (&zz - &z).norm()
        );
    }
}
