//! The ADMM solver against an independent dual projected-gradient oracle.

mod common;

use common::{dual_pg_oracle, infeasibility, random_qp};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtg_core::qp::{self, kkt_residuals, QpSettings, QpStatus};

#[test]
fn oracle_is_optimal_on_random_problems() {
    for seed in 0..40 {
        let p = random_qp(seed);
        let (x, y) = dual_pg_oracle(&p);
        let r = kkt_residuals(&p, &x, &y).unwrap();
        assert!(r.primal < 1e-7, "seed {seed}: oracle primal residual {}", r.primal);
        assert!(r.dual < 1e-9, "seed {seed}: oracle dual residual {}", r.dual);
        assert!(r.complementarity < 1e-7, "seed {seed}: complementarity {}", r.complementarity);
    }
}

#[test]
fn solver_matches_oracle() {
    for seed in 0..100 {
        let p = random_qp(seed);
        let sol = qp::solve(&p, 1e-9, 1e-9, 20_000).unwrap();
        assert_eq!(sol.status, QpStatus::Solved, "seed {seed}");
        let (xo, _) = dual_pg_oracle(&p);
        let diff = (&sol.x - &xo).amax();
        assert!(diff <= 1e-5, "seed {seed}: |x − x_oracle| = {diff:e}");
        let r = kkt_residuals(&p, &sol.x, &sol.y).unwrap();
        assert!(r.primal.max(r.dual).max(r.complementarity) <= 1e-6, "seed {seed}: {r:?}");
    }
}

#[test]
fn solution_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for seed in 0..20 {
        let p = random_qp(seed);
        let sol = qp::solve(&p, 1e-9, 1e-9, 20_000).unwrap();
        let f = p.objective(&sol.x);
        let mut tried = 0;
        for _ in 0..2000 {
            let scale = rng.random_range(1e-3..1.0);
            let cand = DVector::from_fn(p.n(), |i, _| sol.x[i] + scale * (rng.random::<f64>() - 0.5));
            if infeasibility(&p, &cand) > 0.0 {
                continue;
            }
            tried += 1;
            assert!(p.objective(&cand) >= f - 1e-9, "seed {seed}: feasible point improves the objective");
        }
        assert!(tried > 0 || p.m() > 0);
    }
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    for seed in 0..10 {
        let p = random_qp(seed);
        let a = qp::solve_with(&p, QpSettings::default(), None).unwrap();
        let b = qp::solve_with(&p, QpSettings::default(), None).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn warm_start_at_the_solution_needs_fewer_iterations() {
    let mut cold = Vec::new();
    let mut warm = Vec::new();
    for seed in 0..30 {
        let p = random_qp(seed);
        let s = qp::solve_with(&p, QpSettings::default(), None).unwrap();
        let w = qp::solve_with(&p, QpSettings::default(), Some((&s.x, &s.y))).unwrap();
        assert_eq!(w.status, QpStatus::Solved);
        assert!((&w.x - &s.x).amax() < 1e-6);
        cold.push(s.iterations);
        warm.push(w.iterations);
    }
    cold.sort_unstable();
    warm.sort_unstable();
    assert!(warm[15] <= cold[15], "median warm {} vs cold {}", warm[15], cold[15]);
}

#[test]
fn warm_start_helps_on_slowly_changing_sequences() {
    let mut cold = Vec::new();
    let mut warm = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let settings = QpSettings { max_iters: 20_000, ..QpSettings::default() };
    for seed in 0..50 {
        let mut p = random_qp(1000 + seed);
        let mut prev = qp::solve_with(&p, settings, None).unwrap();
        for _ in 0..5 {
            p.g = p.g.map(|v| v * (1.0 + 0.01 * (rng.random::<f64>() - 0.5)));
            for i in 0..p.m() {
                let f = 1.0 + 0.01 * (rng.random::<f64>() - 0.5);
                p.l[i] *= f;
                p.u[i] *= f;
            }
            let c = qp::solve_with(&p, settings, None).unwrap();
            let w = qp::solve_with(&p, settings, Some((&prev.x, &prev.y))).unwrap();
            assert_eq!((c.status, w.status), (QpStatus::Solved, QpStatus::Solved), "seed {seed}");
            let d = (&c.x - &w.x).amax();
            assert!(d < 1e-5, "seed {seed}: {d:e}");
            cold.push(c.iterations);
            warm.push(w.iterations);
            prev = w;
        }
    }
    cold.sort_unstable();
    warm.sort_unstable();
    let mid = cold.len() / 2;
    assert!(warm[mid] <= cold[mid], "median warm {} vs cold {}", warm[mid], cold[mid]);
}

#[test]
fn dump_round_trip_preserves_random_problems() {
    for seed in 0..20 {
        let p = random_qp(seed);
        let q = qp::parse_dump(&qp::dump(&p)).unwrap();
        assert_eq!(p.h, q.h);
        assert_eq!(p.g, q.g);
        assert_eq!(p.a, q.a);
        assert_eq!(p.l, q.l);
        assert_eq!(p.u, q.u);
    }
}
