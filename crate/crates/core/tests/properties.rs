use owl_core::graph;
use owl_core::numerics::{self, Mat, Rng};
use owl_core::prox::{self, IstaProblem, ProxKind};
use owl_core::unroll;
use proptest::prelude::*;

fn seeded(seed: u64, r: usize, c: usize) -> Mat {
    Mat::randn(r, c, &mut Rng::new(seed))
}

#[test]
fn laplacian_quadratic_form_is_edge_sum() {
    for seed in 0..20 {
        let x = seeded(seed, 15, 3);
        let s = graph::knn_similarity(&x, 4).unwrap();
        let l = graph::raw_laplacian(&s).unwrap();
        let v = seeded(seed + 100, 15, 1);
        let q = v.t_matmul(&l.matmul(&v).unwrap()).unwrap()[(0, 0)];
        let mut edges = 0.0;
        for i in 0..15 {
            for j in 0..15 {
                edges += 0.5 * s[(i, j)] * (v[(i, 0)] - v[(j, 0)]).powi(2);
            }
        }
        assert!((q - edges).abs() < 1e-9 * edges.max(1.0), "seed {seed}");
        let (lo, hi) = numerics::symmetric_eigen_extremes(&l).unwrap();
        assert!(lo > -1e-9 && hi > 0.0);
    }
}

#[test]
fn scaled_operators_have_unit_norm() {
    for seed in 0..20 {
        let x = seeded(seed, 24, 4);
        for g in [
            graph::knn_laplacian(&x, 5).unwrap(),
            graph::hypergraph_laplacian(&x, 5).unwrap(),
        ] {
            let m = g.matrix();
            assert!(m.is_symmetric(1e-12));
            let n = numerics::spectral_norm(m, 2000, 1e-14).unwrap();
            assert!(n <= 1.0 + 1e-9 && n > 0.99, "seed {seed}: {n}");
            assert!((g.spectral_norm() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn closed_forms_match_grid_oracle() {
    let mut rng = Rng::new(7);
    for _ in 0..1000 {
        let x = Mat::randn(2, 3, &mut rng).scale(2.0);
        let theta = rng.uniform_range(0.0, 2.0);
        for kind in [ProxKind::SoftThreshold, ProxKind::RowGroupThreshold] {
            let closed = kind.apply(&x, theta).unwrap();
            let grid = prox::prox_oracle(&x, theta, kind, 3.0, 1e-4);
            assert!(closed.sub(&grid).unwrap().max_abs() < 1e-3);
        }
    }
}

#[test]
fn ista_traces_descend_to_reference() {
    for seed in 0..20u64 {
        let mut rng = Rng::new(seed);
        let n = 8 + rng.below(57);
        let k = 2 + rng.below(4);
        let x = Mat::randn(n, 6, &mut rng);
        let d = unroll::random_dictionary(k, 6, &mut rng);
        let g = if seed % 2 == 0 {
            Some(graph::knn_laplacian(&x, 3).unwrap())
        } else {
            None
        };
        let kind = if seed % 3 == 0 {
            ProxKind::RowGroupThreshold
        } else {
            ProxKind::SoftThreshold
        };
        let alpha = if g.is_some() { 0.7 } else { 0.0 };
        let p = IstaProblem::new(x, d, alpha, 0.1, g, kind).unwrap();
        let sol = prox::ista_solve(&p, 1000, 1e-12).unwrap();
        for w in sol.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "seed {seed}");
        }
        let mut z = Mat::zeros(p.n(), p.k());
        for _ in 0..5000 {
            z = prox::ista_step(&p, &z).unwrap();
        }
        let reference = p.objective(&z).unwrap();
        assert!(
            (sol.trace.last().unwrap() - reference).abs() < 1e-4,
            "seed {seed}"
        );
    }
}

proptest! {
    #[test]
    fn prox_is_non_expansive(seed in 0u64..10_000, theta in 0.0f64..3.0) {
        let a = seeded(seed, 4, 3).scale(2.0);
        let b = seeded(seed ^ 0xff, 4, 3).scale(2.0);
        for kind in [ProxKind::SoftThreshold, ProxKind::RowGroupThreshold] {
            let pa = kind.apply(&a, theta).unwrap();
            let pb = kind.apply(&b, theta).unwrap();
            let lhs = pa.sub(&pb).unwrap().frobenius_norm();
            prop_assert!(lhs <= a.sub(&b).unwrap().frobenius_norm() + 1e-12);
        }
    }

    #[test]
    fn moreau_envelope_lower_bounds_the_function(seed in 0u64..10_000, mu in 0.05f64..2.0, theta in 0.0f64..2.0) {
        let x = seeded(seed, 3, 3);
        for kind in [ProxKind::SoftThreshold, ProxKind::RowGroupThreshold] {
            let env = prox::moreau_envelope(&x, mu, theta, kind).unwrap();
            prop_assert!(env <= theta * kind.penalty(&x) + 1e-12);
            prop_assert!(env >= -1e-12);
        }
    }

    #[test]
    fn laplacian_rows_sum_to_zero(seed in 0u64..10_000, k in 1usize..6) {
        let x = seeded(seed, 12, 3);
        let g = graph::knn_laplacian(&x, k).unwrap();
        let m = g.matrix();
        for i in 0..12 {
            prop_assert!(m.row(i).iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
