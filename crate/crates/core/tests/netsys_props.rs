//! Properties of the Kronecker-augmented error system and its gains.

mod common;

use distobs::netsys::{
    assemble_h, attempt_rng, build_network_system, find_generic_gains, gain_directions, gain_vector,
    kron_ctrb_transform, sample_gains,
};
use distobs::linalg::{krylov, max_abs, rank};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_rows_of_h_sum_to_the_local_observer_matrix(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=4);
        let graph = common::strongly_connected(m, &mut rng);
        let plant = common::jointly_observable(n, m, false, &mut rng);
        let ns = build_network_system(&plant, &graph).unwrap();
        let gains = sample_gains(&ns, 1.0, &mut attempt_rng(seed, 0));
        let h = assemble_h(&ns, &gains).unwrap();
        for i in 0..m {
            let mut sum = DMatrix::zeros(n, n);
            for j in 0..m {
                let block = h.view((i * n, j * n), (n, n)).clone_owned();
                if !graph.neighbors(i).contains(&j) {
                    prop_assert_eq!(max_abs(&block), 0.0);
                }
                sum += block;
            }
            let local = plant.a() - &gains.k[i] * plant.channel(i);
            prop_assert!(max_abs(&(sum - local)) <= 1e-12);
        }
    }

    #[test]
    fn h_is_affine_in_the_gain_vector(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(2..=4);
        let graph = common::strongly_connected(m, &mut rng);
        let plant = common::jointly_observable(n, m, false, &mut rng);
        let ns = build_network_system(&plant, &graph).unwrap();
        let gains = sample_gains(&ns, 1.0, &mut attempt_rng(seed, 1));
        let xi = gain_vector(&ns, &gains).unwrap();
        let dirs = gain_directions(&ns);
        prop_assert_eq!(dirs.len(), xi.len());
        let mut h = ns.a_tilde().clone();
        for (d, x) in dirs.iter().zip(xi.iter()) {
            h += d * *x;
        }
        prop_assert!(max_abs(&(h - assemble_h(&ns, &gains).unwrap())) <= 1e-12);
    }

    #[test]
    fn kron_transform_is_unit_triangular_and_exact(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=5);
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let f = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(m, 1, |_, _| rng.random_range(-1.0..1.0));
        let (t, residual) = kron_ctrb_transform(&a, &f, &g);
        prop_assert!(residual <= 1e-12);
        for r in 0..n * m {
            prop_assert_eq!(t[(r, r)], 1.0);
            for c in 0..r {
                prop_assert_eq!(t[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn strongly_connected_network_is_jointly_controllable_and_observable(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(1..=4);
        let graph = common::strongly_connected(m, &mut rng);
        let plant = common::jointly_observable(n, m, true, &mut rng);
        let ns = build_network_system(&plant, &graph).unwrap();
        prop_assert!(ns.is_jointly_controllable());
        prop_assert!(ns.is_jointly_observable());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generic_gains_give_index_m_without_diagonal_feedback(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(1..=3);
        let m = rng.random_range(2..=4);
        let graph = common::strongly_connected(m, &mut rng);
        let plant = common::jointly_observable(n, m, true, &mut rng);
        let (gains, cert) = find_generic_gains(&plant, &graph, seed, 20).unwrap();
        prop_assert!(cert.passed(m));
        let ns = build_network_system(&plant, &graph).unwrap();
        let h0 = assemble_h(&ns, &gains.without_diagonal()).unwrap();
        for p in 0..m {
            prop_assert_eq!(rank(&krylov(&h0, ns.b(p), m)), n * m);
        }
    }
}
