//! Random instance generators shared by the integration tests.

#![allow(dead_code)]

use distobs::graph::NeighborGraph;
use distobs::linalg::{is_jointly_observable, Plant};
use nalgebra::{dmatrix, DMatrix};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A Hamiltonian cycle through a random permutation plus random extra arcs.
pub fn strongly_connected(m: usize, rng: &mut impl Rng) -> NeighborGraph {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut arcs: Vec<(usize, usize)> = (0..m).filter(|_| m > 1).map(|k| (order[k], order[(k + 1) % m])).collect();
    for i in 0..m {
        for j in 0..m {
            if i != j && rng.random_bool(0.3) {
                arcs.push((i, j));
            }
        }
    }
    arcs.sort();
    arcs.dedup();
    NeighborGraph::new(m, arcs).unwrap()
}

/// Random `A` and one-row channels, resampled until jointly observable.
/// With `sparse`, each channel sees only a couple of state coordinates so
/// individual observability usually fails.
pub fn jointly_observable(n: usize, m: usize, sparse: bool, rng: &mut impl Rng) -> Plant {
    loop {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c: Vec<DMatrix<f64>> = (0..m)
            .map(|_| {
                DMatrix::from_fn(1, n, |_, _| {
                    if !sparse || rng.random_bool(0.4) {
                        rng.random_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
            })
            .collect();
        if c.iter().any(|c| c.iter().all(|&v| v == 0.0)) {
            continue;
        }
        let plant = Plant::new(a, c).unwrap();
        if is_jointly_observable(&plant) {
            return plant;
        }
    }
}

/// The nilpotent three-state example: neither channel alone is observable.
pub fn e1_plant(shift: f64) -> Plant {
    let a = dmatrix![0.0, 1.0, 0.0; 0.0, 0.0, 0.0; 0.0, 0.0, 0.0] + DMatrix::identity(3, 3) * shift;
    Plant::new(a, vec![dmatrix![0.0, 0.0, 1.0], dmatrix![1.0, 0.0, 0.0]]).unwrap()
}
