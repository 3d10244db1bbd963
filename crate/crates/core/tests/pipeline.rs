//! Whole-pipeline properties: synthesized observers are local, reproduce
//! their certified spectrum, and the cascade rejects exactly the instances
//! whose source components are not jointly observable.

mod common;

use distobs::assembler::{error_matrix, synthesize, SpectrumRequest, Synthesis, SynthesisOptions};
use distobs::graph::NeighborGraph;
use distobs::io::SynthesisFile;
use distobs::linalg::{eigenvalues, stack_rows, Plant, C64};
use distobs::sim::{agent_decay, random_initial_state, simulate, SimOptions};
use distobs::spectra::{closed_loop, pairing_error, SpectrumSpec};
use distobs::Error;
use nalgebra::DMatrix;
use rand::Rng;

fn integer_spectrum(count: usize) -> SpectrumSpec {
    SpectrumSpec::new((1..=count).map(|k| C64::new(-(k as f64), 0.0)).collect()).unwrap()
}

fn explicit(plant: &Plant, graph: &NeighborGraph) -> SpectrumRequest {
    let n = plant.n();
    let specs = graph
        .scc_decompose()
        .components
        .iter()
        .map(|c| integer_spectrum(n * c.len() + c.len() - 1))
        .collect();
    SpectrumRequest::Explicit(specs)
}

/// Brute-force PBH: rank [lambda I - A; C] = n at every eigenvalue of A.
fn pbh_observable(a: &DMatrix<f64>, c: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let eig = a.clone().complex_eigenvalues();
    eig.iter().all(|&lambda| {
        let mut m = DMatrix::from_element(n + c.nrows(), n, C64::new(0.0, 0.0));
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = C64::new(if i == j { 0.0 } else { -a[(i, j)] }, 0.0);
            }
            m[(i, i)] = lambda - a[(i, i)];
        }
        for i in 0..c.nrows() {
            for j in 0..n {
                m[(n + i, j)] = C64::new(c[(i, j)], 0.0);
            }
        }
        let sv = m.svd(false, false).singular_values;
        let top = sv.iter().copied().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > 1e-8 * top.max(1.0)).count() == n
    })
}

fn check_certified(syn: &Synthesis) {
    for o in &syn.observers {
        let obs = &o.observer;
        let cert = &o.certificate;
        let target: Vec<C64> = cert.target.iter().map(|z| C64::new(z[0], z[1])).collect();
        let achieved: Vec<C64> = cert.achieved.iter().map(|z| C64::new(z[0], z[1])).collect();

        // locality of every stored block
        for &(i, k) in obs.h.keys().chain(obs.m_blocks.keys()) {
            assert!(obs.graph.neighbors(i).contains(&k), "block ({i}, {k}) is not local");
        }
        let eig = eigenvalues(&error_matrix(obs)).unwrap();
        assert!(pairing_error(&target, &eig) <= 1e-6);

        // rebuilding the closed loop from the compensator blocks
        let m = obs.agents();
        let hbar = if m == 1 {
            error_matrix(obs)
        } else {
            let ns = distobs::netsys::build_network_system(&obs.plant, &obs.graph).unwrap();
            let h = distobs::netsys::assemble_h(&ns, &obs.gains).unwrap();
            let (bp, cpq) = (ns.b(obs.p), ns.c_pq(obs.p, obs.q));
            closed_loop(&h, bp, cpq, &obs.compensator)
        };
        let rebuilt = eigenvalues(&hbar).unwrap();
        assert!(pairing_error(&achieved, &rebuilt) <= 1e-6);
        assert_eq!(hbar.nrows(), obs.plant.n() * m + m - 1);
    }
}

#[test]
fn random_instances_reproduce_their_certificates() {
    let mut rng = common::rng(77);
    for k in 0..6 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(2..=3);
        let graph = common::strongly_connected(m, &mut rng);
        let plant = common::jointly_observable(n, m, true, &mut rng);
        let syn = synthesize(&plant, &graph, &explicit(&plant, &graph), k, &SynthesisOptions::default()).unwrap();
        check_certified(&syn);

        let file = SynthesisFile::new(&plant, &graph, k, &syn);
        let (_, _, reloaded) = file.load().unwrap();
        check_certified(&reloaded);
    }
}

#[test]
fn complex_spectrum_is_assigned_by_a_real_observer() {
    let plant = common::e1_plant(0.0);
    let graph = NeighborGraph::cycle(2).unwrap();
    let spec = SpectrumSpec::new(vec![
        C64::new(-1.0, 1.0),
        C64::new(-1.0, -1.0),
        C64::new(-2.0, 0.0),
        C64::new(-3.0, 0.0),
        C64::new(-4.0, 2.0),
        C64::new(-4.0, -2.0),
        C64::new(-5.0, 0.0),
    ])
    .unwrap();
    let syn = synthesize(&plant, &graph, &SpectrumRequest::Explicit(vec![spec]), 3, &SynthesisOptions::default()).unwrap();
    check_certified(&syn);
    assert!(syn.observers[0].observer.closed_loop().unwrap().iter().all(|x| x.is_finite()));
}

#[test]
fn decay_rates_track_the_assigned_spectrum() {
    let mut rng = common::rng(9);
    for k in 0..3 {
        let n = rng.random_range(2..=3);
        let graph = NeighborGraph::cycle(2).unwrap();
        let plant = common::jointly_observable(n, 2, true, &mut rng);
        let syn = synthesize(&plant, &graph, &explicit(&plant, &graph), k, &SynthesisOptions::default()).unwrap();
        let (x0, z0) = random_initial_state(&plant, &syn, k);
        let opts = SimOptions {
            horizon: 10.0,
            dt: 1e-3,
            stride: 10,
        };
        let trace = simulate(&plant, &syn, &x0, &z0, &opts).unwrap();
        // slowest assigned eigenvalue is -1
        for i in 0..2 {
            let rate = agent_decay(&trace, i).unwrap().rate;
            assert!(rate <= -1.0 + 0.1, "instance {k} agent {i}: rate {rate}");
        }
    }
}

#[test]
fn cascade_fails_exactly_when_a_source_is_unobservable() {
    let mut rng = common::rng(31);
    let (mut accepted, mut rejected) = (0, 0);
    for k in 0..24 {
        let n = rng.random_range(1..=3);
        let m = rng.random_range(2..=3);
        let arcs: Vec<(usize, usize)> = (0..m)
            .flat_map(|j| (0..m).map(move |i| (j, i)))
            .filter(|&(j, i)| j != i)
            .filter(|_| rng.random_bool(0.4))
            .collect();
        let graph = NeighborGraph::new(m, arcs).unwrap();
        // sparse dynamics read through coordinate channels: sources are
        // observable in some instances and not in others
        let a = DMatrix::from_fn(n, n, |_, _| if rng.random_bool(0.4) { rng.random_range(-2.0..2.0) } else { 0.0 });
        let channels = (0..m)
            .map(|_| {
                let k = rng.random_range(0..n);
                DMatrix::from_fn(1, n, |_, j| if j == k { 1.0 } else { 0.0 })
            })
            .collect();
        let plant = Plant::new(a, channels).unwrap();
        let dec = graph.scc_decompose();
        let expected_ok = (0..dec.count()).filter(|&c| dec.is_source(c)).all(|c| {
            let rows: Vec<DMatrix<f64>> = dec.components[c].iter().map(|&i| plant.channel(i).clone()).collect();
            pbh_observable(plant.a(), &stack_rows(&rows, n))
        });
        match synthesize(&plant, &graph, &explicit(&plant, &graph), k, &SynthesisOptions::default()) {
            Ok(syn) => {
                assert!(expected_ok, "instance {k} synthesized with an unobservable source");
                check_certified(&syn);
                accepted += 1;
            }
            Err(Error::SourceNotObservable(_)) => {
                assert!(!expected_ok, "instance {k} rejected although every source is observable");
                rejected += 1;
            }
            Err(e) => panic!("instance {k}: {e}"),
        }
    }
    assert!(accepted > 0 && rejected > 0, "accepted {accepted}, rejected {rejected}");
}
