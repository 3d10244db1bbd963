//! Properties of neighbor graphs and their strongly connected decomposition.

use distobs::graph::NeighborGraph;
use distobs::linalg::rank;
use proptest::prelude::*;

fn graph() -> impl Strategy<Value = NeighborGraph> {
    (1usize..=6).prop_flat_map(|m| {
        proptest::collection::vec(proptest::bool::weighted(0.3), m * m).prop_map(move |bits| {
            let arcs = (0..m)
                .flat_map(|j| (0..m).map(move |i| (j, i)))
                .filter(|&(j, i)| j != i && bits[j * m + i]);
            NeighborGraph::new(m, arcs).unwrap()
        })
    })
}

/// A cycle through every vertex plus random chords.
fn strongly_connected() -> impl Strategy<Value = NeighborGraph> {
    (2usize..=6).prop_flat_map(|m| {
        proptest::collection::vec(proptest::bool::weighted(0.3), m * m).prop_map(move |bits| {
            let chords = (0..m)
                .flat_map(|j| (0..m).map(move |i| (j, i)))
                .filter(|&(j, i)| j != i && bits[j * m + i]);
            NeighborGraph::new(m, (0..m).map(|k| (k, (k + 1) % m)).chain(chords)).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn incidence_rows_sum_to_zero(g in graph()) {
        let d = g.incidence_transpose();
        for r in 0..d.nrows() {
            prop_assert_eq!(d.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn strongly_connected_incidence_has_rank_m_minus_one(g in strongly_connected()) {
        prop_assert!(g.is_strongly_connected());
        prop_assert_eq!(rank(&g.incidence_transpose()), g.m() - 1);
    }

    #[test]
    fn single_component_iff_strongly_connected(g in graph()) {
        prop_assert_eq!(g.scc_decompose().count() == 1, g.is_strongly_connected());
    }

    #[test]
    fn components_partition_and_condensation_is_acyclic(g in graph()) {
        let dec = g.scc_decompose();
        let mut seen: Vec<usize> = dec.components.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..g.m()).collect::<Vec<_>>());
        for (c, members) in dec.components.iter().enumerate() {
            for &v in members {
                prop_assert_eq!(dec.component_of[v], c);
            }
        }
        // components come in topological order, so arcs never point backwards
        for a in g.arcs() {
            prop_assert!(dec.component_of[a.from] <= dec.component_of[a.to]);
        }
    }

    #[test]
    fn every_weak_component_has_a_source(g in graph()) {
        let dec = g.scc_decompose();
        for weak in g.weak_components() {
            prop_assert!(weak.iter().any(|&v| dec.is_source(dec.component_of[v])));
        }
    }

    #[test]
    fn components_are_strongly_connected_when_induced(g in graph()) {
        for members in &g.scc_decompose().components {
            prop_assert!(g.induced(members).unwrap().is_strongly_connected());
        }
    }
}
