//! Directed neighbor graphs.
//!
//! Vertices are agents `0..m`. An arc `j -> i` means agent `i` receives the
//! estimator state of agent `j`. Every agent is implicitly its own neighbor;
//! self-arcs are never stored. Labels are 0-based in the API and 1-based in
//! serialized files and user-facing messages.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An arc `from -> to`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    m: usize,
    // keyed (to, from) so iteration is the canonical (i, j) order
    arcs: BTreeSet<(usize, usize)>,
}

impl NeighborGraph {
    /// Builds a graph from `(from, to)` pairs. Duplicates are merged.
    pub fn new(m: usize, arcs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidGraph("graph must have at least one vertex".into()));
        }
        let mut set = BTreeSet::new();
        for (from, to) in arcs {
            if from >= m || to >= m {
                return Err(Error::InvalidGraph(format!(
                    "arc {} -> {} out of range for m = {m}",
                    from + 1,
                    to + 1
                )));
            }
            if from == to {
                return Err(Error::InvalidGraph(format!(
                    "self-arc at vertex {} (self-neighborship is implicit)",
                    from + 1
                )));
            }
            set.insert((to, from));
        }
        Ok(Self { m, arcs: set })
    }

    /// Directed cycle `0 -> 1 -> ... -> m-1 -> 0`. For `m = 2` this is the
    /// two-cycle; for `m = 1` it has no arcs.
    pub fn cycle(m: usize) -> Result<Self> {
        let arcs = if m >= 2 {
            (0..m).map(|i| (i, (i + 1) % m)).collect()
        } else {
            Vec::new()
        };
        Self::new(m, arcs)
    }

    /// Directed path `0 -> 1 -> ... -> m-1`.
    pub fn path(m: usize) -> Result<Self> {
        Self::new(m, (1..m).map(|i| (i - 1, i)))
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn has_arc(&self, from: usize, to: usize) -> bool {
        self.arcs.contains(&(to, from))
    }

    /// Arcs in canonical order: sorted by `(to, from)`.
    pub fn arcs(&self) -> impl Iterator<Item = Arc> + '_ {
        self.arcs.iter().map(|&(to, from)| Arc { from, to })
    }

    /// Distinct neighbors of `i` (in-neighbors), ascending.
    pub fn distinct_neighbors(&self, i: usize) -> Vec<usize> {
        self.arcs
            .range((i, 0)..(i + 1, 0))
            .map(|&(_, from)| from)
            .collect()
    }

    /// Neighbor set of `i`, including `i` itself, ascending.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let mut v = self.distinct_neighbors(i);
        v.push(i);
        v.sort_unstable();
        v
    }

    fn successors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.m];
        for a in self.arcs() {
            out[a.from].push(a.to);
        }
        out
    }

    /// Transpose of the incidence matrix: one row per arc in canonical order,
    /// `-1` in the receiving column and `+1` in the sending column.
    pub fn incidence_transpose(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.arcs.len(), self.m);
        for (row, a) in self.arcs().enumerate() {
            c[(row, a.to)] = -1.0;
            c[(row, a.from)] = 1.0;
        }
        c
    }

    /// Row of the transposed incidence matrix for arc `from -> to`.
    pub fn incidence_row(&self, from: usize, to: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.m];
        r[to] = -1.0;
        r[from] = 1.0;
        r
    }

    pub fn is_strongly_connected(&self) -> bool {
        if self.m == 1 {
            return true;
        }
        let forward = self.successors();
        let mut backward = vec![Vec::new(); self.m];
        for a in self.arcs() {
            backward[a.to].push(a.from);
        }
        reaches_all(&forward, 0) && reaches_all(&backward, 0)
    }

    pub fn is_weakly_connected(&self) -> bool {
        self.weak_components().len() == 1
    }

    /// Vertex sets of the maximal weakly connected subgraphs, each ascending,
    /// ordered by smallest member.
    pub fn weak_components(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for a in self.arcs() {
            adj[a.from].push(a.to);
            adj[a.to].push(a.from);
        }
        let mut seen = vec![false; self.m];
        let mut out = Vec::new();
        for s in 0..self.m {
            if seen[s] {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(v) = stack.pop() {
                comp.push(v);
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Subgraph induced by `vertices` (relabelled `0..vertices.len()` in the
    /// given order).
    pub fn induced(&self, vertices: &[usize]) -> Result<Self> {
        let local: BTreeMap<usize, usize> =
            vertices.iter().enumerate().map(|(k, &v)| (v, k)).collect();
        let arcs = self.arcs().filter_map(|a| {
            Some((*local.get(&a.from)?, *local.get(&a.to)?))
        });
        Self::new(vertices.len(), arcs)
    }

    pub fn scc_decompose(&self) -> SccDecomposition {
        let raw = tarjan(&self.successors());
        let mut comp_of = vec![0; self.m];
        for (c, members) in raw.iter().enumerate() {
            for &v in members {
                comp_of[v] = c;
            }
        }
        let q = raw.len();
        let mut dag = BTreeSet::new();
        for a in self.arcs() {
            let (cf, ct) = (comp_of[a.from], comp_of[a.to]);
            if cf != ct {
                dag.insert((cf, ct));
            }
        }

        // Kahn's algorithm, always releasing the ready component with the
        // smallest member so the order is canonical.
        let min_label: Vec<usize> = raw.iter().map(|c| *c.iter().min().unwrap()).collect();
        let mut indeg = vec![0usize; q];
        for &(_, t) in &dag {
            indeg[t] += 1;
        }
        let mut ready: BTreeSet<(usize, usize)> = (0..q)
            .filter(|&c| indeg[c] == 0)
            .map(|c| (min_label[c], c))
            .collect();
        let mut order = Vec::with_capacity(q);
        while let Some(&first) = ready.iter().next() {
            ready.remove(&first);
            let c = first.1;
            order.push(c);
            for &(f, t) in &dag {
                if f == c {
                    indeg[t] -= 1;
                    if indeg[t] == 0 {
                        ready.insert((min_label[t], t));
                    }
                }
            }
        }
        let mut new_index = vec![0; q];
        for (k, &c) in order.iter().enumerate() {
            new_index[c] = k;
        }
        let components: Vec<Vec<usize>> = order
            .iter()
            .map(|&c| {
                let mut v = raw[c].clone();
                v.sort_unstable();
                v
            })
            .collect();
        let condensation: BTreeSet<(usize, usize)> = dag
            .iter()
            .map(|&(f, t)| (new_index[f], new_index[t]))
            .collect();
        let mut component_of = vec![0; self.m];
        for (k, members) in components.iter().enumerate() {
            for &v in members {
                component_of[v] = k;
            }
        }
        let sources = (0..q)
            .filter(|&k| !condensation.iter().any(|&(_, t)| t == k))
            .collect();
        SccDecomposition {
            components,
            condensation,
            sources,
            component_of,
        }
    }
}

fn reaches_all(adj: &[Vec<usize>], start: usize) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == adj.len()
}

/// Iterative Tarjan; components come out in reverse topological order.
fn tarjan(adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut comps = Vec::new();
    let mut next = 0;

    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut edge)) = call.last_mut() {
            if let Some(&w) = adj[v].get(*edge) {
                *edge += 1;
                if index[w] == usize::MAX {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comps.push(comp);
            }
        }
    }
    comps
}

/// Strongly connected components in topological order of the condensation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SccDecomposition {
    /// Vertex sets, each ascending; index = position in topological order.
    pub components: Vec<Vec<usize>>,
    /// Arcs `(from_component, to_component)` of the condensation DAG.
    pub condensation: BTreeSet<(usize, usize)>,
    /// Components with no incoming condensation arcs, ascending.
    pub sources: Vec<usize>,
    /// Component index of every vertex.
    pub component_of: Vec<usize>,
}

impl SccDecomposition {
    pub fn count(&self) -> usize {
        self.components.len()
    }

    pub fn is_source(&self, c: usize) -> bool {
        self.sources.contains(&c)
    }
}

/// On-disk form: `{"m": int, "arcs": [[j, i], ...]}` with 1-based labels,
/// each pair meaning arc `j -> i`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct GraphFile {
    pub m: usize,
    pub arcs: Vec<[usize; 2]>,
}

impl From<&NeighborGraph> for GraphFile {
    fn from(g: &NeighborGraph) -> Self {
        Self {
            m: g.m,
            arcs: g.arcs().map(|a| [a.from + 1, a.to + 1]).collect(),
        }
    }
}

impl TryFrom<GraphFile> for NeighborGraph {
    type Error = Error;

    fn try_from(f: GraphFile) -> Result<Self> {
        let mut arcs = Vec::with_capacity(f.arcs.len());
        for [j, i] in f.arcs {
            if j == 0 || i == 0 {
                return Err(Error::InvalidGraph("labels are 1-based".into()));
            }
            arcs.push((j - 1, i - 1));
        }
        NeighborGraph::new(f.m, arcs)
    }
}
