//! The Kronecker-augmented error system, its decentralized gains and the
//! generic-gain search that certifies controllability of `(H, B_p)` and
//! observability of `(C_pq, H)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NeighborGraph;
use crate::linalg::{
    controllability_index, inf_norm, is_complete, is_controllable, is_jointly_observable,
    is_observable, kron, matrix_from_rows, matrix_to_rows, stack_rows, Plant,
};

/// `(A~, {B_i}, {C_ij})` over the index set of agent/neighbor pairs.
#[derive(Debug, Clone)]
pub struct NetworkSystem {
    plant: Plant,
    graph: NeighborGraph,
    a_tilde: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    c_pairs: BTreeMap<(usize, usize), DMatrix<f64>>,
}

fn unit(m: usize, i: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(m, 1);
    e[(i, 0)] = 1.0;
    e
}

pub fn build_network_system(plant: &Plant, graph: &NeighborGraph) -> Result<NetworkSystem> {
    let (n, m) = (plant.n(), plant.m());
    if graph.m() != m {
        return Err(Error::DimensionMismatch(format!(
            "plant has {m} channels but graph has {} vertices",
            graph.m()
        )));
    }
    let eye = DMatrix::identity(n, n);
    let a_tilde = kron(&DMatrix::identity(m, m), plant.a());
    let b: Vec<_> = (0..m).map(|i| kron(&unit(m, i), &eye)).collect();
    let mut c_pairs = BTreeMap::new();
    for i in 0..m {
        c_pairs.insert((i, i), plant.channel(i) * b[i].transpose());
        for j in graph.distinct_neighbors(i) {
            let row = DMatrix::from_row_slice(1, m, &graph.incidence_row(j, i));
            c_pairs.insert((i, j), kron(&row, &eye));
        }
    }
    Ok(NetworkSystem {
        plant: plant.clone(),
        graph: graph.clone(),
        a_tilde,
        b,
        c_pairs,
    })
}

impl NetworkSystem {
    pub fn n(&self) -> usize {
        self.plant.n()
    }

    pub fn m(&self) -> usize {
        self.plant.m()
    }

    pub fn plant(&self) -> &Plant {
        &self.plant
    }

    pub fn graph(&self) -> &NeighborGraph {
        &self.graph
    }

    pub fn a_tilde(&self) -> &DMatrix<f64> {
        &self.a_tilde
    }

    pub fn b(&self, i: usize) -> &DMatrix<f64> {
        &self.b[i]
    }

    /// `C_ij`; panics if `j` is not a neighbor of `i`.
    pub fn c_pair(&self, i: usize, j: usize) -> &DMatrix<f64> {
        &self.c_pairs[&(i, j)]
    }

    /// All pairs `(i, j)` with `j` in the neighbor set of `i`, sorted.
    pub fn index_set(&self) -> Vec<(usize, usize)> {
        self.c_pairs.keys().copied().collect()
    }

    /// Index set without the diagonal pairs.
    pub fn off_diagonal_index_set(&self) -> Vec<(usize, usize)> {
        self.c_pairs.keys().copied().filter(|(i, j)| i != j).collect()
    }

    /// `C_pq` as seen by the compensator: `C_p` on the diagonal, otherwise
    /// the incidence block. Width is `s_p` or `n` respectively.
    pub fn c_pq(&self, p: usize, q: usize) -> &DMatrix<f64> {
        self.c_pair(p, q)
    }

    pub fn is_jointly_controllable(&self) -> bool {
        let nm = self.n() * self.m();
        let mut all = DMatrix::zeros(nm, 0);
        for b in &self.b {
            let c = all.ncols();
            all = all.insert_columns(c, b.ncols(), 0.0);
            all.view_mut((0, c), b.shape()).copy_from(b);
        }
        is_controllable(&self.a_tilde, &all)
    }

    pub fn is_jointly_observable(&self) -> bool {
        let blocks: Vec<_> = self.c_pairs.values().cloned().collect();
        is_observable(&stack_rows(&blocks, self.n() * self.m()), &self.a_tilde)
    }
}

/// Scalar neighbor gains `f_ij` and per-agent output injections `K_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainAssignment {
    pub f: BTreeMap<(usize, usize), f64>,
    pub k: Vec<DMatrix<f64>>,
}

impl GainAssignment {
    /// The block `F_ij`: `f_ij I_n` off the diagonal, `-K_i` on it.
    pub fn block(&self, i: usize, j: usize, n: usize) -> Result<DMatrix<f64>> {
        if i == j {
            self.k
                .get(i)
                .map(|k| -k)
                .ok_or(Error::MissingGain(i, i))
        } else {
            self.f
                .get(&(i, j))
                .map(|&f| DMatrix::identity(n, n) * f)
                .ok_or(Error::MissingGain(i, j))
        }
    }

    pub fn without_diagonal(&self) -> Self {
        Self {
            f: self.f.clone(),
            k: self.k.iter().map(|k| DMatrix::zeros(k.nrows(), k.ncols())).collect(),
        }
    }
}

/// `H = A~ + sum_i sum_{j in N_i} B_i F_ij C_ij`.
pub fn assemble_h(ns: &NetworkSystem, gains: &GainAssignment) -> Result<DMatrix<f64>> {
    let n = ns.n();
    let mut h = ns.a_tilde.clone();
    for (&(i, j), c) in &ns.c_pairs {
        let f = gains.block(i, j, n)?;
        if f.ncols() != c.nrows() || f.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "K_{} must be {n}x{}, got {}x{}",
                i + 1,
                c.nrows(),
                f.nrows(),
                f.ncols()
            )));
        }
        h += &ns.b[i] * f * c;
    }
    Ok(h)
}

/// Gain entries as one vector: each `K_i` column-major in agent order, then
/// the `f_ij` in index order.
pub fn gain_vector(ns: &NetworkSystem, gains: &GainAssignment) -> Result<DVector<f64>> {
    let mut out: Vec<f64> = Vec::new();
    for i in 0..ns.m() {
        out.extend(gains.k.get(i).ok_or(Error::MissingGain(i, i))?.iter());
    }
    for ij in ns.off_diagonal_index_set() {
        out.push(*gains.f.get(&ij).ok_or(Error::MissingGain(ij.0, ij.1))?);
    }
    Ok(DVector::from_vec(out))
}

/// Inverse of [`gain_vector`].
pub fn gains_from_vector(ns: &NetworkSystem, v: &DVector<f64>) -> Result<GainAssignment> {
    let n = ns.n();
    let mut offset = 0;
    let mut k = Vec::new();
    for i in 0..ns.m() {
        let s = ns.plant.s(i);
        if offset + n * s > v.len() {
            return Err(Error::DimensionMismatch("gain vector is too short".into()));
        }
        k.push(DMatrix::from_column_slice(n, s, &v.as_slice()[offset..offset + n * s]));
        offset += n * s;
    }
    let pairs = ns.off_diagonal_index_set();
    if offset + pairs.len() != v.len() {
        return Err(Error::DimensionMismatch("gain vector has the wrong length".into()));
    }
    let f = pairs.into_iter().zip(v.iter().skip(offset).copied()).collect();
    Ok(GainAssignment { f, k })
}

/// Derivative of `H` along each entry of [`gain_vector`]; `H` is affine in
/// the gains with constant term `A~`.
pub fn gain_directions(ns: &NetworkSystem) -> Vec<DMatrix<f64>> {
    let n = ns.n();
    let mut dirs = Vec::new();
    for i in 0..ns.m() {
        let c = ns.c_pair(i, i);
        for col in 0..c.nrows() {
            for row in 0..n {
                // F_ii = -K_i
                dirs.push(-(ns.b(i).column(row) * c.row(col)));
            }
        }
    }
    for (i, j) in ns.off_diagonal_index_set() {
        dirs.push(ns.b(i) * ns.c_pair(i, j));
    }
    dirs
}

/// `F = sum_i sum_{j != i} b_i f_ij c_ij`, an `m x m` matrix with zero row sums.
pub fn scalar_f(g: &NeighborGraph, f: &BTreeMap<(usize, usize), f64>) -> Result<DMatrix<f64>> {
    let m = g.m();
    let mut out = DMatrix::zeros(m, m);
    for arc in g.arcs() {
        let (i, j) = (arc.to, arc.from);
        let fij = *f.get(&(i, j)).ok_or(Error::MissingGain(i, j))?;
        out[(i, i)] -= fij;
        out[(i, j)] += fij;
    }
    Ok(out)
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// The block upper-triangular transform relating the Krylov blocks of
/// `H = I (x) A + F (x) I` from `G = g (x) I` to those of `(F, g)` lifted by
/// `(x) I`. Returns `T` and the infinity-norm residual of that identity.
pub fn kron_ctrb_transform(
    a: &DMatrix<f64>,
    f: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> (DMatrix<f64>, f64) {
    let (n, m) = (a.nrows(), f.nrows());
    let nm = n * m;
    let mut powers = vec![DMatrix::identity(n, n)];
    for k in 1..m {
        powers.push(&powers[k - 1] * a);
    }

    // column block k of T holds binom(k, i) A^{k-i} in row block i
    let mut t = DMatrix::zeros(nm, nm);
    for k in 0..m {
        for i in 0..=k {
            t.view_mut((i * n, k * n), (n, n))
                .copy_from(&(&powers[k - i] * binomial(k, i)));
        }
    }

    let eye = DMatrix::identity(n, n);
    let h = kron(&DMatrix::identity(m, m), a) + kron(f, &eye);
    let gg = kron(g, &eye);
    let mut lhs = DMatrix::zeros(nm, nm);
    let mut lifted = DMatrix::zeros(nm, nm);
    let mut hk = gg.clone();
    let mut fk = g.clone();
    for k in 0..m {
        lhs.view_mut((0, k * n), (nm, n)).copy_from(&hk);
        lifted.view_mut((0, k * n), (nm, n)).copy_from(&kron(&fk, &eye));
        hk = &h * hk;
        fk = f * fk;
    }
    let residual = inf_norm(&(lhs - lifted * &t));
    (t, residual)
}

/// Per-channel certificate re-run on the returned gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainCertificate {
    pub attempt: usize,
    /// Controllability index of `(H, B_p)` for each `p`.
    pub index: Vec<Option<usize>>,
    /// Same with every `K_i` zeroed.
    pub index_without_diagonal: Vec<Option<usize>>,
    /// `(p, q, observable)` for every `q` in the neighbor set of `p`.
    pub observable: Vec<(usize, usize, bool)>,
}

impl GainCertificate {
    pub fn passed(&self, m: usize) -> bool {
        self.index.iter().all(|&k| k == Some(m))
            && self.index_without_diagonal.iter().all(|&k| k == Some(m))
            && self.observable.iter().all(|&(_, _, ok)| ok)
    }
}

pub fn certify(ns: &NetworkSystem, gains: &GainAssignment, attempt: usize) -> Result<GainCertificate> {
    let h = assemble_h(ns, gains)?;
    let h0 = assemble_h(ns, &gains.without_diagonal())?;
    let m = ns.m();
    let mut observable = Vec::new();
    for p in 0..m {
        for q in ns.graph.neighbors(p) {
            observable.push((p, q, is_observable(ns.c_pq(p, q), &h)));
        }
    }
    Ok(GainCertificate {
        attempt,
        index: (0..m).map(|p| controllability_index(&h, ns.b(p))).collect(),
        index_without_diagonal: (0..m).map(|p| controllability_index(&h0, ns.b(p))).collect(),
        observable,
    })
}

/// Default magnitude of sampled gains: `1 / max(1, ||A||_inf)`.
pub fn default_gain_scale(plant: &Plant) -> f64 {
    1.0 / inf_norm(plant.a()).max(1.0)
}

/// Randomness for attempt `k` under `seed`: stream `k` of the seeded ChaCha8.
pub fn attempt_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

pub fn sample_gains(ns: &NetworkSystem, scale: f64, rng: &mut impl Rng) -> GainAssignment {
    let n = ns.n();
    let f = ns
        .off_diagonal_index_set()
        .into_iter()
        .map(|ij| (ij, scale * rng.random_range(-1.0..=1.0)))
        .collect();
    let k = (0..ns.m())
        .map(|i| {
            let s = ns.plant.s(i);
            DMatrix::from_fn(n, s, |_, _| scale * rng.random_range(-1.0..=1.0))
        })
        .collect();
    GainAssignment { f, k }
}

pub fn check_hypotheses(plant: &Plant, graph: &NeighborGraph) -> Result<()> {
    if graph.m() != plant.m() {
        return Err(Error::DimensionMismatch(format!(
            "plant has {} channels but graph has {} vertices",
            plant.m(),
            graph.m()
        )));
    }
    if !graph.is_strongly_connected() {
        return Err(Error::HypothesesViolated("neighbor graph is not strongly connected".into()));
    }
    if !is_jointly_observable(plant) {
        return Err(Error::HypothesesViolated("plant is not jointly observable".into()));
    }
    Ok(())
}

/// Draws gains until the certificate passes, using the default scale.
pub fn find_generic_gains(
    plant: &Plant,
    graph: &NeighborGraph,
    seed: u64,
    max_attempts: usize,
) -> Result<(GainAssignment, GainCertificate)> {
    find_generic_gains_scaled(plant, graph, seed, max_attempts, default_gain_scale(plant), 0)
}

/// As [`find_generic_gains`] with an explicit gain magnitude, starting at
/// attempt `first_attempt`.
pub fn find_generic_gains_scaled(
    plant: &Plant,
    graph: &NeighborGraph,
    seed: u64,
    max_attempts: usize,
    scale: f64,
    first_attempt: usize,
) -> Result<(GainAssignment, GainCertificate)> {
    check_hypotheses(plant, graph)?;
    let ns = build_network_system(plant, graph)?;
    for k in first_attempt..first_attempt + max_attempts {
        let gains = sample_gains(&ns, scale, &mut attempt_rng(seed, k as u64));
        let cert = certify(&ns, &gains, k)?;
        if cert.passed(ns.m()) {
            return Ok((gains, cert));
        }
    }
    Err(Error::AttemptsExhausted { attempts: max_attempts })
}

/// Completeness of every complementary subsystem of the scalar arc system
/// `z' = sum b_i v_ij`, `w_ij = c_ij z`. Entries are (subset of arcs as
/// `(i, j)` pairs, complete). Exhaustive, so only for small arc counts.
pub fn complementary_completeness(g: &NeighborGraph) -> Result<Vec<(Vec<(usize, usize)>, bool)>> {
    let m = g.m();
    let arcs: Vec<(usize, usize)> = g.arcs().map(|a| (a.to, a.from)).collect();
    let count = arcs.len();
    if count > 16 {
        return Err(Error::InvalidGraph(format!("{count} arcs is too many for an exhaustive check")));
    }
    let zero = DMatrix::zeros(m, m);
    let mut out = Vec::new();
    for mask in 1u32..(1u32 << count) - 1 {
        let chosen: Vec<_> = (0..count).filter(|&k| mask & (1 << k) != 0).map(|k| arcs[k]).collect();
        let rest: Vec<_> = (0..count).filter(|&k| mask & (1 << k) == 0).map(|k| arcs[k]).collect();
        let b = DMatrix::from_fn(m, chosen.len(), |r, c| if r == chosen[c].0 { 1.0 } else { 0.0 });
        let c = DMatrix::from_fn(rest.len(), m, |r, col| g.incidence_row(rest[r].1, rest[r].0)[col]);
        out.push((chosen, is_complete(&zero, &b, &c)?));
    }
    Ok(out)
}

/// On-disk gains: `{"f": {"i,j": x}, "K": [...], "seed": s}` with 1-based labels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GainsFile {
    pub f: BTreeMap<String, f64>,
    #[serde(rename = "K")]
    pub k: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl GainsFile {
    pub fn new(g: &GainAssignment, seed: u64) -> Self {
        Self {
            f: g.f.iter().map(|(&(i, j), &x)| (format!("{},{}", i + 1, j + 1), x)).collect(),
            k: g.k.iter().map(matrix_to_rows).collect(),
            seed,
        }
    }

    pub fn to_gains(&self, n: usize) -> Result<GainAssignment> {
        let mut f = BTreeMap::new();
        for (key, &x) in &self.f {
            f.insert(parse_pair(key)?, x);
        }
        let k = self
            .k
            .iter()
            .map(|rows| matrix_from_rows(rows, n))
            .collect::<Result<_>>()?;
        Ok(GainAssignment { f, k })
    }
}

/// Parses a 1-based `"i,j"` key into a 0-based pair.
pub fn parse_pair(key: &str) -> Result<(usize, usize)> {
    let bad = || Error::DimensionMismatch(format!("bad pair key {key:?}"));
    let (a, b) = key.split_once(',').ok_or_else(bad)?;
    let i: usize = a.trim().parse().map_err(|_| bad())?;
    let j: usize = b.trim().parse().map_err(|_| bad())?;
    if i == 0 || j == 0 {
        return Err(bad());
    }
    Ok((i - 1, j - 1))
}
