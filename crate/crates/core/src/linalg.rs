//! Plant representation and the rank-based test battery: observability,
//! controllability, controllability index, nonzero transfer and pencil rank.
//!
//! All rank decisions go through [`numerical_rank`], which counts singular
//! values above `tol * sigma_max`.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Relative singular-value threshold used when the caller does not pick one.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankReport {
    pub rank: usize,
    /// Absolute threshold, `tol * sigma_max`.
    pub tolerance: f64,
    pub smallest_retained: Option<f64>,
    pub largest_discarded: Option<f64>,
}

fn rank_from_singular_values(mut sv: Vec<f64>, tol: f64) -> RankReport {
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let threshold = tol * sigma_max;
    if sigma_max == 0.0 {
        return RankReport {
            rank: 0,
            tolerance: 0.0,
            smallest_retained: None,
            largest_discarded: sv.first().copied(),
        };
    }
    let rank = sv.iter().take_while(|&&s| s > threshold).count();
    RankReport {
        rank,
        tolerance: threshold,
        smallest_retained: rank.checked_sub(1).map(|k| sv[k]),
        largest_discarded: sv.get(rank).copied(),
    }
}

pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> RankReport {
    if m.is_empty() {
        return rank_from_singular_values(Vec::new(), tol);
    }
    let sv = m.clone().svd(false, false).singular_values;
    rank_from_singular_values(sv.iter().copied().collect(), tol)
}

pub fn numerical_rank_complex(m: &DMatrix<C64>, tol: f64) -> RankReport {
    if m.is_empty() {
        return rank_from_singular_values(Vec::new(), tol);
    }
    let sv = m.clone().svd(false, false).singular_values;
    rank_from_singular_values(sv.iter().copied().collect(), tol)
}

pub fn rank(m: &DMatrix<f64>) -> usize {
    numerical_rank(m, DEFAULT_RANK_TOL).rank
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let s = a[(i, j)];
            if s != 0.0 {
                out.view_mut((i * br, j * bc), (br, bc)).copy_from(&(b * s));
            }
        }
    }
    out
}

pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `[B, AB, ..., A^{k-1} B]`.
pub fn krylov(a: &DMatrix<f64>, b: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let (n, w) = b.shape();
    let mut out = DMatrix::zeros(n, w * k);
    let mut block = b.clone();
    for i in 0..k {
        out.view_mut((0, i * w), (n, w)).copy_from(&block);
        block = a * block;
    }
    out
}

/// Least `k` with `rank [B, AB, ..., A^{k-1}B] = dim A`, or `None` when the
/// pair is not controllable.
///
/// Computed by the orthogonal staircase: each step keeps only the part of
/// `A` times the previous new directions that is orthogonal to the span so
/// far. This yields the same rank sequence as the Krylov matrix without its
/// exponential loss of conditioning.
pub fn controllability_index(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<usize> {
    let n = a.nrows();
    if n == 0 {
        return Some(0);
    }
    let norm = inf_norm(a);
    let a = if norm > 0.0 { a / norm } else { a.clone() };
    let mut basis = DMatrix::<f64>::zeros(n, 0);
    let mut block = b.clone();
    let mut reference = nalgebra::linalg::SVD::new(b.clone(), false, false).singular_values.max();
    if reference == 0.0 {
        return None;
    }
    for k in 1..=n {
        for _ in 0..2 {
            block -= &basis * (basis.transpose() * &block);
        }
        let svd = block.clone().svd(true, false);
        let u = svd.u.as_ref()?;
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > DEFAULT_RANK_TOL * reference)
            .collect();
        if keep.is_empty() {
            return None;
        }
        let fresh = u.select_columns(&keep);
        let cols = basis.ncols();
        basis = basis.insert_columns(cols, fresh.ncols(), 0.0);
        basis.view_mut((0, cols), fresh.shape()).copy_from(&fresh);
        if basis.ncols() >= n {
            return Some(k);
        }
        block = &a * fresh;
        // new directions are orthonormal and A is normalized
        reference = 1.0;
    }
    None
}

pub fn is_controllable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    controllability_index(a, b).is_some()
}

/// Observability of `(C, A)` through the dual controllability test.
pub fn is_observable(c: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
    is_controllable(&a.transpose(), &c.transpose())
}

/// True iff some Markov parameter `C A^k B`, `k < dim A`, is nonzero.
pub fn transfer_is_nonzero(c: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    if c.is_empty() || b.is_empty() {
        return false;
    }
    let n = a.nrows();
    let a_norm = a.norm().max(1.0);
    let scale = c.norm() * b.norm();
    let mut ab = b.clone();
    for k in 0..n.max(1) {
        let markov = c * &ab;
        if markov.norm() > DEFAULT_RANK_TOL * scale * a_norm.powi(k as i32) {
            return true;
        }
        ab = a * ab;
    }
    false
}

/// Eigenvalues of a real square matrix (balanced Schur).
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<C64>> {
    let n = m.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![C64::new(m[(0, 0)], 0.0)]);
    }
    let balanced = balance(m);
    let schur = nalgebra::Schur::try_new(balanced, f64::EPSILON, 2000 * n)
        .ok_or(Error::EigenFailure)?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Diagonal similarity by powers of two so row and column norms are comparable.
fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let radix = 2.0f64;
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut cc = c;
            let mut rr = r;
            while cc < rr / radix {
                cc *= radix;
                rr /= radix;
                f *= radix;
            }
            while cc >= rr * radix {
                cc /= radix;
                rr *= radix;
                f /= radix;
            }
            if (cc + rr) < 0.95 * s {
                converged = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                    a[(j, i)] *= f;
                }
            }
        }
    }
    a
}

/// Pencil `[lambda I - A, B; C, 0]` at one complex point.
pub fn pencil_at(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, lambda: C64) -> DMatrix<C64> {
    let n = a.nrows();
    let (r, s) = (b.ncols(), c.nrows());
    let mut p = DMatrix::from_element(n + s, n + r, C64::new(0.0, 0.0));
    for i in 0..n {
        for j in 0..n {
            p[(i, j)] = C64::new(-a[(i, j)], 0.0);
        }
        p[(i, i)] += lambda;
        for j in 0..r {
            p[(i, n + j)] = C64::new(b[(i, j)], 0.0);
        }
    }
    for i in 0..s {
        for j in 0..n {
            p[(n + i, j)] = C64::new(c[(i, j)], 0.0);
        }
    }
    p
}

/// Minimum rank of the pencil over `lambda`. Away from the spectrum of `A`
/// the block `lambda I - A` alone has rank `dim A`, so only eigenvalues of
/// `A` are evaluated.
pub fn pencil_min_rank(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<usize> {
    let n = a.nrows();
    let mut best = usize::MAX;
    for lambda in eigenvalues(a)? {
        let p = pencil_at(a, b, c, lambda);
        // rank relative to the pencil scale, not to the (possibly tiny) smallest block
        let scale = a.norm().max(b.norm()).max(c.norm()).max(lambda.norm()).max(1.0);
        let sv = p.svd(false, false).singular_values;
        let r = sv.iter().filter(|&&x| x > DEFAULT_RANK_TOL * scale).count();
        best = best.min(r);
    }
    if best == usize::MAX {
        best = n + b.ncols().min(c.nrows());
    }
    Ok(best)
}

/// Completeness of a system triple: nonzero transfer matrix and pencil rank
/// at least `dim A` everywhere.
pub fn is_complete(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<bool> {
    Ok(transfer_is_nonzero(c, a, b) && pencil_min_rank(a, b, c)? >= a.nrows())
}

/// The plant `x' = A x`, `y_i = C_i x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    a: DMatrix<f64>,
    c: Vec<DMatrix<f64>>,
}

impl Plant {
    pub fn new(a: DMatrix<f64>, c: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::InvalidPlant(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if c.is_empty() {
            return Err(Error::InvalidPlant("plant needs at least one channel".into()));
        }
        for (i, ci) in c.iter().enumerate() {
            if ci.ncols() != n || ci.nrows() == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "C_{} is {}x{}, expected s x {n} with s >= 1",
                    i + 1,
                    ci.nrows(),
                    ci.ncols()
                )));
            }
            if ci.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroChannel(i));
            }
        }
        Ok(Self { a, c })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn channel(&self, i: usize) -> &DMatrix<f64> {
        &self.c[i]
    }

    pub fn channels(&self) -> &[DMatrix<f64>] {
        &self.c
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.len()
    }

    pub fn s(&self, i: usize) -> usize {
        self.c[i].nrows()
    }

    pub fn stacked_c(&self) -> DMatrix<f64> {
        stack_rows(&self.c, self.n())
    }

    /// Component subsystem keeping only `channels`, in the given order.
    pub fn restrict(&self, channels: &[usize]) -> Result<Self> {
        Self::new(
            self.a.clone(),
            channels.iter().map(|&i| self.c[i].clone()).collect(),
        )
    }

    /// Replaces `C_i` by `[C_i; extra]`.
    pub fn augment_channel(&self, i: usize, extra: &DMatrix<f64>) -> Result<Self> {
        let mut c = self.c.clone();
        c[i] = stack_rows(&[c[i].clone(), extra.clone()], self.n());
        Self::new(self.a.clone(), c)
    }
}

pub fn stack_rows(blocks: &[DMatrix<f64>], ncols: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, ncols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn is_jointly_observable(p: &Plant) -> bool {
    is_observable(&p.stacked_c(), p.a())
}

pub fn matrix_from_rows(rows: &[Vec<f64>], ncols_hint: usize) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(ncols_hint, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// On-disk plant: `{"n": int, "A": [[...]], "C": [[[...]], ...]}`, row-major.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantFile {
    pub n: usize,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<Vec<f64>>>,
}

impl From<&Plant> for PlantFile {
    fn from(p: &Plant) -> Self {
        Self {
            n: p.n(),
            a: matrix_to_rows(p.a()),
            c: p.channels().iter().map(matrix_to_rows).collect(),
        }
    }
}

impl TryFrom<PlantFile> for Plant {
    type Error = Error;

    fn try_from(f: PlantFile) -> Result<Self> {
        let a = matrix_from_rows(&f.a, f.n)?;
        if a.shape() != (f.n, f.n) {
            return Err(Error::DimensionMismatch(format!(
                "A is {}x{}, declared n = {}",
                a.nrows(),
                a.ncols(),
                f.n
            )));
        }
        let c = f
            .c
            .iter()
            .map(|rows| matrix_from_rows(rows, f.n))
            .collect::<Result<Vec<_>>>()?;
        Plant::new(a, c)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    // small integer entries make rank-deficient cases common
    fn small_matrix(r: usize, c: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2i32..=2, r * c)
            .prop_map(move |v| DMatrix::from_iterator(r, c, v.into_iter().map(f64::from)))
    }

    fn pbh_observable(c: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
        let n = a.nrows();
        eigenvalues(a).unwrap().into_iter().all(|lambda| {
            let mut m = DMatrix::from_element(n + c.nrows(), n, C64::new(0.0, 0.0));
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = C64::new(-a[(i, j)], 0.0);
                }
                m[(i, i)] += lambda;
            }
            for i in 0..c.nrows() {
                for j in 0..n {
                    m[(n + i, j)] = C64::new(c[(i, j)], 0.0);
                }
            }
            numerical_rank_complex(&m, 1e-7).rank == n
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn joint_observability_matches_pbh(
            (a, c) in (1usize..=5, 1usize..=2).prop_flat_map(|(n, s)| (small_matrix(n, n), small_matrix(s, n)))
        ) {
            prop_assume!(c.iter().any(|&x| x != 0.0));
            let p = Plant::new(a.clone(), vec![c.clone()]).unwrap();
            prop_assert_eq!(is_jointly_observable(&p), pbh_observable(&c, &a));
        }

        #[test]
        fn controllability_index_bounds(
            (a, b) in (1usize..=5, 1usize..=3).prop_flat_map(|(n, w)| (small_matrix(n, n), small_matrix(n, w)))
        ) {
            prop_assume!(b.iter().any(|&x| x != 0.0));
            let n = a.nrows();
            if let Some(k) = controllability_index(&a, &b) {
                prop_assert!(k <= n);
                prop_assert!(k >= n.div_ceil(b.ncols()));
            }
        }

        #[test]
        fn transfer_invariant_under_similarity(
            (a, b, c, t) in (1usize..=4).prop_flat_map(|n| (
                small_matrix(n, n), small_matrix(n, 1), small_matrix(1, n), small_matrix(n, n)))
        ) {
            let t = t + DMatrix::identity(a.nrows(), a.nrows()) * 7.0;
            let ti = t.clone().try_inverse().unwrap();
            prop_assert_eq!(
                transfer_is_nonzero(&c, &a, &b),
                transfer_is_nonzero(&(&c * &ti), &(&t * &a * &ti), &(&t * &b))
            );
        }
    }
}
