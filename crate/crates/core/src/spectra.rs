//! Spectrum assignment: single- and multi-input placement, eigenvalue
//! pairing, and the low-order dynamic compensator closing the loop around
//! `(H, B_p, C_pq)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{controllability_index, eigenvalues, is_controllable, is_observable, krylov, C64};
use crate::netsys::attempt_rng;

/// A conjugate-closed list of desired eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSpec {
    lambdas: Vec<C64>,
}

impl SpectrumSpec {
    pub fn new(lambdas: Vec<C64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidSpectrum("spectrum is empty".into()));
        }
        if lambdas.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidSpectrum("spectrum has non-finite entries".into()));
        }
        let conj: Vec<C64> = lambdas.iter().map(|z| z.conj()).collect();
        let scale = lambdas.iter().map(|z| z.norm()).fold(1.0, f64::max);
        if pairing_error(&lambdas, &conj) > 1e-12 * scale {
            return Err(Error::InvalidSpectrum("spectrum is not closed under conjugation".into()));
        }
        Ok(Self { lambdas })
    }

    pub fn real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn lambdas(&self) -> &[C64] {
        &self.lambdas
    }

    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    /// Checks the cardinality `nm + m - 1` required by the compensator.
    pub fn check_cardinality(&self, expected: usize) -> Result<()> {
        if self.len() != expected {
            return Err(Error::InvalidSpectrum(format!(
                "need {expected} eigenvalues, got {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// True when two entries are within `tol` of each other. Repeated
    /// eigenvalues are accepted but harder to certify.
    pub fn has_repeated(&self, tol: f64) -> bool {
        let l = &self.lambdas;
        (0..l.len()).any(|i| (i + 1..l.len()).any(|j| (l[i] - l[j]).norm() <= tol))
    }

    /// Splits into two conjugate-closed parts, the first of size `k`, taking
    /// real entries first in input order.
    pub fn split(&self, k: usize) -> Option<(Vec<C64>, Vec<C64>)> {
        let mut groups: Vec<Vec<C64>> = Vec::new();
        let mut used = vec![false; self.len()];
        for i in 0..self.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            let z = self.lambdas[i];
            if z.im == 0.0 {
                groups.push(vec![z]);
                continue;
            }
            let partner = (0..self.len())
                .filter(|&j| !used[j])
                .min_by(|&a, &b| {
                    (self.lambdas[a] - z.conj())
                        .norm()
                        .total_cmp(&(self.lambdas[b] - z.conj()).norm())
                })?;
            used[partner] = true;
            let w = C64::new(z.re, z.im.abs());
            groups.push(vec![w, w.conj()]);
        }
        // subset-sum over group sizes 1 and 2, preferring real singletons
        let singles: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() == 1).collect();
        let pairs: Vec<usize> = (0..groups.len()).filter(|&g| groups[g].len() == 2).collect();
        let take_single = k.min(singles.len());
        let take_single = if (k - take_single) % 2 == 1 {
            take_single.checked_sub(1)?
        } else {
            take_single
        };
        let take_pairs = (k - take_single) / 2;
        if take_pairs > pairs.len() {
            return None;
        }
        let chosen: Vec<usize> = singles[..take_single]
            .iter()
            .chain(&pairs[..take_pairs])
            .copied()
            .collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (g, vals) in groups.into_iter().enumerate() {
            if chosen.contains(&g) {
                first.extend(vals);
            } else {
                second.extend(vals);
            }
        }
        Some((first, second))
    }
}

/// `count` distinct real values spread over `[-2 rho, -rho)`.
pub fn rate_ladder(rho: f64, count: usize) -> Vec<f64> {
    (0..count)
        .map(|k| -rho * (1.0 + k as f64 / count as f64))
        .collect()
}

/// Monic polynomial coefficients, highest power first, from its roots.
pub fn poly_from_roots(roots: &[C64]) -> Vec<f64> {
    let mut c = vec![C64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.into_iter().map(|z| z.re).collect()
}

/// Minimum-sum assignment on a square cost matrix. Returns `col[row]`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // potentials and matching are 1-based, index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            col[matched[j] - 1] = j - 1;
        }
    }
    col
}

/// Reorders `achieved` to align with `target` under minimum-weight matching.
pub fn pair_to(target: &[C64], achieved: &[C64]) -> Vec<C64> {
    let n = target.len();
    let cost = DMatrix::from_fn(n, n, |i, j| (target[i] - achieved[j]).norm());
    hungarian(&cost).into_iter().map(|j| achieved[j]).collect()
}

/// Largest pair distance under the minimum-weight matching; infinite when
/// the lengths differ.
pub fn pairing_error(target: &[C64], achieved: &[C64]) -> f64 {
    if target.len() != achieved.len() {
        return f64::INFINITY;
    }
    pair_to(target, achieved)
        .iter()
        .zip(target)
        .map(|(a, t)| (a - t).norm())
        .fold(0.0, f64::max)
}

fn check_spectrum_for(dim: usize, lambdas: &[C64]) -> Result<()> {
    if lambdas.len() != dim {
        return Err(Error::InvalidSpectrum(format!(
            "need {dim} eigenvalues, got {}",
            lambdas.len()
        )));
    }
    SpectrumSpec::new(lambdas.to_vec()).map(|_| ())
}

/// Row `k` with `spec(A - b k) = lambdas`, by Ackermann's formula.
pub fn place_single_input(a: &DMatrix<f64>, b: &DVector<f64>, lambdas: &[C64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_spectrum_for(n, lambdas)?;
    let bm = DMatrix::from_column_slice(n, 1, b.as_slice());
    if !is_controllable(a, &bm) {
        return Err(Error::NotControllable);
    }
    let w = krylov(a, &bm, n);
    let mut last = DVector::zeros(n);
    last[n - 1] = 1.0;
    let x = w.transpose().lu().solve(&last).ok_or(Error::NotControllable)?;
    let phi = poly_from_roots(lambdas);
    // Horner evaluation of the desired polynomial at A
    let mut p = DMatrix::identity(n, n) * phi[0];
    for &c in &phi[1..] {
        p = a * p + DMatrix::identity(n, n) * c;
    }
    Ok(DMatrix::from_column_slice(1, n, x.as_slice()) * p)
}

const PLACEMENT_TOL: f64 = 1e-6;

/// Gain `K` with `spec(A - B K) = lambdas`, through a random reduction to a
/// single-input pair.
pub fn place_multi_input(a: &DMatrix<f64>, b: &DMatrix<f64>, lambdas: &[C64], seed: u64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    check_spectrum_for(n, lambdas)?;
    if !is_controllable(a, b) {
        return Err(Error::NotControllable);
    }
    if b.ncols() == 1 {
        return place_single_input(a, &b.column(0).into_owned(), lambdas);
    }
    let w = b.ncols();
    let scale = a.norm().max(1.0) / b.norm().max(f64::MIN_POSITIVE);
    const RETRIES: usize = 20;
    for r in 0..RETRIES {
        let mut rng = attempt_rng(seed, r as u64);
        let k0 = DMatrix::from_fn(w, n, |_, _| scale * rng.random_range(-1.0..=1.0));
        let v = DVector::from_fn(w, |_, _| rng.random_range(-1.0..=1.0));
        let a1 = a - b * &k0;
        let bv = b * &v;
        let Ok(k) = place_single_input(&a1, &bv, lambdas) else {
            continue;
        };
        let gain = k0 + DMatrix::from_column_slice(w, 1, v.as_slice()) * k;
        let achieved = eigenvalues(&(a - b * &gain))?;
        let tol = PLACEMENT_TOL * lambdas.iter().map(|z| z.norm()).fold(1.0, f64::max);
        if pairing_error(lambdas, &achieved) <= tol {
            return Ok(gain);
        }
    }
    Err(Error::ReductionFailed(RETRIES))
}

/// `z' = A z + B y`, `u = C z + D y`, of order `dim A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Compensator {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DMatrix<f64>,
    pub c_bar: DMatrix<f64>,
    pub d_bar: DMatrix<f64>,
}

impl Compensator {
    pub fn order(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn input_width(&self) -> usize {
        self.d_bar.ncols()
    }

    fn shapes(n: usize, order: usize, width: usize) -> [(usize, usize); 4] {
        [(order, order), (order, width), (n, order), (n, width)]
    }

    fn pack(&self) -> DVector<f64> {
        let parts = [&self.a_bar, &self.b_bar, &self.c_bar, &self.d_bar];
        DVector::from_iterator(
            parts.iter().map(|p| p.len()).sum(),
            parts.iter().flat_map(|p| p.iter().copied()),
        )
    }

    fn unpack(theta: &DVector<f64>, n: usize, order: usize, width: usize) -> Self {
        let mut offset = 0;
        let mut take = |(r, c): (usize, usize)| {
            let m = DMatrix::from_column_slice(r, c, &theta.as_slice()[offset..offset + r * c]);
            offset += r * c;
            m
        };
        let [sa, sb, sc, sd] = Self::shapes(n, order, width);
        Self {
            a_bar: take(sa),
            b_bar: take(sb),
            c_bar: take(sc),
            d_bar: take(sd),
        }
    }
}

/// `[[H + B D C, B Cbar], [Bbar C, Abar]]`.
pub fn closed_loop(h: &DMatrix<f64>, bp: &DMatrix<f64>, cpq: &DMatrix<f64>, comp: &Compensator) -> DMatrix<f64> {
    let nm = h.nrows();
    let nb = comp.order();
    let mut out = DMatrix::zeros(nm + nb, nm + nb);
    out.view_mut((0, 0), (nm, nm)).copy_from(&(h + bp * &comp.d_bar * cpq));
    out.view_mut((0, nm), (nm, nb)).copy_from(&(bp * &comp.c_bar));
    out.view_mut((nm, 0), (nb, nm)).copy_from(&(&comp.b_bar * cpq));
    out.view_mut((nm, nm), (nb, nb)).copy_from(&comp.a_bar);
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompensatorOptions {
    /// Maximum accepted pairing error.
    pub tol: f64,
    /// Random restarts of the polishing step besides the constructive seed.
    pub restarts: usize,
    /// Iterations per polishing phase.
    pub max_iter: usize,
    /// Use a full-order observer-based compensator (order `nm`, needs
    /// `2 nm` eigenvalues) instead of order `m - 1`.
    pub full_order: bool,
    /// Stop at the first restart that meets `tol` instead of collecting all
    /// restarts and keeping the lowest-norm closed loop.
    pub first_success: bool,
}

impl Default for CompensatorOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            restarts: 6,
            max_iter: 400,
            full_order: false,
            first_success: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompensatorDesign {
    pub compensator: Compensator,
    pub achieved: Vec<C64>,
    pub pairing_error: f64,
    /// Infinity norm of the closed loop.
    pub closed_loop_norm: f64,
    /// Restart that produced the winning candidate.
    pub candidate: usize,
}

/// Designs a compensator so the closed loop has spectrum `spec`.
pub fn design_compensator(
    h: &DMatrix<f64>,
    bp: &DMatrix<f64>,
    cpq: &DMatrix<f64>,
    spec: &SpectrumSpec,
    seed: u64,
    opts: &CompensatorOptions,
) -> Result<CompensatorDesign> {
    let nm = h.nrows();
    let n = bp.ncols();
    if bp.nrows() != nm || cpq.ncols() != nm || n == 0 || nm % n != 0 {
        return Err(Error::DimensionMismatch("H, B_p and C_pq do not conform".into()));
    }
    let m = nm / n;
    if controllability_index(h, bp) != Some(m) {
        return Err(Error::Uncertified(format!("(H, B_p) does not have controllability index {m}")));
    }
    if !is_observable(cpq, h) {
        return Err(Error::Uncertified("(C_pq, H) is not observable".into()));
    }
    if opts.full_order {
        spec.check_cardinality(2 * nm)?;
        return design_full_order(h, bp, cpq, spec, seed, opts);
    }
    spec.check_cardinality(nm + m - 1)?;

    let order = m - 1;
    let width = cpq.nrows();
    let target = spec.lambdas();
    let fit = EigenFit::new(h, &[], bp, cpq, target, order);
    let count = fit.compensator_len();

    let mut candidates: Vec<(usize, Compensator)> = Vec::new();
    for r in 0..=opts.restarts {
        let mut rng = attempt_rng(seed, r as u64);
        // interpolation seed through a random output combination
        let g = DMatrix::from_fn(width, 1, |_, _| rng.random_range(-1.0..=1.0));
        if is_observable(&(g.transpose() * cpq), h) {
            if let Some(raw) = interpolation_seed(h, bp, cpq, target, order, &g)? {
                let bal = balance_compensator(h, bp, cpq, &raw);
                let (polished, _) = fit.solve(bal.pack(), opts.max_iter);
                candidates.push((r, raw));
                candidates.push((r, bal));
                candidates.push((r, Compensator::unpack(&polished, n, order, width)));
            }
        }
        // plain fit from a random start
        let start = DVector::from_fn(count, |_, _| rng.random_range(-1.0..=1.0));
        let (theta, _) = fit.solve_staged(start, opts.max_iter);
        candidates.push((r, Compensator::unpack(&theta, n, order, width)));
        if opts.first_success && candidates.iter().any(|(_, c)| accepts(h, bp, cpq, target, c, opts.tol)) {
            break;
        }
    }
    pick(h, bp, cpq, target, candidates, opts)
}

fn accepts(h: &DMatrix<f64>, bp: &DMatrix<f64>, cpq: &DMatrix<f64>, target: &[C64], c: &Compensator, tol: f64) -> bool {
    eigenvalues(&closed_loop(h, bp, cpq, c)).is_ok_and(|ev| pairing_error(target, &ev) <= tol)
}

/// Lowest-norm candidate within tolerance, or the closest miss as an error.
fn pick(
    h: &DMatrix<f64>,
    bp: &DMatrix<f64>,
    cpq: &DMatrix<f64>,
    target: &[C64],
    candidates: Vec<(usize, Compensator)>,
    opts: &CompensatorOptions,
) -> Result<CompensatorDesign> {
    let mut best: Option<CompensatorDesign> = None;
    let mut closest: Option<(f64, Vec<C64>)> = None;
    for (label, comp) in candidates {
        let hbar = closed_loop(h, bp, cpq, &comp);
        let Ok(achieved) = eigenvalues(&hbar) else { continue };
        let err = pairing_error(target, &achieved);
        if closest.as_ref().is_none_or(|(e, _)| err < *e) {
            closest = Some((err, achieved.clone()));
        }
        if err > opts.tol {
            continue;
        }
        let norm = crate::linalg::inf_norm(&hbar);
        if best.as_ref().is_none_or(|b| norm < b.closed_loop_norm) {
            best = Some(CompensatorDesign {
                compensator: comp,
                achieved: pair_to(target, &achieved),
                pairing_error: err,
                closed_loop_norm: norm,
                candidate: label,
            });
        }
    }
    best.ok_or_else(|| {
        let (best_error, spectrum) = closest.unwrap_or((f64::INFINITY, Vec::new()));
        Error::CompensatorNonConvergence {
            restarts: opts.restarts,
            best_error,
            best_spectrum: spectrum.iter().map(|z| (z.re, z.im)).collect(),
        }
    })
}

/// Outcome of [`design_joint`]: refined gain parameters and the compensator.
#[derive(Debug, Clone)]
pub struct JointDesign {
    pub xi: DVector<f64>,
    pub h: DMatrix<f64>,
    pub design: CompensatorDesign,
}

/// Compensator design that may also move `H` along the affine family
/// `base + sum_k xi_k dirs_k`, starting from `xi0`. Used when the gains
/// fixed in advance place the target spectrum only with huge or
/// ill-conditioned compensators. The caller re-certifies the refined `H`.
#[allow(clippy::too_many_arguments)]
pub fn design_joint(
    base: &DMatrix<f64>,
    dirs: &[DMatrix<f64>],
    xi0: &DVector<f64>,
    bp: &DMatrix<f64>,
    cpq: &DMatrix<f64>,
    spec: &SpectrumSpec,
    seed: u64,
    opts: &CompensatorOptions,
) -> Result<JointDesign> {
    let nm = base.nrows();
    let n = bp.ncols();
    if dirs.len() != xi0.len() || dirs.iter().any(|d| d.shape() != base.shape()) {
        return Err(Error::DimensionMismatch("gain directions do not match H".into()));
    }
    if bp.nrows() != nm || cpq.ncols() != nm || n == 0 || nm % n != 0 {
        return Err(Error::DimensionMismatch("H, B_p and C_pq do not conform".into()));
    }
    let m = nm / n;
    spec.check_cardinality(nm + m - 1)?;
    let order = m - 1;
    let target = spec.lambdas();
    let fit = EigenFit::new(base, dirs, bp, cpq, target, order);
    let count = fit.compensator_len();
    let mut closest = (f64::INFINITY, Vec::new());
    for r in 0..=opts.restarts {
        // streams past those used by the fixed-H design
        let mut rng = attempt_rng(seed, (opts.restarts + 1 + r) as u64);
        let start = DVector::from_iterator(
            xi0.len() + count,
            xi0.iter()
                .copied()
                .chain((0..count).map(|_| rng.random_range(-1.0..=1.0))),
        );
        let (theta, _) = fit.solve_staged(start, opts.max_iter);
        let (h, comp) = fit.split(&theta);
        let hbar = closed_loop(&h, bp, cpq, &comp);
        let Ok(achieved) = eigenvalues(&hbar) else { continue };
        let err = pairing_error(target, &achieved);
        if err <= opts.tol && theta.iter().all(|x| x.is_finite()) {
            return Ok(JointDesign {
                xi: theta.rows(0, xi0.len()).into_owned(),
                h,
                design: CompensatorDesign {
                    compensator: comp,
                    achieved: pair_to(target, &achieved),
                    pairing_error: err,
                    closed_loop_norm: crate::linalg::inf_norm(&hbar),
                    candidate: r,
                },
            });
        }
        if err < closest.0 {
            closest = (err, achieved);
        }
    }
    Err(Error::CompensatorNonConvergence {
        restarts: opts.restarts,
        best_error: closest.0,
        best_spectrum: closest.1.iter().map(|z| (z.re, z.im)).collect(),
    })
}

/// Rank-one compensator `K(s) = k(s) g' / d(s)` from the closed-loop identity
/// `d(s) - g' C (sI - H)^{-1} B k(s) = phi(s) / det(sI - H)`, which is linear
/// in the coefficients of `d` (monic, degree `order`) and `k` (degree at most
/// `order`). The identity is imposed at points on a circle enclosing both
/// spectra, and the result is realized in companion form.
fn interpolation_seed(
    h: &DMatrix<f64>,
    bp: &DMatrix<f64>,
    cpq: &DMatrix<f64>,
    target: &[C64],
    order: usize,
    g: &DMatrix<f64>,
) -> Result<Option<Compensator>> {
    let nm = h.nrows();
    let n = bp.ncols();
    let width = cpq.nrows();
    let open = eigenvalues(h)?;
    let radius = 1.5
        * target
            .iter()
            .chain(&open)
            .map(|z| z.norm())
            .fold(1.0, f64::max);
    let unknowns = order + n * (order + 1);
    let points = unknowns.max(1);
    let gc = g.transpose() * cpq;
    let gc = gc.map(|x| C64::new(x, 0.0));
    let bc = bp.map(|x| C64::new(x, 0.0));
    let hc = h.map(|x| C64::new(x, 0.0));

    let mut lhs = DMatrix::zeros(2 * points, unknowns);
    let mut rhs = DVector::zeros(2 * points);
    for j in 0..points {
        let theta = std::f64::consts::PI * (j as f64 + 0.5) / points as f64;
        let t = C64::from_polar(1.0, theta);
        let s = t * radius;
        let resolvent = DMatrix::from_diagonal_element(nm, nm, s) - &hc;
        let Some(x) = resolvent.lu().solve(&bc) else { return Ok(None) };
        let gs = &gc * x;
        // phi(s) / (det(sI - H) radius^order), paired factor by factor
        let mut ratio = C64::new(1.0, 0.0);
        for (i, &lam) in target.iter().enumerate() {
            ratio *= if i < nm { (s - lam) / (s - open[i]) } else { (s - lam) / radius };
        }
        let mut row = vec![C64::new(0.0, 0.0); unknowns];
        for i in 0..order {
            row[i] = t.powu(i as u32);
        }
        for i in 0..=order {
            for c in 0..n {
                row[order + i * n + c] = -gs[(0, c)] * t.powu(i as u32);
            }
        }
        let value = ratio - t.powu(order as u32);
        for (u, z) in row.iter().enumerate() {
            lhs[(2 * j, u)] = z.re;
            lhs[(2 * j + 1, u)] = z.im;
        }
        rhs[2 * j] = value.re;
        rhs[2 * j + 1] = value.im;
    }
    // equilibrate columns before the least-squares solve
    let scales: Vec<f64> = (0..unknowns)
        .map(|u| lhs.column(u).norm().max(f64::MIN_POSITIVE))
        .collect();
    for (u, sc) in scales.iter().enumerate() {
        lhs.column_mut(u).scale_mut(1.0 / sc);
    }
    let svd = lhs.svd(true, true);
    let smax = svd.singular_values.max();
    let Ok(sol) = svd.solve(&rhs, 1e-13 * smax) else { return Ok(None) };
    let coef: Vec<f64> = (0..unknowns).map(|u| sol[u] / scales[u]).collect();
    if coef.iter().any(|x| !x.is_finite()) {
        return Ok(None);
    }

    let delta = &coef[..order];
    let kappa = |i: usize| DMatrix::from_column_slice(n, 1, &coef[order + i * n..order + (i + 1) * n]);
    let d = kappa(order);
    let mut a_bar = DMatrix::zeros(order, order);
    let mut b_bar = DMatrix::zeros(order, 1);
    let mut c_bar = DMatrix::zeros(n, order);
    for i in 0..order {
        if i + 1 < order {
            a_bar[(i, i + 1)] = radius;
        }
        a_bar[(order - 1, i)] = -radius * delta[i];
        c_bar.set_column(i, &((kappa(i) - &d * delta[i]) * radius).column(0));
    }
    if order > 0 {
        b_bar[(order - 1, 0)] = 1.0;
    }
    let gt = g.transpose();
    let comp = Compensator {
        a_bar,
        b_bar: &b_bar * &gt,
        c_bar,
        d_bar: &d * &gt,
    };
    debug_assert_eq!(comp.input_width(), width);
    Ok(Some(comp))
}

/// Diagonal similarity on the compensator state that evens out the row and
/// column norms of the closed loop in the compensator block.
fn balance_compensator(h: &DMatrix<f64>, bp: &DMatrix<f64>, cpq: &DMatrix<f64>, comp: &Compensator) -> Compensator {
    let mut c = comp.clone();
    let nm = h.nrows();
    for _ in 0..50 {
        let hbar = closed_loop(h, bp, cpq, &c);
        let mut changed = false;
        for i in 0..c.order() {
            let k = nm + i;
            let col: f64 = (0..hbar.nrows()).filter(|&r| r != k).map(|r| hbar[(r, k)].abs()).sum();
            let row: f64 = (0..hbar.ncols()).filter(|&j| j != k).map(|j| hbar[(k, j)].abs()).sum();
            if col == 0.0 || row == 0.0 {
                continue;
            }
            let f = (row / col).sqrt();
            if !(0.5..=2.0).contains(&f) {
                changed = true;
                // z_i -> z_i / f
                c.a_bar.row_mut(i).scale_mut(1.0 / f);
                c.a_bar.column_mut(i).scale_mut(f);
                c.b_bar.row_mut(i).scale_mut(1.0 / f);
                c.c_bar.column_mut(i).scale_mut(f);
            }
        }
        if !changed {
            break;
        }
    }
    c
}

/// Residual vector, its Jacobian and the largest paired eigenvalue distance.
struct Eval {
    r: DVector<f64>,
    jac: DMatrix<f64>,
    err: f64,
}

/// Levenberg-Marquardt with an SVD-damped step. Stops once `err <= tol`.
fn levenberg_marquardt(
    eval: impl Fn(&DVector<f64>) -> Option<Eval>,
    start: DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> (DVector<f64>, f64) {
    let mut theta = start;
    let Some(mut cur) = eval(&theta) else { return (theta, f64::INFINITY) };
    let mut cost = cur.r.norm_squared();
    let mut damping = 1e-3;
    let mut stalls = 0;
    for _ in 0..max_iter {
        if cur.err <= tol {
            break;
        }
        let svd = cur.jac.clone().svd(true, true);
        let (Some(u), Some(vt)) = (svd.u.as_ref(), svd.v_t.as_ref()) else { break };
        let s = &svd.singular_values;
        let s0 = s.iter().fold(0.0f64, |a, &x| a.max(x));
        if s0 == 0.0 {
            break;
        }
        let ur = u.transpose() * &cur.r;
        let mut improved = false;
        for _ in 0..15 {
            let scaled = DVector::from_fn(s.len(), |i, _| -ur[i] * s[i] / (s[i] * s[i] + damping * s0 * s0));
            let cand = &theta + vt.transpose() * scaled;
            if let Some(next) = eval(&cand) {
                let c2 = next.r.norm_squared();
                if c2 < cost {
                    stalls = if c2 > cost * (1.0 - 1e-9) { stalls + 1 } else { 0 };
                    theta = cand;
                    cur = next;
                    cost = c2;
                    damping = (damping / 3.0f64).max(1e-15);
                    improved = true;
                    break;
                }
            }
            damping *= 4.0;
        }
        if !improved || stalls > 20 {
            break;
        }
    }
    (theta, cur.err)
}

/// Eigenvalues with right vectors `x` and left vectors `y` scaled so that
/// `y' x = 1`, making `y' dM x` the first-order eigenvalue change.
fn eigen_triplets(m: &DMatrix<f64>) -> Option<Vec<(C64, DVector<C64>, DVector<C64>)>> {
    let dim = m.nrows();
    let values = eigenvalues(m).ok()?;
    let mc = m.map(|x| C64::new(x, 0.0));
    let scale = crate::linalg::inf_norm(m).max(1.0);
    let start = DVector::from_fn(dim, |i, _| C64::new(1.0 + i as f64 / dim as f64, 0.0));
    let inverse_iteration = |lu: &nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>| {
        let mut v = start.clone();
        for _ in 0..3 {
            v = lu.solve(&v)?;
            let norm = v.norm();
            if !norm.is_finite() || norm == 0.0 {
                return None;
            }
            v.unscale_mut(norm);
        }
        Some(v)
    };
    let mut out = Vec::with_capacity(dim);
    for mu in values {
        // a tiny offset keeps the shifted matrix numerically invertible
        let shift = mu + C64::new(1e-13 * scale, 1e-13 * scale);
        let shifted = &mc - DMatrix::from_diagonal_element(dim, dim, shift);
        let x = inverse_iteration(&shifted.clone().lu())?;
        let y = inverse_iteration(&shifted.transpose().lu())?;
        let denom = y.dot(&x);
        if denom.norm() < 1e-300 {
            return None;
        }
        out.push((mu, x, y.map(|z| z / denom)));
    }
    Some(out)
}

/// `z` with its imaginary part moved to the half plane of `sign`.
fn fold(z: C64, sign: f64) -> C64 {
    C64::new(z.re, sign * z.im.abs())
}

/// Paired eigenvalue fit of the closed loop built from
/// `H = base + sum_k xi_k dirs_k` and a compensator. Parameters are `xi`
/// followed by the packed compensator. Both enter the closed loop affinely,
/// so eigenvalue derivatives come from left and right eigenvectors.
/// Conjugate pairs are compared after folding each achieved value to the
/// half plane of its target, which keeps the pairing continuous.
struct EigenFit<'a> {
    base: &'a DMatrix<f64>,
    dirs: &'a [DMatrix<f64>],
    bp: &'a DMatrix<f64>,
    cpq: &'a DMatrix<f64>,
    n: usize,
    order: usize,
    width: usize,
    target: &'a [C64],
    reg: f64,
}

impl<'a> EigenFit<'a> {
    fn new(
        base: &'a DMatrix<f64>,
        dirs: &'a [DMatrix<f64>],
        bp: &'a DMatrix<f64>,
        cpq: &'a DMatrix<f64>,
        target: &'a [C64],
        order: usize,
    ) -> Self {
        Self {
            base,
            dirs,
            bp,
            cpq,
            n: bp.ncols(),
            order,
            width: cpq.nrows(),
            target,
            reg: 0.0,
        }
    }

    fn compensator_len(&self) -> usize {
        Compensator::shapes(self.n, self.order, self.width)
            .iter()
            .map(|(r, c)| r * c)
            .sum()
    }

    fn split(&self, theta: &DVector<f64>) -> (DMatrix<f64>, Compensator) {
        let k = self.dirs.len();
        let mut h = self.base.clone();
        for (x, d) in theta.iter().zip(self.dirs) {
            h += d * *x;
        }
        let rest = DVector::from_column_slice(&theta.as_slice()[k..]);
        (h, Compensator::unpack(&rest, self.n, self.order, self.width))
    }

    fn eval(&self, theta: &DVector<f64>) -> Option<Eval> {
        let (h, comp) = self.split(theta);
        let nm = h.nrows();
        let order = self.order;
        let hbar = closed_loop(&h, self.bp, self.cpq, &comp);
        let triplets = eigen_triplets(&hbar)?;
        let count = self.target.len();
        let sign = |z: C64| if z.im >= 0.0 { 1.0 } else { -1.0 };
        // squared distances: with plain distances every matching of points on
        // a line can tie, and the pairing would jump between them
        let cost = DMatrix::from_fn(count, count, |i, j| {
            (self.target[i] - fold(triplets[j].0, sign(self.target[i]))).norm_sqr()
        });
        let col = hungarian(&cost);
        let err = (0..count).map(|i| cost[(i, col[i])].sqrt()).fold(0.0, f64::max);

        let k = self.dirs.len();
        let p = theta.len();
        let extra = if self.reg > 0.0 { p } else { 0 };
        let mut r = DVector::zeros(2 * count + extra);
        let mut jac = DMatrix::zeros(2 * count + extra, p);
        let bp = self.bp.map(|x| C64::new(x, 0.0));
        let cpq = self.cpq.map(|x| C64::new(x, 0.0));
        let (ob, oc, od) = (
            order * order,
            order * order + order * self.width,
            order * order + order * self.width + self.n * order,
        );
        for (i, &j) in col.iter().enumerate() {
            let (mu, x, y) = &triplets[j];
            let s = sign(self.target[i]);
            let d = fold(*mu, s) - self.target[i];
            r[i] = d.re;
            r[count + i] = d.im;
            let sg = s * sign(*mu);
            let x1 = x.rows(0, nm);
            let y1 = y.rows(0, nm);
            let x2 = x.rows(nm, order);
            let y2 = y.rows(nm, order);
            let cx = &cpq * x1;
            let by = bp.transpose() * y1;
            let mut put = |idx: usize, g: C64| {
                jac[(i, idx)] = g.re;
                jac[(count + i, idx)] = sg * g.im;
            };
            for (idx, dir) in self.dirs.iter().enumerate() {
                let dx = dir.map(|v| C64::new(v, 0.0)) * x1;
                put(idx, y1.dot(&dx));
            }
            for b in 0..order {
                for a in 0..order {
                    put(k + a + b * order, y2[a] * x2[b]);
                }
            }
            for c in 0..self.width {
                for a in 0..order {
                    put(k + ob + a + c * order, y2[a] * cx[c]);
                }
            }
            for b in 0..order {
                for a in 0..self.n {
                    put(k + oc + a + b * self.n, by[a] * x2[b]);
                }
            }
            for c in 0..self.width {
                for a in 0..self.n {
                    put(k + od + a + c * self.n, by[a] * cx[c]);
                }
            }
        }
        for i in 0..extra {
            r[2 * count + i] = self.reg * theta[i];
            jac[(2 * count + i, i)] = self.reg;
        }
        Some(Eval { r, jac, err })
    }

    fn solve(&self, start: DVector<f64>, max_iter: usize) -> (DVector<f64>, f64) {
        levenberg_marquardt(|t| self.eval(t), start, max_iter, 1e-12)
    }

    /// A short ridge-regularized phase followed by an unregularized one.
    fn solve_staged(&self, start: DVector<f64>, max_iter: usize) -> (DVector<f64>, f64) {
        let ridge = Self { reg: 1e-2, ..*self };
        let (mid, _) = ridge.solve(start, max_iter / 4);
        self.solve(mid, max_iter)
    }
}

/// Observer-based compensator of order `nm`: `Abar = H - B K - L C`,
/// `Bbar = L`, `Cbar = -K`, `Dbar = 0`. Each restart uses fresh random
/// single-input reductions; the most accurate placement is kept.
fn design_full_order(
    h: &DMatrix<f64>,
    bp: &DMatrix<f64>,
    cpq: &DMatrix<f64>,
    spec: &SpectrumSpec,
    seed: u64,
    opts: &CompensatorOptions,
) -> Result<CompensatorDesign> {
    let nm = h.nrows();
    let (for_k, for_l) = spec
        .split(nm)
        .ok_or_else(|| Error::InvalidSpectrum("cannot split spectrum into conjugate-closed halves".into()))?;
    let mut best: Option<CompensatorDesign> = None;
    for r in 0..opts.restarts.max(1) as u64 {
        let s = seed.wrapping_add(2 * r);
        let k = place_multi_input(h, bp, &for_k, s)?;
        let l = place_multi_input(&h.transpose(), &cpq.transpose(), &for_l, s.wrapping_add(1))?.transpose();
        let comp = Compensator {
            a_bar: h - bp * &k - &l * cpq,
            b_bar: l,
            c_bar: -k,
            d_bar: DMatrix::zeros(bp.ncols(), cpq.nrows()),
        };
        let hbar = closed_loop(h, bp, cpq, &comp);
        let achieved = eigenvalues(&hbar)?;
        let err = pairing_error(spec.lambdas(), &achieved);
        if best.as_ref().is_none_or(|b| err < b.pairing_error) {
            best = Some(CompensatorDesign {
                achieved: pair_to(spec.lambdas(), &achieved),
                pairing_error: err,
                closed_loop_norm: crate::linalg::inf_norm(&hbar),
                compensator: comp,
                candidate: r as usize,
            });
        }
        if err <= opts.tol && opts.first_success {
            break;
        }
    }
    let best = best.expect("at least one restart");
    if best.pairing_error > opts.tol {
        return Err(Error::CompensatorNonConvergence {
            restarts: opts.restarts,
            best_error: best.pairing_error,
            best_spectrum: best.achieved.iter().map(|z| (z.re, z.im)).collect(),
        });
    }
    Ok(best)
}

/// On-disk spectrum: `{"lambdas": [[re, im], ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpectrumFile {
    pub lambdas: Vec<[f64; 2]>,
}

impl SpectrumFile {
    pub fn new(spec: &SpectrumSpec) -> Self {
        Self {
            lambdas: spec.lambdas().iter().map(|z| [z.re, z.im]).collect(),
        }
    }

    pub fn to_spec(&self) -> Result<SpectrumSpec> {
        SpectrumSpec::new(self.lambdas.iter().map(|&[re, im]| C64::new(re, im)).collect())
    }
}
