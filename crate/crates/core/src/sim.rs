//! Fixed-step simulation of the plant together with every component
//! observer, and log-linear decay-rate estimation on the resulting errors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assembler::{error_matrix, error_output_map, Synthesis};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, spectral_radius, Plant};
use crate::netsys::attempt_rng;

fn stacked_v(v: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    crate::linalg::stack_rows(v, n)
}

/// Where each component's estimator states live in the combined state
/// `[x; z_1; ...; z_q]`, plus the maps needed to read errors back out.
#[derive(Debug, Clone)]
struct Layout {
    n: usize,
    offsets: Vec<usize>,
    dims: Vec<usize>,
    // (component, local) for every global agent
    owner: Vec<(usize, usize)>,
    v: Vec<DMatrix<f64>>,
    outputs: Vec<Vec<DMatrix<f64>>>,
}

impl Layout {
    fn new(plant: &Plant, syn: &Synthesis) -> Self {
        let n = plant.n();
        let mut offsets = Vec::new();
        let mut dims = Vec::new();
        let mut owner = vec![(0, 0); plant.m()];
        let mut v = Vec::new();
        let mut outputs = Vec::new();
        let mut at = n;
        for (c, o) in syn.observers.iter().enumerate() {
            let o = &o.observer;
            offsets.push(at);
            dims.push(o.total_dim());
            at += o.total_dim();
            for (local, &g) in o.labels.iter().enumerate() {
                owner[g] = (c, local);
            }
            v.push(stacked_v(&o.v, n));
            outputs.push(error_output_map(o));
        }
        Self {
            n,
            offsets,
            dims,
            owner,
            v,
            outputs,
        }
    }

    fn total(&self) -> usize {
        self.n + self.dims.iter().sum::<usize>()
    }
}

/// The combined linear dynamics `w' = S w` with `w = [x; z_1; ...; z_q]`.
pub fn combined_matrix(plant: &Plant, syn: &Synthesis) -> DMatrix<f64> {
    let layout = Layout::new(plant, syn);
    let n = plant.n();
    let mut s = DMatrix::zeros(layout.total(), layout.total());
    s.view_mut((0, 0), (n, n)).copy_from(plant.a());
    for (c, cert) in syn.observers.iter().enumerate() {
        let o = &cert.observer;
        let base = layout.offsets[c];
        let off = o.offsets();
        let e = error_matrix(o);
        s.view_mut((base, base), e.shape()).copy_from(&e);
        let feed = syn.plan.components[c].feed;
        for (local, &g) in o.labels.iter().enumerate() {
            let row = base + off[local];
            let k = &o.k[local];
            let own = plant.s(g);
            let kc = k.columns(0, own) * plant.channel(g);
            let mut block = s.view_mut((row, 0), (k.nrows(), n));
            block += kc;
            if let Some(f) = feed.filter(|f| f.receiver == g) {
                // extra readout rows carry V_d' z_d from the donor
                let (dc, dl) = layout.owner[f.donor];
                let donor = &syn.observers[dc].observer;
                let col = layout.offsets[dc] + donor.offsets()[dl];
                let kv = k.columns(own, n) * donor.v[dl].transpose();
                let mut block = s.view_mut((row, col), kv.shape());
                block += kv;
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    /// Keep every `stride`-th step (the last step is always kept).
    pub stride: usize,
}

/// `min(1e-3, 0.1 / max_c |Hbar_c|_inf)`.
pub fn default_dt(syn: &Synthesis) -> f64 {
    let norm = syn
        .observers
        .iter()
        .map(|o| inf_norm(&error_matrix(&o.observer)))
        .fold(0.0, f64::max);
    if norm > 0.0 {
        1e-3f64.min(0.1 / norm)
    } else {
        1e-3
    }
}

#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// `z[sample][component]`, agent-ordered.
    pub z: Vec<Vec<DVector<f64>>>,
    /// `e[sample][agent] = x_agent - x`, global agent order.
    pub e: Vec<Vec<DVector<f64>>>,
    /// `eps[sample][component] = z - V x`, agent-ordered.
    pub eps: Vec<Vec<DVector<f64>>>,
}

impl SimulationTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn error_norms(&self, agent: usize) -> Vec<f64> {
        self.e.iter().map(|s| s[agent].norm()).collect()
    }

    pub fn stacked_error_norms(&self, component: usize) -> Vec<f64> {
        self.eps.iter().map(|s| s[component].norm()).collect()
    }

    /// Per-sample floor `1e2 * eps * max(|eps(0)|, |x(t)|)`: below it an
    /// error is indistinguishable from rounding in `x_i - x`.
    pub fn floors(&self) -> Vec<f64> {
        let initial = self
            .eps
            .first()
            .map(|s| s.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt())
            .unwrap_or(0.0);
        self.x
            .iter()
            .map(|x| 1e2 * f64::EPSILON * initial.max(x.norm()))
            .collect()
    }
}

/// Classic RK4 on the combined linear system.
pub fn simulate(
    plant: &Plant,
    syn: &Synthesis,
    x0: &DVector<f64>,
    z0: &[DVector<f64>],
    opts: &SimOptions,
) -> Result<SimulationTrace> {
    let layout = Layout::new(plant, syn);
    if x0.len() != plant.n() {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, expected {}", x0.len(), plant.n())));
    }
    if z0.len() != layout.dims.len() || z0.iter().zip(&layout.dims).any(|(z, &d)| z.len() != d) {
        return Err(Error::DimensionMismatch("initial estimator states do not match observer dimensions".into()));
    }
    if !(opts.dt > 0.0) || !(opts.horizon >= 0.0) {
        return Err(Error::DimensionMismatch("dt must be positive and the horizon nonnegative".into()));
    }
    let s = combined_matrix(plant, syn);
    let guard = opts.dt * spectral_radius(&s)?;
    if guard >= 1.0 {
        return Err(Error::StepSizeGuard(guard));
    }
    let mut w = DVector::zeros(layout.total());
    w.rows_mut(0, plant.n()).copy_from(x0);
    for (c, z) in z0.iter().enumerate() {
        w.rows_mut(layout.offsets[c], z.len()).copy_from(z);
    }
    let steps = (opts.horizon / opts.dt).round() as usize;
    let stride = opts.stride.max(1);
    let mut trace = SimulationTrace {
        times: Vec::new(),
        x: Vec::new(),
        z: Vec::new(),
        e: Vec::new(),
        eps: Vec::new(),
    };
    record(&mut trace, &layout, &w, 0.0);
    let dt = opts.dt;
    for step in 1..=steps {
        let k1 = &s * &w;
        let k2 = &s * (&w + &k1 * (dt / 2.0));
        let k3 = &s * (&w + &k2 * (dt / 2.0));
        let k4 = &s * (&w + &k3 * dt);
        w += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        if step % stride == 0 || step == steps {
            record(&mut trace, &layout, &w, step as f64 * dt);
        }
    }
    Ok(trace)
}

fn record(trace: &mut SimulationTrace, layout: &Layout, w: &DVector<f64>, t: f64) {
    let n = layout.n;
    let x = w.rows(0, n).into_owned();
    let z: Vec<DVector<f64>> = layout
        .offsets
        .iter()
        .zip(&layout.dims)
        .map(|(&o, &d)| w.rows(o, d).into_owned())
        .collect();
    let eps: Vec<DVector<f64>> = z.iter().zip(&layout.v).map(|(z, v)| z - v * &x).collect();
    let e = layout
        .owner
        .iter()
        .map(|&(c, local)| &layout.outputs[c][local] * &z[c] - &x)
        .collect();
    trace.times.push(t);
    trace.x.push(x);
    trace.z.push(z);
    trace.e.push(e);
    trace.eps.push(eps);
}

/// Initial conditions for acceptance-style runs: `x0` uniform on `[-1, 1]^n`,
/// all estimator states zero.
pub fn random_initial_state(plant: &Plant, syn: &Synthesis, seed: u64) -> (DVector<f64>, Vec<DVector<f64>>) {
    let mut rng = attempt_rng(seed, 0);
    let x0 = DVector::from_fn(plant.n(), |_, _| rng.random_range(-1.0..=1.0));
    let z0 = syn
        .observers
        .iter()
        .map(|o| DVector::zeros(o.observer.total_dim()))
        .collect();
    (x0, z0)
}

/// Estimator states `z_i = V_i x0` for which every internal error starts at zero.
pub fn exact_initial_state(syn: &Synthesis, x0: &DVector<f64>) -> Vec<DVector<f64>> {
    syn.observers
        .iter()
        .map(|o| stacked_v(&o.observer.v, x0.len()) * x0)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayEstimate {
    /// Slope of the log-norm fit; negative means decay.
    pub rate: f64,
    pub t0: f64,
    pub t1: f64,
    /// RMS residual of the log-linear fit.
    pub residual: f64,
    pub samples: usize,
}

const MIN_SAMPLES: usize = 10;

/// Least-squares slope of `log norm` against time over the last half of the
/// horizon, using only samples strictly above `floors`. When fewer than ten
/// samples there clear the floor, the window moves to the last half of the
/// usable stretch.
pub fn fit_decay(times: &[f64], norms: &[f64], floors: &[f64]) -> Result<DecayEstimate> {
    let usable: Vec<usize> = (0..times.len())
        .filter(|&k| norms[k] > floors[k] && norms[k].is_finite())
        .collect();
    if usable.len() < MIN_SAMPLES {
        return Err(Error::AllSamplesAtFloor);
    }
    let start = times[0];
    let half = start + (times[times.len() - 1] - start) / 2.0;
    let mut window: Vec<usize> = usable.iter().copied().filter(|&k| times[k] >= half).collect();
    if window.len() < MIN_SAMPLES {
        let last = times[*usable.last().expect("nonempty")];
        let mid = start + (last - start) / 2.0;
        window = usable.iter().copied().filter(|&k| times[k] >= mid).collect();
        if window.len() < MIN_SAMPLES {
            window = usable[usable.len() - MIN_SAMPLES..].to_vec();
        }
    }
    let pts: Vec<(f64, f64)> = window.iter().map(|&k| (times[k], norms[k].ln())).collect();
    let count = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / count;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / count;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let rate = sty / stt;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - my - rate * (p.0 - mt)).powi(2))
        .sum::<f64>()
        / count)
        .sqrt();
    Ok(DecayEstimate {
        rate,
        t0: pts[0].0,
        t1: pts[pts.len() - 1].0,
        residual,
        samples: pts.len(),
    })
}

/// Decay of `|e_i(t)|` for one global agent.
pub fn agent_decay(trace: &SimulationTrace, agent: usize) -> Result<DecayEstimate> {
    fit_decay(&trace.times, &trace.error_norms(agent), &trace.floors())
}

/// Decay of the stacked internal error of one component.
pub fn estimate_decay(trace: &SimulationTrace, component: usize) -> Result<DecayEstimate> {
    fit_decay(&trace.times, &trace.stacked_error_norms(component), &trace.floors())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRate {
    /// Global agent ids, 0-based.
    pub members: Vec<usize>,
    /// Largest real part of the assigned spectrum.
    pub assigned: f64,
    /// Slowest fitted agent rate; `None` when every agent sits at the floor.
    pub achieved: Option<f64>,
    pub donor_component: Option<usize>,
    /// The rate the component is held to: 0.9 times the slower of its
    /// assigned rate and its donor's achieved rate.
    pub bound: f64,
    pub pass: bool,
}

/// Checks each component's slowest agent against its assigned rate, or
/// against the donor's achieved rate when that is slower.
pub fn cascade_noise_check(syn: &Synthesis, trace: &SimulationTrace) -> Vec<ComponentRate> {
    let mut out: Vec<ComponentRate> = Vec::new();
    for (c, comp) in syn.plan.components.iter().enumerate() {
        let assigned = syn.observers[c]
            .certificate
            .target
            .iter()
            .map(|z| z[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let rates: Vec<Option<f64>> = comp
            .members
            .iter()
            .map(|&g| agent_decay(trace, g).ok().map(|d| d.rate))
            .collect();
        let achieved = if rates.iter().all(Option::is_some) {
            rates.iter().flatten().copied().reduce(f64::max)
        } else {
            None
        };
        let donor_component = comp.feed.map(|f| f.donor_component);
        let donor_rate = donor_component.and_then(|d| out[d].achieved);
        let slower = donor_rate.map_or(assigned, |r| r.max(assigned));
        let bound = 0.9 * slower;
        out.push(ComponentRate {
            members: comp.members.clone(),
            assigned,
            achieved,
            donor_component,
            bound,
            pass: achieved.is_some_and(|r| r <= bound),
        });
    }
    out
}
