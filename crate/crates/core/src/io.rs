//! JSON artifacts for synthesized observers. Agent labels on disk are
//! global and 1-based; a file is reloaded by re-planning the cascade and
//! re-assembling every observer from its stored gains and compensator, and
//! the stored blocks must match the re-assembly.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::assembler::{
    assemble_observer, plan_cascade, CertifiedObserver, DistributedObserver, ObserverCertificate,
    OutputCombination, Synthesis,
};
use crate::error::{Error, Result};
use crate::graph::{GraphFile, NeighborGraph};
use crate::linalg::{matrix_from_rows, matrix_to_rows, max_abs, Plant, PlantFile};
use crate::netsys::{parse_pair, GainAssignment};
use crate::spectra::Compensator;

type Rows = Vec<Vec<f64>>;

/// Largest entry-wise difference tolerated between stored and re-assembled
/// blocks, relative to the block magnitude.
const RELOAD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CompensatorFile {
    #[serde(rename = "Abar")]
    pub a_bar: Rows,
    #[serde(rename = "Bbar")]
    pub b_bar: Rows,
    #[serde(rename = "Cbar")]
    pub c_bar: Rows,
    #[serde(rename = "Dbar")]
    pub d_bar: Rows,
}

impl From<&Compensator> for CompensatorFile {
    fn from(c: &Compensator) -> Self {
        Self {
            a_bar: matrix_to_rows(&c.a_bar),
            b_bar: matrix_to_rows(&c.b_bar),
            c_bar: matrix_to_rows(&c.c_bar),
            d_bar: matrix_to_rows(&c.d_bar),
        }
    }
}

impl CompensatorFile {
    fn to_compensator(&self, n: usize, order: usize, width: usize) -> Result<Compensator> {
        let read = |rows: &Rows, r: usize, c: usize, name: &str| {
            let m = if r == 0 { DMatrix::zeros(0, c) } else { matrix_from_rows(rows, c)? };
            if m.shape() != (r, c) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            Ok(m)
        };
        Ok(Compensator {
            a_bar: read(&self.a_bar, order, order, "Abar")?,
            b_bar: read(&self.b_bar, order, width, "Bbar")?,
            c_bar: read(&self.c_bar, n, order, "Cbar")?,
            d_bar: read(&self.d_bar, n, width, "Dbar")?,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AgentFile {
    pub agent: usize,
    pub n_i: usize,
    #[serde(rename = "H")]
    pub h: BTreeMap<String, Rows>,
    #[serde(rename = "K")]
    pub k: Rows,
    #[serde(rename = "M")]
    pub m: BTreeMap<String, Rows>,
    #[serde(rename = "V")]
    pub v: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeedFile {
    pub donor_component: usize,
    pub donor: usize,
    pub receiver: usize,
}

/// Gains with global labels: `f` keyed `"i,j"`, `K` in member order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentGainsFile {
    pub f: BTreeMap<String, f64>,
    #[serde(rename = "K")]
    pub k: Vec<Rows>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObserverFile {
    pub members: Vec<usize>,
    pub source: bool,
    pub feed: Option<FeedFile>,
    pub p: usize,
    pub q: usize,
    pub combination: OutputCombination,
    pub agents: Vec<AgentFile>,
    pub comp: CompensatorFile,
    pub gains: ComponentGainsFile,
    pub certificates: ObserverCertificate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisFile {
    pub plant: PlantFile,
    pub graph: GraphFile,
    pub seed: u64,
    pub observers: Vec<ObserverFile>,
}

fn key(labels: &[usize], i: usize, k: usize) -> String {
    format!("{},{}", labels[i] + 1, labels[k] + 1)
}

/// Local pair from a global 1-based key.
fn local_pair(labels: &[usize], key: &str) -> Result<(usize, usize)> {
    let (a, b) = parse_pair(key)?;
    let find = |g: usize| {
        labels
            .iter()
            .position(|&l| l == g)
            .ok_or_else(|| Error::DimensionMismatch(format!("agent {} is not in this component", g + 1)))
    };
    Ok((find(a)?, find(b)?))
}

fn observer_file(obs: &CertifiedObserver, plan: &crate::assembler::ComponentPlan) -> ObserverFile {
    let o = &obs.observer;
    let labels = &o.labels;
    let agents = (0..o.agents())
        .map(|i| AgentFile {
            agent: labels[i] + 1,
            n_i: o.dims()[i],
            h: o
                .h
                .iter()
                .filter(|((a, _), _)| *a == i)
                .map(|(&(a, k), b)| (key(labels, a, k), matrix_to_rows(b)))
                .collect(),
            k: matrix_to_rows(&o.k[i]),
            m: o
                .m_blocks
                .iter()
                .filter(|((a, _), _)| *a == i)
                .map(|(&(a, k), b)| (key(labels, a, k), matrix_to_rows(b)))
                .collect(),
            v: matrix_to_rows(&o.v[i]),
        })
        .collect();
    ObserverFile {
        members: labels.iter().map(|l| l + 1).collect(),
        source: plan.source,
        feed: plan.feed.map(|f| FeedFile {
            donor_component: f.donor_component + 1,
            donor: f.donor + 1,
            receiver: f.receiver + 1,
        }),
        p: labels[o.p] + 1,
        q: labels[o.q] + 1,
        combination: o.combination,
        agents,
        comp: CompensatorFile::from(&o.compensator),
        gains: ComponentGainsFile {
            f: o.gains.f.iter().map(|(&(i, j), &x)| (key(labels, i, j), x)).collect(),
            k: o.gains.k.iter().map(matrix_to_rows).collect(),
            seed: obs.certificate.gain_seed,
        },
        certificates: obs.certificate.clone(),
    }
}

impl SynthesisFile {
    pub fn new(plant: &Plant, graph: &NeighborGraph, seed: u64, syn: &Synthesis) -> Self {
        Self {
            plant: PlantFile::from(plant),
            graph: GraphFile::from(graph),
            seed,
            observers: syn
                .observers
                .iter()
                .zip(&syn.plan.components)
                .map(|(o, c)| observer_file(o, c))
                .collect(),
        }
    }

    /// Rebuilds the plant, graph and synthesis, checking that the stored
    /// blocks agree with a fresh assembly from the stored gains and
    /// compensator.
    pub fn load(&self) -> Result<(Plant, NeighborGraph, Synthesis)> {
        let plant = Plant::try_from(self.plant.clone())?;
        let graph = NeighborGraph::try_from(self.graph.clone())?;
        let mut plan = plan_cascade(&plant, &graph)?;
        if plan.components.len() != self.observers.len() {
            return Err(Error::DimensionMismatch(format!(
                "file has {} observers, the graph has {} components",
                self.observers.len(),
                plan.components.len()
            )));
        }
        let n = plant.n();
        let mut observers = Vec::new();
        for (c, file) in self.observers.iter().enumerate() {
            let labels: Vec<usize> = file.members.iter().map(|&l| l.wrapping_sub(1)).collect();
            if labels != plan.components[c].members {
                return Err(Error::DimensionMismatch(format!("component {} members differ", c + 1)));
            }
            let sub = plan.component_plant(&plant, c)?;
            let local = graph.induced(&labels)?;
            let (p, q) = local_pair(&labels, &format!("{},{}", file.p, file.q))?;
            let mut f = BTreeMap::new();
            for (key, &x) in &file.gains.f {
                f.insert(local_pair(&labels, key)?, x);
            }
            let k = file
                .gains
                .k
                .iter()
                .map(|rows| matrix_from_rows(rows, n))
                .collect::<Result<Vec<_>>>()?;
            let gains = GainAssignment { f, k };
            // m - 1 normally, n m for a fallback-order compensator
            let order = file.comp.a_bar.len();
            let width = if p == q { sub.s(p) } else { n };
            let comp = file.comp.to_compensator(n, order, width)?;
            let mut observer = assemble_observer(&sub, &local, &gains, &comp, p, q, file.combination)?;
            observer.labels = labels.clone();
            check_blocks(&observer, file)?;
            plan.components[c].p = p;
            plan.components[c].q = q;
            observers.push(CertifiedObserver {
                observer,
                certificate: file.certificates.clone(),
            });
        }
        Ok((plant, graph, Synthesis { plan, observers }))
    }
}

fn check_blocks(o: &DistributedObserver, file: &ObserverFile) -> Result<()> {
    let labels = &o.labels;
    let compare = |stored: &Rows, fresh: &DMatrix<f64>, what: String| {
        let m = matrix_from_rows(stored, fresh.ncols())?;
        let scale = max_abs(fresh).max(1.0);
        if m.shape() != fresh.shape() || max_abs(&(m - fresh)) > RELOAD_TOL * scale {
            return Err(Error::DimensionMismatch(format!("stored {what} does not match the re-assembly")));
        }
        Ok(())
    };
    if file.agents.len() != o.agents() {
        return Err(Error::DimensionMismatch("agent count differs".into()));
    }
    for (i, a) in file.agents.iter().enumerate() {
        if a.agent != labels[i] + 1 || a.n_i != o.dims()[i] {
            return Err(Error::DimensionMismatch(format!("agent {} dimensions differ", labels[i] + 1)));
        }
        compare(&a.k, &o.k[i], format!("K_{}", a.agent))?;
        compare(&a.v, &o.v[i], format!("V_{}", a.agent))?;
        for (blocks, stored, name) in [(&o.h, &a.h, "H"), (&o.m_blocks, &a.m, "M")] {
            let own = blocks.keys().filter(|(r, _)| *r == i).count();
            if own != stored.len() {
                return Err(Error::DimensionMismatch(format!("{name} blocks of agent {} differ", a.agent)));
            }
            for (key, rows) in stored {
                let pair = local_pair(labels, key)?;
                let fresh = blocks
                    .get(&pair)
                    .ok_or_else(|| Error::DimensionMismatch(format!("{name}_{key} is not a neighbor block")))?;
                compare(rows, fresh, format!("{name}_{key}"))?;
            }
        }
    }
    Ok(())
}
