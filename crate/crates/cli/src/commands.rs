//! The check, synth, simulate and demo subcommands.

use std::path::{Path, PathBuf};

use distobs::assembler::{plan_cascade, spectrum_size, SpectrumRequest, Synthesis, SynthesisOptions};
use distobs::graph::{GraphFile, NeighborGraph};
use distobs::io::SynthesisFile;
use distobs::linalg::{is_jointly_observable, is_observable, Plant, PlantFile};
use distobs::sim::{
    agent_decay, cascade_noise_check, default_dt, exact_initial_state, random_initial_state, simulate, SimOptions,
    SimulationTrace,
};
use distobs::Error;
use serde_json::json;

use crate::input::{
    ensure_parent, load_graph, load_plant, read_json, spectrum_request, to_json, write_file, Failure, Outcome, EXIT_CHECK_FAILED,
    EXIT_HYPOTHESIS, EXIT_SYNTHESIS,
};

fn set(labels: &[usize]) -> String {
    let inner: Vec<String> = labels.iter().map(|l| (l + 1).to_string()).collect();
    format!("{{{}}}", inner.join(","))
}

/// Result of the hypothesis checks: report lines and the first failure.
pub struct Diagnosis {
    pub lines: Vec<String>,
    pub failure: Option<String>,
}

pub fn diagnose(plant: &Plant, graph: &NeighborGraph) -> Outcome<Diagnosis> {
    if graph.m() != plant.m() {
        return Err(Failure::io(format!(
            "plant has {} channels but graph has {} vertices",
            plant.m(),
            graph.m()
        )));
    }
    let mut lines = vec![format!("plant: n = {}, m = {}; all C_i nonzero", plant.n(), plant.m())];
    for i in 0..plant.m() {
        let alone = is_observable(plant.channel(i), plant.a());
        lines.push(format!(
            "agent {}: (C_{}, A) {}",
            i + 1,
            i + 1,
            if alone { "observable" } else { "not observable alone" }
        ));
    }
    let joint = is_jointly_observable(plant);
    lines.push(format!("joint observability: {}", if joint { "yes" } else { "no" }));
    if graph.is_strongly_connected() {
        lines.push("neighbor graph: strongly connected".into());
        let failure = (!joint).then(|| "the system is not jointly observable".to_string());
        return Ok(Diagnosis { lines, failure });
    }
    let dec = graph.scc_decompose();
    let comps: Vec<String> = dec.components.iter().map(|c| set(c)).collect();
    lines.push(format!(
        "neighbor graph: not strongly connected; components {}",
        comps.join(", ")
    ));
    let mut failure = None;
    for c in 0..dec.count() {
        if !dec.is_source(c) {
            continue;
        }
        let sub = plant.restrict(&dec.components[c])?;
        let ok = is_jointly_observable(&sub);
        lines.push(format!(
            "source component {}: {}",
            set(&dec.components[c]),
            if ok { "jointly observable" } else { "not jointly observable" }
        ));
        if !ok && failure.is_none() {
            failure = Some(Error::SourceNotObservable(dec.components[c].clone()).to_string());
        }
    }
    Ok(Diagnosis { lines, failure })
}

pub fn check(plant_path: &Path, graph_path: &Path) -> Outcome<()> {
    let plant = match load_plant(plant_path) {
        Ok(p) => p,
        Err(f) if f.code == EXIT_HYPOTHESIS => {
            println!("FAIL: {f}");
            return Err(Failure::new(EXIT_CHECK_FAILED, f.message));
        }
        Err(f) => return Err(f),
    };
    let graph = load_graph(graph_path)?;
    let d = diagnose(&plant, &graph)?;
    for line in &d.lines {
        println!("{line}");
    }
    match d.failure {
        Some(msg) => {
            println!("FAIL: {msg}");
            Err(Failure::new(EXIT_CHECK_FAILED, msg))
        }
        None => {
            println!("OK: synthesis hypotheses hold");
            Ok(())
        }
    }
}

pub struct SynthConfig<'a> {
    pub plant: &'a Path,
    pub graph: &'a Path,
    pub spectrum: Option<&'a str>,
    pub rate: Option<f64>,
    pub seed: u64,
    pub out: &'a Path,
    pub allow_fallback_order: bool,
}

fn run_synthesis(
    plant: &Plant,
    graph: &NeighborGraph,
    request: &SpectrumRequest,
    seed: u64,
    allow_fallback: bool,
) -> Outcome<Synthesis> {
    let mut opts = SynthesisOptions::default();
    if allow_fallback {
        // explicit spectra sized for the full-order compensator select it directly
        if let SpectrumRequest::Explicit(specs) = request {
            let plan = plan_cascade(plant, graph)?;
            let full = plan.components.len() == specs.len()
                && plan
                    .components
                    .iter()
                    .zip(specs)
                    .all(|(c, s)| s.len() == spectrum_size(plant.n(), c.members.len(), true));
            opts.compensator.full_order = full;
        }
    }
    match distobs::assembler::synthesize(plant, graph, request, seed, &opts) {
        Ok(s) => Ok(s),
        Err(e) => {
            let f = Failure::from(e);
            let retry = allow_fallback
                && f.code == EXIT_SYNTHESIS
                && !opts.compensator.full_order
                && matches!(request, SpectrumRequest::Rate(_));
            if !retry {
                return Err(f);
            }
            eprintln!("strict order failed ({f}); retrying with the full-order compensator");
            opts.compensator.full_order = true;
            Ok(distobs::assembler::synthesize(plant, graph, request, seed, &opts)?)
        }
    }
}

pub fn synth(cfg: &SynthConfig) -> Outcome<()> {
    let plant = load_plant(cfg.plant)?;
    let graph = load_graph(cfg.graph)?;
    if let Some(msg) = diagnose(&plant, &graph)?.failure {
        return Err(Failure::new(EXIT_HYPOTHESIS, msg));
    }
    let request = spectrum_request(cfg.spectrum, cfg.rate)?;
    let syn = run_synthesis(&plant, &graph, &request, cfg.seed, cfg.allow_fallback_order)?;

    let file = SynthesisFile::new(&plant, &graph, cfg.seed, &syn);
    let observer_path = cfg.out.join("observer.json");
    write_file(&observer_path, &to_json(&file))?;

    let components: Vec<_> = syn
        .observers
        .iter()
        .zip(&syn.plan.components)
        .map(|(o, c)| {
            json!({
                "members": c.members.iter().map(|l| l + 1).collect::<Vec<_>>(),
                "p": c.members[c.p] + 1,
                "q": c.members[c.q] + 1,
                "dims": o.observer.dims(),
                "certificate": o.certificate,
            })
        })
        .collect();
    let certificate = json!({ "seed": cfg.seed, "components": components });
    let cert_path = cfg.out.join("certificate.json");
    write_file(&cert_path, &to_json(&certificate))?;

    for (o, c) in syn.observers.iter().zip(&syn.plan.components) {
        let cert = &o.certificate;
        println!(
            "component {}: agent dims {:?}, pairing error {:.2e}, closed-loop norm {:.3}, design residual {:.2e}{}",
            set(&c.members),
            o.observer.dims(),
            cert.pairing_error,
            cert.closed_loop_norm,
            cert.residuals.max(),
            if cert.gains_refined { ", gains refined" } else { "" }
        );
    }
    println!("wrote {} and {}", observer_path.display(), cert_path.display());
    Ok(())
}

pub struct SimConfig<'a> {
    pub observer: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub dt: Option<f64>,
    pub horizon: f64,
    pub stride: usize,
    pub exact_init: bool,
    pub full_state: bool,
}

fn write_trace(path: &Path, syn: &Synthesis, trace: &SimulationTrace, full_state: bool) -> Outcome<()> {
    let n = trace.x.first().map_or(0, |x| x.len());
    let agents = trace.e.first().map_or(0, |e| e.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|k| format!("x_{k}")));
    header.extend((1..=agents).map(|i| format!("e{i}")));
    if full_state {
        for o in &syn.observers {
            for (local, &dim) in o.observer.dims().iter().enumerate() {
                let agent = o.observer.labels[local] + 1;
                header.extend((1..=dim).map(|k| format!("z{agent}_{k}")));
            }
        }
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let io_err = |e: csv::Error| Failure::io(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(io_err)?;
    for k in 0..trace.len() {
        let mut row = vec![trace.times[k].to_string()];
        row.extend(trace.x[k].iter().map(|v| v.to_string()));
        row.extend(trace.e[k].iter().map(|e| e.norm().to_string()));
        if full_state {
            for z in &trace.z[k] {
                row.extend(z.iter().map(|v| v.to_string()));
            }
        }
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn simulate_cmd(cfg: &SimConfig) -> Outcome<()> {
    let file: SynthesisFile = read_json(cfg.observer)?;
    let (plant, _graph, syn) = file
        .load()
        .map_err(|e| Failure::io(format!("{}: {e}", cfg.observer.display())))?;
    let seed = cfg.seed.unwrap_or(file.seed);
    let (x0, mut z0) = random_initial_state(&plant, &syn, seed);
    if cfg.exact_init {
        z0 = exact_initial_state(&syn, &x0);
    }
    let dt = cfg.dt.unwrap_or_else(|| default_dt(&syn));
    if !(dt > 0.0 && cfg.horizon > 0.0 && cfg.stride > 0) {
        return Err(Failure::io("--dt, --horizon and --stride must be positive"));
    }
    let opts = SimOptions {
        horizon: cfg.horizon,
        dt,
        stride: cfg.stride,
    };
    let trace = simulate(&plant, &syn, &x0, &z0, &opts)?;

    let trace_path = cfg.out.join("trace.csv");
    ensure_parent(&trace_path)?;
    write_trace(&trace_path, &syn, &trace, cfg.full_state)?;

    let mut agents = Vec::new();
    for i in 0..plant.m() {
        match agent_decay(&trace, i) {
            Ok(d) => {
                println!("agent {}: rate {:.4} (fit over t in [{:.2}, {:.2}])", i + 1, d.rate, d.t0, d.t1);
                agents.push(json!({
                    "agent": i + 1, "status": "decaying", "rate": d.rate,
                    "t0": d.t0, "t1": d.t1, "residual": d.residual, "samples": d.samples,
                }));
            }
            Err(Error::AllSamplesAtFloor) => {
                println!("agent {}: at floor", i + 1);
                agents.push(json!({ "agent": i + 1, "status": "at floor", "rate": null }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let components: Vec<_> = cascade_noise_check(&syn, &trace)
        .into_iter()
        .map(|r| {
            println!(
                "component {}: assigned {:.4}, achieved {}, bound {:.4}: {}",
                set(&r.members),
                r.assigned,
                r.achieved.map_or("at floor".to_string(), |a| format!("{a:.4}")),
                r.bound,
                if r.pass { "pass" } else { "FAIL" }
            );
            json!({
                "members": r.members.iter().map(|l| l + 1).collect::<Vec<_>>(),
                "assigned": r.assigned,
                "achieved": r.achieved,
                "donor_component": r.donor_component.map(|c| c + 1),
                "bound": r.bound,
                "pass": r.pass,
            })
        })
        .collect();
    let report = json!({
        "seed": seed,
        "dt": dt,
        "horizon": cfg.horizon,
        "init": if cfg.exact_init { "exact" } else { "zero" },
        "x0": x0.iter().copied().collect::<Vec<f64>>(),
        "agents": agents,
        "components": components,
    });
    let decay_path = cfg.out.join("decay.json");
    write_file(&decay_path, &to_json(&report))?;
    println!("wrote {} and {}", trace_path.display(), decay_path.display());
    Ok(())
}

/// The nilpotent three-state plant observed by two agents on a two-cycle;
/// neither channel alone is observable.
fn demo_inputs() -> (PlantFile, GraphFile) {
    let plant = PlantFile {
        n: 3,
        a: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]],
        c: vec![vec![vec![0.0, 0.0, 1.0]], vec![vec![1.0, 0.0, 0.0]]],
    };
    let graph = GraphFile {
        m: 2,
        arcs: vec![[1, 2], [2, 1]],
    };
    (plant, graph)
}

pub fn demo(out: &Path, seed: u64, dt: Option<f64>, horizon: f64) -> Outcome<()> {
    let (plant, graph) = demo_inputs();
    let plant_path = out.join("plant.json");
    let graph_path = out.join("graph.json");
    write_file(&plant_path, &to_json(&plant))?;
    write_file(&graph_path, &to_json(&graph))?;
    println!("== check");
    check(&plant_path, &graph_path)?;
    println!("== synth");
    synth(&SynthConfig {
        plant: &plant_path,
        graph: &graph_path,
        spectrum: Some("-1,-2,-3,-4,-5,-6,-7"),
        rate: None,
        seed,
        out,
        allow_fallback_order: false,
    })?;
    println!("== simulate");
    let observer: PathBuf = out.join("observer.json");
    simulate_cmd(&SimConfig {
        observer: &observer,
        out,
        seed: None,
        dt,
        horizon,
        stride: 10,
        exact_init: false,
        full_state: false,
    })
}
