//! End-to-end runs of the `distobs` binary on temporary directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const E1_PLANT: &str = r#"{"n": 3, "A": [[0,1,0],[0,0,0],[0,0,0]], "C": [[[0,0,1]], [[1,0,0]]]}"#;
const TWO_CYCLE: &str = r#"{"m": 2, "arcs": [[1,2],[2,1]]}"#;
const E1_SPECTRUM: &str = "-1,-2,-3,-4,-5,-6,-7";

fn distobs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_distobs")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, contents: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth_e1(dir: &Path, out: &str, seed: &str) -> Output {
    let plant = write(dir, "plant.json", E1_PLANT);
    let graph = write(dir, "graph.json", TWO_CYCLE);
    let out = dir.join(out);
    distobs(&[
        "synth",
        "--plant",
        &plant,
        "--graph",
        &graph,
        "--spectrum",
        E1_SPECTRUM,
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn check_accepts_e1() {
    let dir = TempDir::new().unwrap();
    let plant = write(dir.path(), "plant.json", E1_PLANT);
    let graph = write(dir.path(), "graph.json", TWO_CYCLE);
    let o = distobs(&["check", "--plant", &plant, "--graph", &graph]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("OK: synthesis hypotheses hold"));
    assert!(stdout(&o).contains("not observable alone"));
}

#[test]
fn check_reports_zero_channel() {
    let dir = TempDir::new().unwrap();
    let plant = write(
        dir.path(),
        "plant.json",
        r#"{"n": 3, "A": [[0,1,0],[0,0,0],[0,0,0]], "C": [[[0,0,1]], [[0,0,0]]]}"#,
    );
    let graph = write(dir.path(), "graph.json", TWO_CYCLE);
    let o = distobs(&["check", "--plant", &plant, "--graph", &graph]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("C_2 is zero"));
}

#[test]
fn check_names_unobservable_source() {
    let dir = TempDir::new().unwrap();
    // path 1 -> 2; agent 1 alone cannot see the first coordinate
    let plant = write(dir.path(), "plant.json", E1_PLANT);
    let graph = write(dir.path(), "graph.json", r#"{"m": 2, "arcs": [[1,2]]}"#);
    let o = distobs(&["check", "--plant", &plant, "--graph", &graph]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("source component {1} is not jointly observable"));

    let o = distobs(&["synth", "--plant", &plant, "--graph", &graph, "--rate", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn parse_errors_carry_line_context() {
    let dir = TempDir::new().unwrap();
    let plant = write(dir.path(), "plant.json", "{\"n\": 3,\n \"A\": [[0,1,0],\n oops]}");
    let graph = write(dir.path(), "graph.json", TWO_CYCLE);
    let o = distobs(&["check", "--plant", &plant, "--graph", &graph]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
}

#[test]
fn synth_writes_e1_observer() {
    let dir = TempDir::new().unwrap();
    let o = synth_e1(dir.path(), "out", "7");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cert = read_json(&dir.path().join("out/certificate.json"));
    let comp = &cert["components"][0];
    assert_eq!(comp["dims"], serde_json::json!([3, 4]));
    assert_eq!(cert["seed"], 7);
    let c = &comp["certificate"];
    assert!(c["pairing_error"].as_f64().unwrap() <= 1e-6);
    assert_eq!(c["achieved"].as_array().unwrap().len(), 7);
    assert!(c["residuals"]["output_equation"].as_f64().unwrap() <= 1e-9);
    assert!(c["residuals"]["state_equation"].as_f64().unwrap() <= 1e-9);
    assert!(dir.path().join("out/observer.json").is_file());
}

#[test]
fn synth_is_reproducible_and_seed_sensitive() {
    let dir = TempDir::new().unwrap();
    assert!(synth_e1(dir.path(), "a", "7").status.success());
    assert!(synth_e1(dir.path(), "b", "7").status.success());
    assert!(synth_e1(dir.path(), "c", "8").status.success());
    for name in ["observer.json", "certificate.json"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    let a = read_json(&dir.path().join("a/certificate.json"));
    let c = read_json(&dir.path().join("c/certificate.json"));
    let spectrum = |v: &Value| -> Vec<f64> {
        let mut re: Vec<f64> = v["components"][0]["certificate"]["achieved"]
            .as_array()
            .unwrap()
            .iter()
            .map(|z| z[0].as_f64().unwrap())
            .collect();
        re.sort_by(f64::total_cmp);
        re
    };
    for (x, y) in spectrum(&a).iter().zip(spectrum(&c)) {
        assert!((x - y).abs() <= 1e-6);
    }
    let oa = read_json(&dir.path().join("a/observer.json"));
    let oc = read_json(&dir.path().join("c/observer.json"));
    assert_ne!(oa["observers"][0]["gains"], oc["observers"][0]["gains"]);
}

#[test]
fn simulate_reports_decay() {
    let dir = TempDir::new().unwrap();
    assert!(synth_e1(dir.path(), "out", "7").status.success());
    let out = dir.path().join("out");
    let o = distobs(&["simulate", "--out", out.to_str().unwrap(), "--dt", "1e-3", "--full-state"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("decay.json"));
    for agent in report["agents"].as_array().unwrap() {
        assert_eq!(agent["status"], "decaying");
        assert!(agent["rate"].as_f64().unwrap() <= -0.9, "{agent}");
    }
    assert_eq!(report["components"][0]["pass"], true);

    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.starts_with("t,x_1,x_2,x_3,e1,e2,z1_1"));
    assert_eq!(header.split(',').count(), 1 + 3 + 2 + 3 + 4);
}

#[test]
fn exact_initialization_is_at_floor() {
    let dir = TempDir::new().unwrap();
    assert!(synth_e1(dir.path(), "out", "7").status.success());
    let out = dir.path().join("out");
    let o = distobs(&["simulate", "--out", out.to_str().unwrap(), "--init", "exact", "--horizon", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("decay.json"));
    for agent in report["agents"].as_array().unwrap() {
        assert_eq!(agent["status"], "at floor");
    }
}

#[test]
fn simulate_rejects_tampered_observer() {
    let dir = TempDir::new().unwrap();
    assert!(synth_e1(dir.path(), "out", "7").status.success());
    let path = dir.path().join("out/observer.json");
    let mut file = read_json(&path);
    file["observers"][0]["agents"][0]["K"][0][0] = serde_json::json!(123.0);
    fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    let o = distobs(&["simulate", "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn cascade_simulation_reports_donor() {
    let dir = TempDir::new().unwrap();
    // agent 1 observes everything; agent 2 listens to it
    let plant = write(
        dir.path(),
        "plant.json",
        r#"{"n": 2, "A": [[0,1],[-1,0]], "C": [[[1,0]], [[0,1]]]}"#,
    );
    let graph = write(dir.path(), "graph.json", r#"{"m": 2, "arcs": [[1,2]]}"#);
    let out = dir.path().join("out");
    let o = distobs(&[
        "synth", "--plant", &plant, "--graph", &graph, "--spectrum", "-1,-2;-1.5,-2.5", "--seed", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = distobs(&["simulate", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("decay.json"));
    let comps = report["components"].as_array().unwrap();
    assert_eq!(comps.len(), 2);
    assert_eq!(comps[1]["donor_component"], 1);
    assert!(comps.iter().all(|c| c["pass"] == true), "{report}");
}

#[test]
fn demo_runs_end_to_end() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("demo");
    let o = distobs(&["demo", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("OK: synthesis hypotheses hold"));
    assert!(s.contains("agent dims [3, 4]"));
    for name in ["plant.json", "graph.json", "observer.json", "certificate.json", "trace.csv", "decay.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn fallback_order_accepts_full_order_spectrum() {
    let dir = TempDir::new().unwrap();
    let plant = write(dir.path(), "plant.json", E1_PLANT);
    let graph = write(dir.path(), "graph.json", TWO_CYCLE);
    let out = dir.path().join("out");
    let full = "-1,-2,-3,-4,-5,-6,-7,-8,-9,-10,-11,-12";
    let o = distobs(&["synth", "--plant", &plant, "--graph", &graph, "--spectrum", full, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "a full-order spectrum needs the fallback flag");
    let o = distobs(&[
        "synth", "--plant", &plant, "--graph", &graph, "--spectrum", full, "--allow-fallback-order", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cert = read_json(&out.join("certificate.json"));
    assert_eq!(cert["components"][0]["dims"], serde_json::json!([3, 9]));
    let o = distobs(&["simulate", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
