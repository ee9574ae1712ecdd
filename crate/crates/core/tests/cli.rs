use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarm-dispersal")).args(args).output().unwrap()
}

fn keys(v: &Value) -> String {
    v.as_object().unwrap().keys().cloned().collect::<Vec<_>>().join(",")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn output_formats_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for args in [
        vec!["run", "--env", "path:5", "--events"],
        vec!["experiment", "--env", "path:5", "--replicates", "2"],
        vec!["couple", "--env", "path:5"],
        vec!["verify", "invariants", "--replicates", "4"],
        vec!["tasep", "--t-max", "50"],
    ] {
        let status = Command::new(env!("CARGO_BIN_EXE_swarm-dispersal")).args(&args).args(["--out", out]).output().unwrap();
        assert!(status.status.success(), "{args:?}");
    }
    let series = dir.path().join("series");
    assert!(bin(&["plotdata", "--env", "path:5", "--out", series.to_str().unwrap()]).status.success());
    let d = dir.path();
    let coupling = json(&d.join("coupling.json"));
    let verdicts = &coupling[0]["verdicts"];
    let checks: Vec<&str> = verdicts.as_array().unwrap().iter().map(|v| v["check"].as_str().unwrap()).collect();
    let first_line = fs::read_to_string(d.join("run.events")).unwrap().lines().nth(3).unwrap().to_string();
    let event_fields = first_line.split('\t').count();
    let actual = format!(
        "run.json: {}\nrun.events: # mode, # horizon, # max_index, then {event_fields} tab-separated fields\n\
         summary.csv: {}\nruns.csv: {}\nseries.csv: {}\ncoupling.json: {}\ncoupling verdict: {}\n\
         coupling checks: {}\nverify-invariants.json: {}\ntasep.json: {}\n",
        keys(&json(&d.join("run.json"))),
        header(&d.join("summary.csv")),
        header(&d.join("runs.csv")),
        header(&series.join("series.csv")),
        keys(&coupling[0]),
        keys(&verdicts[0]),
        checks.join(","),
        keys(&json(&d.join("verify-invariants.json"))),
        keys(&json(&d.join("tasep.json"))),
    );
    let golden = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/formats.txt")).unwrap();
    assert_eq!(actual, golden);
}

#[test]
fn exit_codes() {
    assert_eq!(bin(&["run", "--env", "path:4"]).status.code(), Some(0));
    assert_eq!(bin(&["run", "--env", "nowhere:4"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--env", "map:/nonexistent.map"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(&["run", "--env", "path:40", "--horizon", "3"]).status.code(), Some(2));
    assert_eq!(bin(&["experiment", "--env", "path:40", "--horizon", "3", "--replicates", "2"]).status.code(), Some(2));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn scripted_adversary_and_graph_files() {
    let dir = tempfile::tempdir().unwrap();
    let graph = dir.path().join("g.json");
    fs::write(&graph, r#"{"n": 4, "edges": [[1, 2], [2, 3], [3, 4]], "sources": [1]}"#).unwrap();
    let script = dir.path().join("s.json");
    fs::write(&script, r#"[{"t_min": 0.0, "t_max": 1000.0, "robot_index": 3}]"#).unwrap();
    let out = bin(&[
        "run",
        "--env",
        &format!("graph:{}", graph.display()),
        "--c",
        "0.5",
        "--adversary",
        &format!("scripted:{}", script.display()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(result["n"], 4);
    assert!(result["crashed"].as_u64().unwrap() <= 1);
    assert_eq!(result["adversary"], "scripted");
}
