use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn calibeat(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_calibeat"));
    cmd.args(args).env_remove("CALIBEAT_OUT_DIR").env_remove("CALIBEAT_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = r#"{
  "name": "small",
  "space": {"kind": "cube", "dim": 1},
  "procedure": {"name": "simple_calibeat"},
  "source": {"kind": "bernoulli", "p": 0.3},
  "side": [{"kind": "cycle", "period": 2}],
  "t": 300,
  "seed": 4
}"#;

#[test]
fn run_writes_trace_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("out");
    let o = calibeat(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let trace = fs::read_to_string(out.join("small_trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.starts_with("t,a_1,b_1,c_1,sq_err,B,K_l2,K_l1,R,R_tilde,bound"), "{header}");
    assert_eq!(trace.lines().count(), 301);

    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("small_summary.json")).unwrap()).unwrap();
    for key in ["final_scores", "bounds", "seeds", "config_hash"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    assert_eq!(summary["bounds"][0]["pass"], Value::Bool(true));
    let printed: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(printed["config_hash"], summary["config_hash"]);
}

#[test]
fn seeds_reproduce_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let traces: Vec<String> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = dir.path().join(d);
            let o = calibeat(
                &["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "9", "--t", "50"],
                &[],
            );
            assert!(o.status.success());
            fs::read_to_string(out.join("small_trace.csv")).unwrap()
        })
        .collect();
    assert_eq!(traces[0], traces[1]);
    assert_eq!(traces[0].lines().count(), 51);
}

#[test]
fn env_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out = dir.path().join("from_env");
    let o = calibeat(&["run", "--config", cfg.to_str().unwrap(), "--format", "csv"], &[("CALIBEAT_OUT_DIR", &out)]);
    assert!(o.status.success());
    assert!(out.join("small_summary.json").exists());
    assert!(stdout(&o).starts_with("check,mode,observed,bound"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, CONFIG.replace("\"seed\": 4", "\"seed\": 4, \"sed\": 5")).unwrap();
    let o = calibeat(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));
}

#[test]
fn score_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("f.csv");
    // rain on odd days, constant 0.5 forecast; side forecast is day parity
    let mut text = String::from("t,a_1,c_1,b_1\n");
    for t in 1..=10 {
        text.push_str(&format!("{t},{},0.5,{}\n", t % 2, t % 2));
    }
    fs::write(&input, text).unwrap();
    let o = calibeat(&["score", input.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let num = |k: &str| v[k].as_f64().unwrap();
    assert_eq!(v["t"], 10);
    assert!((num("B") - 0.25).abs() < 1e-15);
    assert!(num("K_l2").abs() < 1e-15);
    assert!((num("R") - 0.25).abs() < 1e-15);
    // parity sorts the outcomes perfectly
    assert!(v["side"][0]["R_b"].as_f64().unwrap().abs() < 1e-15);
}

#[test]
fn score_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    fs::write(&input, "t,a_1,c_1\n1,1,0.5\n2,x,0.5\n").unwrap();
    let o = calibeat(&["score", input.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn figure1_csv() {
    let o = calibeat(&["figure1", "--t", "3", "--format", "csv"], &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[6].starts_with("F2,3,"));
}

#[test]
fn compare_ranks_procedures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    let text = CONFIG.replace(
        r#""procedure": {"name": "simple_calibeat"},"#,
        r#""compare": [{"name": "simple_calibeat"}, {"name": "pattern", "forecasts": [[0.5]]}],"#,
    );
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = calibeat(&["compare", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ranking = fs::read_to_string(out.join("small_ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 3);
    assert!(ranking.lines().nth(1).unwrap().contains("simple_calibeat"));
}

#[test]
fn lowerbound_small() {
    let o = calibeat(&["lowerbound", "--t", "200", "--reps", "200", "--format", "csv"], &[]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
    assert!(stdout(&o).starts_with("alpha,t,reps,lambda"));
}

#[test]
fn presets_listed() {
    let o = calibeat(&["presets"], &[]);
    assert!(stdout(&o).lines().any(|l| l == "simple-bound"));
}
