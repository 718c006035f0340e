use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dorasim"));
    c.env_remove("DORASIM_OUT");
    c
}

fn small_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden/config.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn cfg() -> String {
    small_config().display().to_string()
}

#[test]
fn run_writes_a_complete_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(&["run", "--config", &cfg(), "--paradigms", "dora", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["trace.jsonl", "report.json", "steps.csv", "bubbles.csv", "plot_step_time.csv", "plot_bubbles.csv"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report = json(&out.join("report.json"));
    let bytes = std::fs::read(out.join("trace.jsonl")).unwrap();
    assert_eq!(report["trace_hash"], hex::encode(Sha256::digest(&bytes)));
    assert_eq!(report["paradigm"], "dora");
    assert_eq!(report["config"]["resolved"]["paradigms"][0], "dora");
    assert!(report["config"]["source"].is_object());
    let steps = std::fs::read_to_string(out.join("steps.csv")).unwrap();
    assert!(steps.starts_with("step,t_prefill,t_decode,t_train,t_rollout_only,t_total"));
    assert_eq!(steps.lines().count() as u64, 1 + report["config"]["resolved"]["stop"]["n_steps"].as_u64().unwrap());
}

#[test]
fn several_paradigms_get_their_own_directories() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--config", &cfg(), "--paradigms", "synchronous,dora", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for p in ["synchronous", "dora"] {
        assert!(dir.path().join(p).join("report.json").is_file());
    }
}

#[test]
fn malformed_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json(&small_config());
    v["workload"]["group_size"] = Value::String("four".into());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = run(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("workload.group_size"), "{}", stderr(&o));

    let mut v = json(&small_config());
    v["cluster"]["n_devicez"] = Value::from(4);
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = run(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n_devicez"), "{}", stderr(&o));

    let o = run(&["run", "--config", &cfg(), "--param", "workload.tbs_prompts=0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("workload.tbs_prompts"), "{}", stderr(&o));

    let o = run(&["run", "--config", "paper32"]);
    assert_eq!(code(&o), 2);
    let o = run(&["run", "--config", &cfg(), "--paradigms", "async"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn seed_changes_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let hash = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = run(&["run", "--config", &cfg(), "--paradigms", "synchronous", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        json(&out.join("report.json"))["trace_hash"].as_str().unwrap().to_string()
    };
    let a = hash("1", "a");
    assert_eq!(a, hash("1", "b"));
    assert_ne!(a, hash("2", "c"));
}

#[test]
fn compare_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "compare", "--config", &cfg(), "--paradigms",
        "synchronous,one_step_off_policy,partial_rollout,dora", "--jobs", "4",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cmp = json(&dir.path().join("comparison.json"));
    let rows = cmp["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let file = dir.path().join(r["trace_file"].as_str().unwrap());
        let bytes = std::fs::read(&file).unwrap();
        assert_eq!(r["trace_hash"], hex::encode(Sha256::digest(&bytes)));
    }
    assert_eq!(cmp["workload_fingerprint"].as_str().unwrap().len(), 64);
    for f in ["plot_step_time.csv", "plot_throughput.csv", "plot_bubbles.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn sweep_rejects_an_empty_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(code(&run(&["sweep", "--config", &cfg(), "--out", d])), 2);
    assert_eq!(code(&run(&["sweep", "--config", &cfg(), "--param", "K=3..1", "--out", d])), 2);
    assert_eq!(code(&run(&["sweep", "--config", &cfg(), "--param", "K=", "--out", d])), 2);
}

#[test]
fn staleness_sweep_respects_each_bound() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep", "--config", &cfg(), "--paradigms", "dora", "--param", "K=1..2",
        "--param", "seed=1,2", "--jobs", "4", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = json(&dir.path().join("sweep.json"))["rows"].as_array().unwrap().clone();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let point = r["point"].as_str().unwrap();
        let k: u64 = point
            .split(|c: char| c == ',' || c == ' ' || c == ';')
            .find_map(|kv| kv.strip_prefix("orchestrator.staleness_k="))
            .unwrap_or_else(|| panic!("{point}"))
            .parse()
            .unwrap();
        assert!(r["max_staleness"].as_u64().unwrap() <= k, "{r}");
        assert_eq!(r["c2_dropped"], 0);
    }
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn audit_exit_codes() {
    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden");
    let dora = golden.join("dora.jsonl");
    let o = run(&["audit", dora.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["paradigm"], "dora");
    assert!(v["audit"]["max_staleness"].as_u64().unwrap() >= 1);

    let o = run(&["audit", dora.to_str().unwrap(), "--staleness-k", "0"]);
    assert_eq!(code(&o), 1);

    let o = run(&["audit", golden.join("missing.jsonl").to_str().unwrap()]);
    assert_eq!(code(&o), 1);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "{\"t\":0.0,\"kind\":\"nope\"}\n").unwrap();
    assert_ne!(code(&run(&["audit", junk.to_str().unwrap()])), 0);
}

#[test]
fn out_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let o = bin()
        .args(["run", "--config", &cfg(), "--paradigms", "synchronous"])
        .env("DORASIM_OUT", &target)
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(target.join("report.json").is_file());
}

#[test]
fn preset_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["preset", "paper64"]);
    assert_eq!(code(&o), 0);
    let p = dir.path().join("p.json");
    std::fs::write(&p, &o.stdout).unwrap();
    let o = run(&[
        "run", "--config", p.to_str().unwrap(), "--paradigms", "dora",
        "--param", "stop.n_steps=2", "--param", "stop.warmup_steps=0",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn shipped_schema_is_current() {
    let shipped = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../schema/run_config.schema.json");
    let o = run(&["schema"]);
    assert_eq!(code(&o), 0);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed, json(&shipped), "regenerate with `dorasim schema`");
}
