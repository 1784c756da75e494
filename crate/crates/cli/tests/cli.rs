use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdclosure::io::read_mdts;
use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mdclosure"));
    c.env_remove("MDCLOSURE_OUT_ROOT").arg("--log").arg("warn");
    c
}

fn small() -> Value {
    json!({
        "name": "small",
        "system": {"id": "langevin", "params": {"gamma": 1.0, "sigma_y": 0.3 * std::f64::consts::SQRT_2, "dt": 0.01}},
        "data": {"n_steps": 1000, "train_steps": 600, "seed": 3, "theta_method": "exact"},
        "closure": {"kind": "rkhs", "m": 0, "rkhs": {"degrees": [6, 6], "extrapolation": "clamp"}},
        "prediction": {"steps": 200, "members": 3, "spacing": 100, "xi": {"kind": "sampled", "seed": 9}},
        "stats": {"acf_max_lag": 50, "reports": ["acf", "pdf"]}
    })
}

fn write_cfg(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, serde_json::to_vec_pretty(v).unwrap()).unwrap();
    p
}

fn run(cfg: &Path, out: &Path, stage: &str) -> Output {
    bin().arg(stage).arg("--config").arg(cfg).arg("--out").arg(out).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn langevin_simulate_writes_the_requested_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let out = dir.path().join("run");
    let o = run(&cfg, &out, "simulate");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ts, side) = read_mdts(&out.join("trajectory.mdts")).unwrap();
    assert_eq!((ts.n_steps(), ts.n_vars()), (1000, 2));
    assert_eq!(ts.dt(), 0.01);
    assert!(side.is_some());
    assert!(out.join("simulate.provenance.json").exists());
}

#[test]
fn rerun_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&cfg, out, "simulate");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let bytes = |d: &Path| std::fs::read(d.join("trajectory.mdts")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn seed_override_changes_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&cfg, &a, "simulate")), 0);
    let o = bin()
        .args(["simulate", "--seed-override", "77", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&b)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bytes = |d: &Path| std::fs::read(d.join("trajectory.mdts")).unwrap();
    assert_ne!(bytes(&a), bytes(&b));
}

#[test]
fn unknown_key_is_a_config_error_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    v["data"]["n_stepz"] = json!(5);
    let cfg = write_cfg(dir.path(), &v);
    let o = run(&cfg, &dir.path().join("run"), "simulate");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/data"), "{}", stderr(&o));
    assert!(stderr(&o).contains("n_stepz"), "{}", stderr(&o));
}

#[test]
fn wrong_type_names_the_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    v["prediction"]["members"] = json!("many");
    let cfg = write_cfg(dir.path(), &v);
    let o = bin().arg("check").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/prediction/members"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_a_config_error() {
    let o = bin().args(["check", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_training_set_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    v["closure"] = json!({"kind": "lstm", "m": 5, "lstm": {"d_hidden": 4, "batch_size": 8, "iterations": 10, "seed": 1}});
    v["data"]["train_steps"] = json!(3);
    let cfg = write_cfg(dir.path(), &v);
    let out = dir.path().join("run");
    for stage in ["simulate", "extract"] {
        assert_eq!(code(&run(&cfg, &out, stage)), 0);
    }
    let o = run(&cfg, &out, "train");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn memory_mismatch_at_predict_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    let cfg = write_cfg(dir.path(), &v);
    let out = dir.path().join("run");
    for stage in ["simulate", "extract", "train"] {
        let o = run(&cfg, &out, stage);
        assert_eq!(code(&o), 0, "{stage}: {}", stderr(&o));
    }
    v["closure"]["m"] = json!(2);
    let cfg = write_cfg(dir.path(), &v);
    let o = run(&cfg, &out, "predict");
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn tampered_input_is_a_provenance_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let out = dir.path().join("run");
    assert_eq!(code(&run(&cfg, &out, "simulate")), 0);
    let path = out.join("trajectory.mdts");
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let o = run(&cfg, &out, "extract");
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn changed_upstream_section_is_a_provenance_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    let cfg = write_cfg(dir.path(), &v);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&cfg, &out, "simulate")), 0);
    v["data"]["seed"] = json!(4);
    let cfg = write_cfg(dir.path(), &v);
    assert_eq!(code(&run(&cfg, &out, "extract")), 4);
}

#[test]
fn stage_without_upstream_is_a_provenance_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    assert_eq!(code(&run(&cfg, &dir.path().join("run"), "train")), 4);
}

#[test]
fn verify_without_checks_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let out = dir.path().join("run");
    for stage in ["simulate", "extract", "train"] {
        assert_eq!(code(&run(&cfg, &out, stage)), 0);
    }
    assert_eq!(code(&run(&cfg, &out, "verify")), 2);
}

#[test]
fn pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let out = dir.path().join("run");
    let o = run(&cfg, &out, "pipeline");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snapshot = |d: &Path| -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        let mut stack = vec![d.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap() {
                let e = e.unwrap().path();
                if e.is_dir() {
                    stack.push(e);
                } else {
                    files.push((e.strip_prefix(d).unwrap().display().to_string(), std::fs::read(&e).unwrap()));
                }
            }
        }
        files.sort();
        files
    };
    let first = snapshot(&out);
    assert!(first.iter().any(|(p, _)| p == "stats/summary.json"));
    let o = run(&cfg, &out, "pipeline");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(first, snapshot(&out));
}

#[test]
fn out_root_env_sets_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &small());
    let root = dir.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_mdclosure"))
        .env("MDCLOSURE_OUT_ROOT", &root)
        .args(["--log", "warn", "simulate", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("small").join("trajectory.mdts").exists());
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn canned_configs_pass_check() {
    let mut n = 0;
    for e in std::fs::read_dir(configs_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "json") {
            let o = bin().arg("check").arg("--config").arg(&p).output().unwrap();
            assert_eq!(code(&o), 0, "{}: {}", p.display(), stderr(&o));
            n += 1;
        }
    }
    assert!(n >= 12);
}

fn schema() -> Value {
    let o = bin().arg("schema").output().unwrap();
    assert_eq!(code(&o), 0);
    serde_json::from_slice(&o.stdout).unwrap()
}

// every key the effective config carries must be declared in the schema
fn declared(schema: &Value, root: &Value, node: &Value, at: &str) {
    let resolve = |s: &Value| -> Value {
        match s.get("$ref").and_then(Value::as_str) {
            Some(r) => root.pointer(r.trim_start_matches('#')).cloned().unwrap(),
            None => s.clone(),
        }
    };
    let schema = resolve(schema);
    if let Some(alts) = schema.get("oneOf").and_then(Value::as_array) {
        let hit = alts.iter().map(&resolve).find(|a| match (a.get("type"), node) {
            (Some(t), Value::Null) => t == "null",
            (Some(t), Value::Object(m)) if t == "object" => {
                // discriminate on const-valued properties
                a["properties"].as_object().unwrap().iter().all(|(k, s)| match s.get("const") {
                    Some(c) => m.get(k) == Some(c),
                    None => true,
                })
            }
            _ => false,
        });
        let hit = hit.unwrap_or_else(|| panic!("{at}: no schema alternative matches {node}"));
        return declared(&hit, root, node, at);
    }
    if let Value::Object(m) = node {
        let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{at}: schema has no properties"));
        for (k, v) in m {
            let sub = props.get(k).unwrap_or_else(|| panic!("{at}/{k} is not in the schema"));
            declared(sub, root, v, &format!("{at}/{k}"));
        }
    }
}

#[test]
fn schema_covers_every_effective_config() {
    let schema = schema();
    assert_eq!(schema["additionalProperties"], json!(false));
    for e in std::fs::read_dir(configs_dir()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_none_or(|x| x != "json") {
            continue;
        }
        let o = bin().arg("check").arg("--config").arg(&p).output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let eff: Value = serde_json::from_slice(&o.stdout).unwrap();
        declared(&schema, &schema, &eff, "");
    }
}

#[test]
fn closed_loop_blowup_is_a_numerical_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = small();
    v["prediction"]["blowup_bound"] = json!(1e-3);
    let cfg = write_cfg(dir.path(), &v);
    let out = dir.path().join("run");
    for stage in ["simulate", "extract", "train"] {
        assert_eq!(code(&run(&cfg, &out, stage)), 0);
    }
    let o = run(&cfg, &out, "predict");
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // members are still written for inspection
    assert!(out.join("prediction/run_record.json").exists());
}
