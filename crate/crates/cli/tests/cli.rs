use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_formatprobe");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn synth(dir: &Path) -> PathBuf {
    let out = run(&["synth", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("config.json")
}

/// Small resample counts keep the bundle fast; the numbers are still fixed by the seeds.
fn bundle(config: &Path, out: &Path, workers: &str) -> Output {
    run(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--workers",
        workers,
        "--bootstrap",
        "300",
        "--permutations",
        "50",
        "report-bundle",
    ])
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stderr_record(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

#[test]
fn bundle_is_byte_identical_across_runs_and_worker_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = synth(&tmp.path().join("corpus"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, workers) in [(&a, "1"), (&b, "8")] {
        let out = bundle(&cfg, dir, workers);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (ta, tb) = (read_tree(&a), read_tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(v == &tb[k], "{} differs between worker counts", k.display());
    }
    for name in ["bundle.json", "bundle.txt", "behavior.json", "probe.txt", "invariance_L6.json", "vectors/L6/steering.json"] {
        assert!(ta.contains_key(Path::new(name)), "missing {name}");
    }
}

#[test]
fn bundle_text_matches_golden() {
    let tmp = TempDir::new().unwrap();
    let cfg = synth(&tmp.path().join("corpus"));
    let out_dir = tmp.path().join("out");
    let out = bundle(&cfg, &out_dir, "2");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = fs::read_to_string(out_dir.join("bundle.txt")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/bundle.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::create_dir_all(golden.parent().unwrap()).unwrap();
        fs::write(&golden, &got).unwrap();
    }
    let want = fs::read_to_string(&golden).expect("golden file (regenerate with UPDATE_GOLDEN=1)");
    assert!(got == want, "bundle.txt drifted from tests/golden/bundle.txt");
}

#[test]
fn every_report_carries_provenance() {
    let tmp = TempDir::new().unwrap();
    let cfg = synth(&tmp.path().join("corpus"));
    let out_dir = tmp.path().join("out");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "11",
        "--bootstrap",
        "200",
        "behavior",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("behavior.json")).unwrap()).unwrap();
    let p = &v["provenance"];
    assert_eq!(p["engine"], "formatprobe");
    assert_eq!(p["stage"], "behavior");
    assert_eq!(p["letter_rule"], "first-standalone-letter/1");
    assert_eq!(p["seeds"]["bootstrap"], 11);
    assert_eq!(p["bootstrap"], 200);
    assert_eq!(p["config_hash"].as_str().unwrap().len(), 64);
    assert!(out_dir.join("behavior.txt").exists());
}

#[test]
fn missing_judge_label_exits_2_naming_the_case() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    let cfg = synth(&dir);
    let labels = dir.join("judge_labels.jsonl");
    let text = fs::read_to_string(&labels).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let dropped = lines.remove(0);
    let case: serde_json::Value = serde_json::from_str(dropped).unwrap();
    fs::write(&labels, lines.join("\n") + "\n").unwrap();

    let out = run(&["--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(), "behavior"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = stderr_record(&out);
    assert_eq!(rec["kind"], "missing");
    assert_eq!(rec["case_id"], case["case_id"]);
    assert!(rec["message"].as_str().unwrap().contains(case["case_id"].as_str().unwrap()));
}

#[test]
fn bad_config_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"bootstrp": 10}"#).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "behavior"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_record(&out)["case_id"], serde_json::Value::Null);

    fs::write(&cfg, r#"{"manifest": "nowhere/manifest.json"}"#).unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "invariance"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_record(&out)["message"].as_str().unwrap().contains("does not exist"));

    let out = run(&["--workers", "0", "behavior"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bundle_skips_stages_without_inputs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    synth(&dir);
    let cfg = dir.join("behavior_only.json");
    fs::write(
        &cfg,
        r#"{"cases": "cases.jsonl", "predictions": "predictions.jsonl", "judge_labels": "judge_labels.jsonl"}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = run(&["--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--bootstrap", "200", "report-bundle"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("bundle.json")).unwrap()).unwrap();
    let stages: Vec<&str> = v["stages"].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(stages, ["behavior", "shuffle"]);
    assert_eq!(v["skipped"].as_array().unwrap().len(), 5);
}

#[test]
fn f32_and_f64_selections_agree() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("corpus");
    let cfg = synth(&dir);
    let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    v["precision"] = "f32".into();
    let cfg32 = dir.join("config32.json");
    fs::write(&cfg32, v.to_string()).unwrap();
    let sel = |c: &Path, o: &str| -> serde_json::Value {
        let out_dir = tmp.path().join(o);
        let out = run(&["--config", c.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "identify-features"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let v: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("selection_L6.json")).unwrap()).unwrap();
        v["selection"].clone()
    };
    let (a, b) = (sel(&cfg, "o64"), sel(&cfg32, "o32"));
    assert_eq!(a["medical"], b["medical"]);
    assert_eq!(a["random_sample"], b["random_sample"]);
}
