use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn attrinet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrinet"))
        .args(args)
        .env("ATTRINET_THREADS", "0")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn attrinet")
}

fn ok(args: &[&str]) {
    let out = attrinet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    attrinet(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> contents for every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synthetic(dir: &Path, n: usize) {
    ok(&["make-synthetic", "--n", &n.to_string(), "--classes", "3", "--size", "64", "--seed", "1", "--out", s(dir)]);
}

#[test]
fn make_synthetic_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synthetic(&a, 12);
    synthetic(&b, 12);
    assert!(a.join("manifest.csv").exists());
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 12);
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&["make-synthetic", "--n", "4"]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"generator_stpes": 3}}"#).unwrap();
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    assert_eq!(code(&["train", "--dataset", s(&missing), "--out", s(&tmp.path().join("o")), "--steps", "1"]), 3);
}

#[test]
fn contaminate_tags_half_of_the_positives() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, dst) = (tmp.path().join("src"), tmp.path().join("dst"));
    synthetic(&src, 30);
    let before = snapshot(&src);

    assert_ne!(code(&["contaminate", "--dataset", s(&src), "--out", s(&dst), "--class", "0", "--fraction", "1.5"]), 0);
    assert_ne!(code(&["contaminate", "--dataset", s(&src), "--out", s(&src), "--class", "0", "--fraction", "0.5"]), 0);
    ok(&["contaminate", "--dataset", s(&src), "--out", s(&dst), "--class", "0", "--fraction", "0.5", "--text", "CXR-ROOM1"]);
    assert_eq!(snapshot(&src), before, "source dataset was modified");

    let manifest = fs::read_to_string(dst.join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "enlarged_heart").expect("class column");
    let positives = lines.filter(|l| l.split(',').nth(col) == Some("1")).count();

    let log = fs::read_to_string(dst.join("injection_log.jsonl")).unwrap();
    let entries: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).expect("one JSON object per line")).collect();
    assert_eq!(entries.len(), (positives as f64 * 0.5).round() as usize);
    assert!(entries.iter().all(|e| e["class"] == 0 && e["box"].as_array().map(Vec::len) == Some(4)));
}

#[test]
fn train_eval_explain_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let (plain, data, run) = (t.join("plain"), t.join("data"), t.join("run"));
    synthetic(&plain, 40);
    ok(&["contaminate", "--dataset", s(&plain), "--out", s(&data), "--class", "enlarged_heart", "--fraction", "0.5"]);
    let cfg = t.join("cfg.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"dataset": "{}", "validation": "{}",
                "train": {{"generator_steps": 2, "checkpoint_every": 2, "batch_size": 2,
                          "critic_boost_initial": 1, "critic_boost_steps": 2}}}}"#,
            s(&data),
            s(&plain)
        ),
    )
    .unwrap();

    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--guidance", "mixed", "--ablation", "ctr", "--seed", "3"]);
    let ckpt = run.join("checkpoints/step_000002.safetensors");
    assert!(ckpt.exists());
    let effective: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(effective["train"]["guidance"]["mode"], "mixed");
    assert_eq!(effective["train"]["loss_weights"]["center"], 0.0);
    assert_eq!(effective["train"]["seed"], 3);
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,class,term,value\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 8);
    assert!(run.join("thresholds.json").exists());

    let eval = t.join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--metrics", "all", "--out", s(&eval)]);
    for f in ["auc.csv", "class_sensitivity.csv", "disease_sensitivity.csv", "confounder_sensitivity.csv"] {
        assert!(eval.join(f).exists(), "missing {f}");
    }
    assert!(eval.join("effective_config.json").exists());

    let explain = t.join("explain");
    ok(&["explain", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--image", "syn00000", "--global", "--out", s(&explain)]);
    let pngs = snapshot(&explain).keys().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    assert!(pngs >= 3 + 3, "expected local and global panels, found {pngs}");
    assert_ne!(code(&["explain", "--checkpoint", s(&ckpt), "--out", s(&explain)]), 0);
}
