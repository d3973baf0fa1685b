use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn baris(args: &[&str]) -> Output {
    baris_env(args, &[])
}

fn baris_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_baris"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `root`, sorted, with its contents.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn dataset(dir: &Path, count: usize) -> PathBuf {
    let data = dir.join("data");
    let o = baris(&["gen-data", "--out", s(&data), "--count", &count.to_string(), "--seed", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

#[test]
fn empty_dataset_still_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 0);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["count"], 0);
    assert_eq!(fs::read_dir(data.join("scenes")).unwrap().count(), 0);
}

#[test]
fn gen_data_is_repeatable_and_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = baris_env(&["gen-data", "--out", s(&out), "--count", "12", "--seed", "40", "--haze", "0.1,0.3"], &[("BARIS_THREADS", threads)]);
        assert!(o.status.success(), "{}", stderr(&o));
        snapshot(&out)
    };
    let one = run("a", "1");
    assert!(one.iter().filter(|(p, _)| p.ends_with("image.ppm")).count() == 12);
    assert_eq!(one, run("b", "3"));
    assert_eq!(one, run("a", "2"));
}

#[test]
fn gen_data_meets_its_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    dataset(dir.path(), 500);
    let secs = t.elapsed().as_secs_f64();
    assert!(secs < 3.0 * 60.0, "500 scenes took {secs:.1}s");
}

#[test]
fn bad_flags_and_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\n\n[train]\nepoch = 3\n").unwrap();
    let o = baris(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));

    let o = baris(&["train", "--freeze", "era", "--out", s(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("adapters"), "{}", stderr(&o));

    assert_eq!(baris(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(baris(&["gen-data", "--out", s(dir.path()), "--haze", "2"]).status.code(), Some(1));
    assert_eq!(baris(&["grad-check", "--module", "nope"]).status.code(), Some(1));
    assert_eq!(baris(&["param-audit", "--backbone", "resnet"]).status.code(), Some(1));
    assert_eq!(baris(&["--help"]).status.code(), Some(0));
}

#[test]
fn training_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 20);
    let train = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = baris(&args);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    };
    let ce = train("ce", &["--epochs", "2", "--max-steps", "3", "--loss", "ce_only"]);
    let zero = train("zero", &["--epochs", "2", "--max-steps", "3", "--loss", "ce_plus_bace", "--bace-lambda", "0"]);
    let metrics = fs::read(ce.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics, fs::read(zero.join("metrics.jsonl")).unwrap());
    let text = String::from_utf8(metrics.clone()).unwrap();
    assert_eq!(text.lines().count(), 2);

    // The resolved config alone reproduces the run.
    let again = dir.path().join("again");
    let o = baris(&["train", "--config", s(&ce.join("resolved.json")), "--out", s(&again)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics, fs::read(again.join("metrics.jsonl")).unwrap());

    let o = baris(&["eval", "--run", s(&ce)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let record: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(report["mask_iou"], record["mask_iou"]);
    assert_eq!(report["scenes"], 4);

    let smoke = train("smoke", &["--epochs", "1", "--lr", "0", "--era", "--freeze", "era"]);
    assert!(smoke.join("checkpoints/epoch_000").is_dir());
}

#[test]
fn divergence_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 8);
    let o = baris(&["train", "--data", s(&data), "--out", s(&dir.path().join("r")), "--lr", "1e30", "--max-steps", "4"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn grad_check_reports_every_check() {
    let o = baris(&["grad-check", "--module", "bace", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().skip(1).filter(|l| l.starts_with("bace/")).all(|l| l.ends_with("ok")));
    assert_eq!(text, stdout(&baris(&["grad-check", "--module", "bace", "--seed", "3"])));
}

#[test]
fn param_audit_tables() {
    let o = baris(&["param-audit", "--backbone", "swin-b-ref", "--scheme", "era"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("\t4.67"), "{}", stdout(&o));

    let fraction = |gamma: &str| {
        let o = baris(&["param-audit", "--scheme", "era", "--gamma", gamma, "--format", "json"]);
        let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        rows[0]["fraction"].as_f64().unwrap()
    };
    assert!(fraction("8") < fraction("2"));
    let o = baris(&["param-audit", "--scheme", "full", "--format", "json"]);
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows[0]["fraction"], 1.0);
}
