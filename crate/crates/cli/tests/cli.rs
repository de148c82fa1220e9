use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn graphhash(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphhash"))
        .args(args)
        .env("GRAPHHASH_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = graphhash(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, epochs: usize) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "# small planted run\n\
         seed = 3\n\
         data.synthetic = planted:2:12:0.6:0.05\n\
         model.d = 32\n\
         train.epochs = {epochs}\n\
         train.batch_size = 64\n\
         eval.topn = 5,10\n\
         output.dir = {}\n",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn train_then_eval_query_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let out = dir.path().join("out");
    let stdout = ok(&["train", "--config", &cfg]);
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(report["recall_at"]["5"].as_f64().is_some());
    for f in ["run.json", "table.ght", "checkpoint.bin", "train_log.jsonl", "train.edges", "test.edges", "eval.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let table = out.join("table.ght").display().to_string();
    let test = out.join("test.edges").display().to_string();
    let exclude = out.join("train.edges").display().to_string();
    let tsv = ok(&["eval", "--index", &table, "--test", &test, "--exclude", &exclude, "--topn", "5", "--format", "tsv"]);
    assert!(tsv.lines().any(|l| l.starts_with("recall\t5\t")), "{tsv}");

    let hits = ok(&["query", "--index", &table, "--node", "0", "--topn", "4"]);
    let rows: Vec<&str> = hits.lines().collect();
    assert_eq!(rows[0], "rank\tnode\tscore");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("1\t"));

    let exported = dir.path().join("again.ght");
    let ckpt = out.join("checkpoint.bin").display().to_string();
    ok(&["export", "--config", &cfg, "--checkpoint", &ckpt, "--out", exported.to_str().unwrap()]);
    assert_eq!(fs::read(&exported).unwrap(), fs::read(out.join("table.ght")).unwrap());
}

#[test]
fn same_config_twice_gives_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let cfg = write_config(d.path(), 2);
        ok(&["train", "--config", &cfg]);
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("out/table.ght")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn resume_writes_a_fresh_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    ok(&["train", "--config", &cfg]);
    let ckpt = dir.path().join("out/checkpoint.bin").display().to_string();
    ok(&["train", "--config", &cfg, "--set", "train.epochs=2", "--resume", &ckpt]);
    assert!(dir.path().join("out/run.resume1.json").exists());
    let again = graphhash(&["train", "--config", &cfg]);
    assert!(!again.status.success(), "run.json must not be overwritten");
}

#[test]
fn bench_reports_speedup() {
    let stdout = ok(&["bench", "--queries", "5", "--candidates", "2000", "--dim", "64", "--layers", "1"]);
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["candidates"], 2000);
    assert_eq!(r["rankings_agree"], true);
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
}

#[test]
fn ablate_prints_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let stdout = ok(&["ablate", "--config", &cfg, "--variant", "no_rescale"]);
    let r: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(r["full"]["variant"], "full");
    assert_eq!(r["variant"]["variant"], "no_rescale");
}

#[test]
fn invalid_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    for args in [
        vec!["train", "--config", cfg.as_str(), "--set", "loss.lambda1=-1"],
        vec!["train", "--config", cfg.as_str(), "--set", "no.such.key=1"],
        vec!["train", "--config", cfg.as_str(), "--set", "train.epochs=lots"],
        vec!["ablate", "--config", cfg.as_str(), "--variant", "bogus"],
        vec!["query", "--index", "/nonexistent/table", "--node", "0"],
    ] {
        let out = graphhash(&args);
        assert!(!out.status.success(), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn divergence_exits_nonzero_and_keeps_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 5);
    let out = graphhash(&["train", "--config", &cfg, "--set", "optim.lr=1e38"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/checkpoint.bin").exists());
}
