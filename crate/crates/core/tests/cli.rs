mod common;

use std::process::Command;

use common::*;

fn probe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_probe"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn full_run_over_http_stubs() {
    let tmp = tempfile::tempdir().unwrap();
    let chat = chat_server();
    let scorer = scorer_server();
    let corpus = write_corpus(tmp.path(), 8);
    let config = write_config(tmp.path(), &corpus, &["m1", "m2"], "");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("http://127.0.0.1:9/api/chat", &format!("{}/api/chat", chat.url));
    std::fs::write(&config, text).unwrap();

    for cmd in ["rewrite", "score", "stats", "report"] {
        let out = probe()
            .args([cmd, "--config", config.to_str().unwrap(), "--seed", "11"])
            .env("PROBE_SCORER_URL", &scorer.url)
            .env("PROBE_CACHE_DIR", tmp.path().join("shared-cache"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.starts_with("run "), "{stdout}");
    }
    assert!(tmp.path().join("shared-cache/m1.jsonl").exists());
    let runs: Vec<_> = std::fs::read_dir(tmp.path().join("out/runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    assert!(run.join("table1.md").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);

    let only_m1 = probe()
        .args(["rewrite", "--config", config.to_str().unwrap(), "--model", "m1", "--out"])
        .arg(tmp.path().join("other"))
        .env("PROBE_CACHE_DIR", tmp.path().join("shared-cache"))
        .output()
        .unwrap();
    assert!(only_m1.status.success());
    assert_eq!(chat.hits.load(std::sync::atomic::Ordering::SeqCst), 32);
}

#[test]
fn exit_status_reflects_record_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 2);
    let config = write_config(tmp.path(), &corpus, &["offline"], "");
    let out = probe()
        .args(["rewrite", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("4 record-level errors"), "{stderr}");
    assert!(stderr.contains("offline"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = write_corpus(tmp.path(), 2);
    let config = write_config(tmp.path(), &corpus, &["m1"], "");
    let out = probe().args(["score", "--config", config.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("probe rewrite"));
    let out = probe()
        .args(["rewrite", "--config", config.to_str().unwrap(), "--model", "nope"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = probe().args(["rewrite"]).output().unwrap();
    assert!(!out.status.success());
}
