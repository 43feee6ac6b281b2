use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_cartal");

fn cartal(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn tiny_config(corpus: &Path) -> String {
    format!(
        r#"{{
  "version": 1,
  "corpus": {{"path": "{}"}},
  "split": "corpus",
  "initial": {{"changed": 1, "unchanged": 1}},
  "test": {{"changed": 2, "unchanged": 2}},
  "method": "ensemble",
  "metric": "entropy",
  "members": 2,
  "n_add": 2,
  "iterations": 2,
  "model": {{"widths": [2, 4, 4]}},
  "train": {{"epochs": 1, "min_steps": 0, "batch_size": 4}},
  "seeds": [0]
}}"#,
        corpus.display()
    )
}

fn gen_corpus(dir: &Path) -> std::path::PathBuf {
    let spec = dir.join("spec.json");
    write(&spec, r#"{"changed": 6, "unchanged": 14, "ignored": 1, "seed": 3}"#);
    let corpus = dir.join("corpus");
    let out = cartal(&[
        "gen",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
        "--initial",
        "1,1",
        "--test",
        "2,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    corpus
}

#[test]
fn gen_run_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());
    for sub in ["t0", "t1", "mask"] {
        assert_eq!(std::fs::read_dir(corpus.join(sub)).unwrap().count(), 21);
    }
    let cfg = dir.path().join("exp.json");
    write(&cfg, &tiny_config(&corpus));

    let results = dir.path().join("results");
    let out = cartal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        results.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(results.join("results.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("seed,iteration,labels_used,auc,change_fraction,seconds")
    );
    assert_eq!(lines.count(), 3);
    assert!(results.join("summary.json").exists());

    let sweep = dir.path().join("sweep");
    let out = cartal(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--nadd",
        "2,3",
        "--min-labels",
        "8",
        "--out",
        sweep.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(sweep.join("nadd_2").join("results.csv").exists());
    assert!(sweep.join("nadd_3").join("results.csv").exists());
}

#[test]
fn bad_input_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"members": 1, "seeds": []}"#);
    let out = cartal(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("r").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed") && err.contains("2 members"), "{err}");
    assert!(!cartal(&["gen", "--out", "x", "--initial", "1"]).status.success());
}

#[test]
fn serve_takes_labels_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_corpus(dir.path());
    let cfg = dir.path().join("exp.json");
    write(&cfg, &tiny_config(&corpus));
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let served = dir.path().join("served");
    let mut child = Command::new(BIN)
        .args([
            "serve",
            "--corpus",
            corpus.to_str().unwrap(),
            "--port",
            &port.to_string(),
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            served.to_str().unwrap(),
        ])
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let base = format!("http://127.0.0.1:{port}");
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut submitted = 0;
    while submitted < 4 {
        assert!(Instant::now() < deadline, "timed out waiting for queries");
        let Ok(resp) = ureq::get(&format!("{base}/queue")).call() else {
            std::thread::sleep(Duration::from_millis(20));
            continue;
        };
        let body: serde_json::Value = serde_json::from_str(&resp.into_string().unwrap()).unwrap();
        for id in body["pending"].as_array().unwrap() {
            let mask = std::fs::read(corpus.join("mask").join(format!("{id}.png"))).unwrap();
            let resp = ureq::post(&format!("{base}/label/{id}")).send_bytes(&mask).unwrap();
            assert_eq!(resp.status(), 200);
            submitted += 1;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    let status = child.wait().unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(served.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(
        std::fs::read_dir(served.join("labels").join("seed_0")).unwrap().count(),
        4
    );
}
