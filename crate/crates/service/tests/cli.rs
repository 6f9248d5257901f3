use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output};
use std::time::{Duration, Instant};

use dym_core::selective::read_records;

const BIN: &str = env!("CARGO_BIN_EXE_dym");

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.json");
    let body = r#"{
        "corpus": {"sizes": {"train": 300, "validation": 60, "test": 60}},
        "selective": {"threshold": 0.5}
    }"#;
    std::fs::write(&path, body).unwrap();
    path
}

fn dym(config: &Path, args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "dym {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn corpus_generation_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = stdout(&dym(&cfg, &["--seed", "3", "gen-corpus"]));
    let b = stdout(&dym(&cfg, &["gen-corpus", "--seed", "3"]));
    let c = stdout(&dym(&cfg, &["--seed", "4", "gen-corpus"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 420);
    let file = dir.path().join("out/corpus.jsonl");
    dym(&cfg, &["--seed", "3", "gen-corpus", "--out", file.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(file).unwrap(), a);
}

#[test]
fn trained_models_reload_with_identical_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let trained = stdout(&dym(&cfg, &["train", "--out-dir", dir.path().join("models").to_str().unwrap()]));
    assert!(trained.contains("test exact match"));
    let fresh = stdout(&dym(&cfg, &["run-policy", "--policy", "all"]));

    let loaded = dir.path().join("loaded.toml");
    std::fs::write(
        &loaded,
        "[corpus.sizes]\ntrain = 300\nvalidation = 60\ntest = 60\n[selective]\nthreshold = 0.5\n\
         [models]\nparse = \"models/parse.json\"\ngloss = \"models/gloss.json\"\n",
    )
    .unwrap();
    let records = dir.path().join("records");
    let reloaded = stdout(&dym(
        &loaded,
        &["run-policy", "--policy", "all", "--out-dir", records.to_str().unwrap()],
    ));
    assert_eq!(fresh, reloaded);
    for name in ["accept_all", "threshold", "didyoumean_chosen", "didyoumean_reparsed"] {
        let text = std::fs::read_to_string(records.join(format!("{name}.jsonl"))).unwrap();
        let recs = read_records(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 60);
        assert!(recs.iter().all(|r| r.policy == name));
    }
}

#[test]
fn analysis_commands_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let sweep = dir.path().join("sweep.jsonl");
    dym(&cfg, &["hitl-sweep", "--out", sweep.to_str().unwrap()]);
    assert_eq!(std::fs::read_to_string(sweep).unwrap().lines().count(), 12);
    let tuned = stdout(&dym(&cfg, &["tune-threshold"]));
    assert!(tuned.starts_with("threshold "));
    let audit = dir.path().join("audit.jsonl");
    let gloss = stdout(&dym(&cfg, &["gloss-eval", "--audit", audit.to_str().unwrap()]));
    assert!(!gloss.is_empty());
    // examples whose beam holds no finished gloss are left out
    let audited = std::fs::read_to_string(audit).unwrap().lines().count();
    assert!(audited > 40 && audited <= 60, "{audited}");
    assert!(stdout(&dym(&cfg, &["calibration"])).to_lowercase().contains("ece"));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_and_simulate_users_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let _server = Server(
        Command::new(BIN)
            .arg("--config")
            .arg(&cfg)
            .args(["serve", "--addr", &addr])
            .env("RUST_LOG", "warn")
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    while std::net::TcpStream::connect(&addr).is_err() {
        assert!(start.elapsed() < Duration::from_secs(120), "server never came up");
        std::thread::sleep(Duration::from_millis(100));
    }
    let out = dir.path().join("export.jsonl");
    let url = format!("http://{addr}");
    let printed = stdout(&dym(
        &cfg,
        &["simulate-users", "--url", &url, "--threshold", "0.7", "--out", out.to_str().unwrap()],
    ));
    assert!(!printed.is_empty());
    let recs = read_records(std::fs::read_to_string(&out).unwrap().as_bytes()).unwrap();
    assert_eq!(recs.len(), 60);
    assert!(recs.iter().all(|r| r.policy == "didyoumean_chosen"));

    // the offline policy over the same models gives the same records
    let offline_dir = dir.path().join("offline");
    let cfg2 = dir.path().join("t07.json");
    std::fs::write(
        &cfg2,
        r#"{"corpus": {"sizes": {"train": 300, "validation": 60, "test": 60}}, "selective": {"threshold": 0.7}}"#,
    )
    .unwrap();
    dym(
        &cfg2,
        &["run-policy", "--policy", "didyoumean-chosen", "--out-dir", offline_dir.to_str().unwrap()],
    );
    let offline = std::fs::read_to_string(offline_dir.join("didyoumean_chosen.jsonl")).unwrap();
    assert_eq!(read_records(offline.as_bytes()).unwrap(), recs);
}
