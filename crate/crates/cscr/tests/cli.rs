use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &str = "[synth]\nn_train = 600\nn_test = 200\n\n[train]\nepochs = 5\nbatch_size = 64\nlearning_rate = 0.005\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
    synth: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("fast.toml");
        std::fs::write(&config, FAST).unwrap();
        let mut f = Fixture { _dir: dir, root, config: config.to_string_lossy().into_owned(), synth: PathBuf::new() };
        f.synth = f.ok(&["synth", "--config", &f.config.clone()]);
        f
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_cscr"))
            .args(args)
            .env("CSCR_RUN_DIR", self.root.join("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
    }

    fn file(&self, name: &str) -> String {
        self.synth.join(name).to_string_lossy().into_owned()
    }

    fn data_args(&self) -> Vec<String> {
        ["--config", &self.config, "--pool", &self.file("pool.jsonl"), "--queries", &self.file("queries.jsonl")]
            .map(String::from)
            .to_vec()
    }

    fn with(&self, cmd: &str, extra: &[&str]) -> PathBuf {
        let data = self.data_args();
        let mut args = vec![cmd];
        args.extend(data.iter().map(String::as_str));
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let at = lines.next().unwrap().split(',').position(|h| h == column).unwrap();
    lines.map(|l| l.split(',').nth(at).unwrap().to_string()).collect()
}

#[test]
fn usage_errors_exit_2_and_data_errors_exit_1() {
    let f = Fixture::new();
    let out = f.run(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(f.run(&["frobnicate"]).status.code(), Some(2));

    let missing = f.root.join("missing.jsonl").to_string_lossy().into_owned();
    assert_eq!(f.run(&["eval", "--pool", &missing, "--queries", &missing]).status.code(), Some(1));
    // The cscr policy cannot run without a trained head.
    let data = f.data_args();
    let args: Vec<&str> = std::iter::once("eval").chain(data.iter().map(String::as_str)).collect();
    assert_eq!(f.run(&args).status.code(), Some(2));
    // Unknown settings are validation errors.
    assert_eq!(f.run(&["synth", "--set", "synth.no_such_key=1"]).status.code(), Some(1));
}

#[test]
fn oracle_report_matches_planted_accuracy() {
    let f = Fixture::new();
    let dir = f.with("eval", &["--policy", "oracle"]);
    let report = json(&dir.join("report.json"));
    assert!(report.get("qnc_flag").is_none());

    let text = std::fs::read_to_string(f.file("queries.jsonl")).unwrap();
    let (mut solvable, mut total) = (0, 0);
    for line in text.lines() {
        let q: Value = serde_json::from_str(line).unwrap();
        if q["split"] == "test" {
            total += 1;
            solvable += q["quality"].as_object().unwrap().values().any(|v| v.as_f64().unwrap() >= 0.5) as usize;
        }
    }
    assert_eq!(report["peak"].as_f64().unwrap(), solvable as f64 / total as f64);
    assert_eq!(report["n_queries"], total);
    assert_eq!(json(&dir.join("config.json"))["config_hash"], report["config_hash"]);
}

#[test]
fn full_pipeline_artifacts() {
    let f = Fixture::new();
    let descs = f.ok(&["descriptors", "--config", &f.config, "--pool", &f.file("pool.jsonl"), "--probes", &f.file("probes.bin")]);
    assert!(descs.join("basis.json").exists());
    let descs = descs.join("descriptors.jsonl").to_string_lossy().into_owned();
    let index = f.ok(&["index", "--pool", &f.file("pool.jsonl"), "--descriptors", &descs]);
    let sim = json(&index.join("index.json"));
    assert_eq!(sim["ids"].as_array().unwrap().len(), 12);
    assert!((sim["similarity"][3][3].as_f64().unwrap() - 1.0).abs() < 1e-12);

    let head = f.with("train", &["--descriptors", &descs]);
    assert_eq!(csv_column(&head.join("loss.csv"), "epoch").len(), 5);
    assert_eq!(json(&head.join("manifest.json"))["train"]["epochs"], 5);
    let head = head.to_string_lossy().into_owned();
    let router = ["--descriptors", descs.as_str(), "--checkpoint", head.as_str()];

    let route = f.with("route", &[&router[..], &["--lambda", "0.5"]].concat());
    let lambdas = csv_column(&route.join("decisions.csv"), "lambda");
    assert_eq!(lambdas.len(), 200);
    assert!(lambdas.iter().all(|l| l == "0.5"));

    let sweep = f.with("sweep", &router);
    let policies = csv_column(&sweep.join("curves.csv"), "policy");
    assert_eq!(policies.len(), 5 * 50);
    assert_eq!(json(&sweep.join("reports.json")).as_array().unwrap().len(), 5);

    let sig = f.with("significance", &[&router[..], &["--resamples", "200"]].concat());
    let sig = json(&sig.join("significance.json"));
    assert_eq!(sig["policy_a"], "cscr");
    assert_eq!(sig["policy_b"], "random");
    assert!(sig["ci"][0].as_f64().unwrap() <= sig["delta_audc"].as_f64().unwrap());
}

#[test]
fn flags_override_environment_and_file() {
    let f = Fixture::new();
    let out = Command::new(env!("CARGO_BIN_EXE_cscr"))
        .args(["synth", "--config", &f.config, "--seed", "9"])
        .env("CSCR_RUN_DIR", f.root.join("runs"))
        .env("CSCR_SYNTH__SEED", "4")
        .env("CSCR_SYNTH__N_TEST", "50")
        .output()
        .unwrap();
    assert!(out.status.success());
    let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    let cfg = json(&dir.join("config.json"));
    assert_eq!(cfg["config"]["synth"]["seed"], 9);
    assert_eq!(cfg["config"]["synth"]["n_test"], 50);
    assert_eq!(cfg["config"]["synth"]["n_train"], 600);
    assert!(dir.file_name().unwrap().to_string_lossy().starts_with("synth-"));
}

#[test]
fn ablation_cells() {
    let f = Fixture::new();
    let descs = f.file("descriptors.jsonl");

    // A single cell reproduces a plain train + eval.
    let single = f.with("ablate", &["--descriptors", &descs, "--grid", "gamma=0.2"]);
    let head = f.with("train", &["--descriptors", &descs]).to_string_lossy().into_owned();
    let eval = f.with("eval", &["--descriptors", &descs, "--checkpoint", &head]);
    assert_eq!(
        std::fs::read(single.join("cell-000/decisions.csv")).unwrap(),
        std::fs::read(eval.join("decisions.csv")).unwrap()
    );

    let gamma = f.with("ablate", &["--descriptors", &descs, "--grid", "gamma=0,0.5"]);
    assert_ne!(
        std::fs::read(gamma.join("cell-000/decisions.csv")).unwrap(),
        std::fs::read(gamma.join("cell-001/decisions.csv")).unwrap()
    );

    let k = f.with("ablate", &["--descriptors", &descs, "--grid", "k=1,4"]);
    let audc: Vec<f64> = csv_column(&k.join("ablation.csv"), "audc").iter().map(|v| v.parse().unwrap()).collect();
    assert_eq!(audc.len(), 2);
    assert!(audc[1] >= audc[0] - 0.01, "AUDC k=4 {} vs k=1 {}", audc[1], audc[0]);

    let data = f.data_args();
    let mut args: Vec<&str> = std::iter::once("ablate").chain(data.iter().map(String::as_str)).collect();
    args.extend(["--descriptors", &descs, "--grid", "gamma="]);
    assert_eq!(f.run(&args).status.code(), Some(2));
}
