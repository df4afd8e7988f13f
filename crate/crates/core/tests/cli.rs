use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"train": {"window": 16, "max_epochs": 2, "patience": 2, "embed_dim": 8,
  "graph_dim": 8, "temporal_dim": 4, "mlp_hidden": 8, "conv_channels": 2, "k": 3}}"#;

fn pgma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgma")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pgma(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    pgma(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic pair, config file and trained checkpoint.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("small.json"), SMALL).unwrap();
        ok(&["synth", "--out-dir", p(d), "--sensors", "4", "--length", "600", "--synth-seed", "3"]);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> String {
        p(&self.dir.path().join(name)).to_string()
    }

    fn train(&self, extra: &[&str]) -> String {
        let ckpt = self.path("ckpt.json");
        let (cfg, train, out) = (self.path("small.json"), self.path("train.csv"), self.path("out"));
        let mut args = vec!["--config", &cfg, "train", "--train", &train, "--checkpoint", &ckpt, "--out-dir", &out];
        args.extend_from_slice(extra);
        ok(&args);
        ckpt
    }
}

#[test]
fn synth_then_period_report() {
    let f = Fixture::new();
    let train = f.path("train.csv");
    let header = fs::read_to_string(&train).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "sensor_0,sensor_1,sensor_2,sensor_3");
    let test_header = fs::read_to_string(f.path("test.csv")).unwrap().lines().next().unwrap().to_string();
    assert_eq!(test_header, "sensor_0,sensor_1,sensor_2,sensor_3,label");
    let spec = f.path("spectrum.csv");
    let out = ok(&["period", "report", "--input", &train, "--spectrum-csv", &spec]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["period"], 24);
    assert_eq!(v["top_bins"].as_array().unwrap().len(), 5);
    assert_eq!(fs::read_to_string(&spec).unwrap().lines().count(), 1 + 150);
}

#[test]
fn train_score_graph_round_trip() {
    let f = Fixture::new();
    let ckpt = f.train(&[]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("out/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(f.path("out/loss_curve.csv")).unwrap().starts_with("epoch,train_loss,val_loss"));

    let scores = f.path("scores");
    let test = f.path("test.csv");
    ok(&["score", "--checkpoint", &ckpt, "--test", &test, "--out-dir", &scores, "--plot"]);
    let csv = fs::read_to_string(f.path("scores/scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,ano,smoothed,label_pred,label_true,top_sensor");
    assert_eq!(lines.count(), 300 - 16);
    assert!(fs::read_to_string(f.path("scores/scores.dat")).unwrap().starts_with("# t "));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("scores/metrics.json")).unwrap()).unwrap();
    assert_eq!(m["threshold_mode"], "max-validation");
    assert!(m["point_wise"]["f1"].is_number());

    let edges = ok(&["graph", "dump", "--checkpoint", &ckpt]);
    let mut rows = edges.lines();
    assert_eq!(rows.next().unwrap(), "slot,source,target,similarity");
    assert_eq!(rows.count(), 4 * 4 * 3);

    // fixed:0 labels exactly the positive smoothed scores
    ok(&["score", "--checkpoint", &ckpt, "--test", &test, "--out-dir", &scores, "--threshold", "fixed:0"]);
    let csv = fs::read_to_string(f.path("scores/scores.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let smoothed: f64 = cols[2].parse().unwrap();
        assert_eq!(cols[3], if smoothed > 0.0 { "1" } else { "0" });
    }
}

#[test]
fn config_precedence_flag_over_file_over_default() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"train": {"k": 5, "window": 32}, "score": {"ma_window": 4}}"#).unwrap();
    let out = ok(&["--config", p(&cfg), "config", "show", "--k", "3"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["train"]["k"], 3);
    assert_eq!(v["train"]["window"], 32);
    assert_eq!(v["train"]["batch_size"], 32);
    assert_eq!(v["score"]["ma_window"], 4);
    assert_eq!(v["score"]["threshold"], "max-validation");

    fs::write(&cfg, r#"{"train": {"bogus": 1}}"#).unwrap();
    assert_eq!(code(&["--config", p(&cfg), "config", "show"]), 1);
}

#[test]
fn exit_codes() {
    let f = Fixture::new();
    let ckpt = f.train(&[]);
    let test = f.path("test.csv");
    let out = f.path("o");

    // unlabeled test data cannot use the oracle threshold
    let unlabeled = f.path("unlabeled.csv");
    let text: String = fs::read_to_string(&test)
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
        .collect();
    fs::write(&unlabeled, text).unwrap();
    assert_eq!(
        code(&["score", "--checkpoint", &ckpt, "--test", &unlabeled, "--out-dir", &out, "--threshold", "best-f1"]),
        1
    );
    ok(&["score", "--checkpoint", &ckpt, "--test", &unlabeled, "--out-dir", &out]);

    assert_eq!(code(&["train", "--train", "/no/such.csv", "--checkpoint", &f.path("x.json")]), 2);
    assert_eq!(code(&["train", "--train", &test, "--checkpoint", &f.path("x.json"), "--window", "0"]), 1);
    assert_eq!(code(&["score", "--bogus-flag"]), 1);
    assert_eq!(code(&["sweep", "--out-dir", &out, "--k-sweep", "--filter-sweep"]), 1);
    assert_eq!(code(&["sweep", "--out-dir", &out]), 1);
    assert_eq!(code(&["score", "--checkpoint", &f.path("test.csv"), "--test", &test, "--out-dir", &out]), 1);

    let bad = f.path("bad.csv");
    fs::write(&bad, "a,b\n1,2\n3,4\n5,6\n7,8\nabc,1\n").unwrap();
    let o = pgma(&["period", "report", "--input", &bad]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("row 5") && err.contains("column 1"), "{err}");
}

#[test]
fn train_variants_and_grid() {
    let f = Fixture::new();
    let ckpt = f.train(&["--ablate", "static-graph"]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(v["model"]["config"]["n_slots"], 1);
    assert_eq!(v["train_config"]["static_graph"], true);

    f.train(&["--grid=0.01,0.005"]);
    let cells: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("out/grid_report.json")).unwrap()).unwrap();
    assert_eq!(cells.as_array().unwrap().len(), 2);
}

#[test]
fn ablate_and_sweep_write_tables() {
    let f = Fixture::new();
    let (cfg, train, test, out) = (f.path("small.json"), f.path("train.csv"), f.path("test.csv"), f.path("exp"));
    let common = ["--config", cfg.as_str()];
    let mut args: Vec<&str> = common.to_vec();
    args.extend(["ablate", "--train", &train, "--test", &test, "--out-dir", &out, "--seeds", "0", "--skip", "w/o-STIA", "--threshold", "best-f1"]);
    ok(&args);
    let table = fs::read_to_string(f.path("exp/ablation.csv")).unwrap();
    assert!(table.contains("full,0,") && table.contains("w/o PGSL,0,"));
    assert!(!table.contains("w/o STIA"));

    let mut args: Vec<&str> = common.to_vec();
    args.extend(["sweep", "--train", &train, "--test", &test, "--out-dir", &out, "--k-sweep", "--values", "1,3", "--seeds", "0", "--threshold", "best-f1"]);
    let printed = ok(&args);
    assert!(printed.starts_with("k,effective,mean_f1"));
    assert_eq!(fs::read_to_string(f.path("exp/sweep_k.csv")).unwrap().lines().count(), 3);
}
