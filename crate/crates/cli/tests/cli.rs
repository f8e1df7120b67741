use std::path::Path;
use std::process::{Command, Output};

fn testbed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_testbed"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL_SWEEP: &str = r#"{
  "seed": 3,
  "workers": 2,
  "baseline": "mlp",
  "sweep": {"temperatures": [0.1], "train_sizes": [5, 20], "taus": [1, 10],
            "num_problems": 2, "num_test_samples": 20, "num_models": 20},
  "agents": [
    {"kind": "mlp", "id": "mlp", "hyperparameters": {"hidden": 8, "steps": 50}},
    {"kind": "knn", "id": "knn", "hyperparameters": {"k": [1, 3]}}
  ]
}"#;

#[test]
fn run_writes_records_and_leaderboard() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("sweep.json"), SMALL_SWEEP).unwrap();
    let out = testbed(&["run", "--config", "sweep.json", "--output", "out"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let records = std::fs::read_to_string(dir.path().join("out/records.csv")).unwrap();
    assert!(records.starts_with("# testbed records v1"));
    // 3 agents x 2 taus x (2 sizes + 1 aggregate), plus the header lines
    assert_eq!(records.lines().count(), 2 + 18);
    let board = std::fs::read_to_string(dir.path().join("out/leaderboard.csv")).unwrap();
    assert!(board.contains("knn/k=1") && board.contains("knn/k=3"));
    assert!(dir.path().join("out/leaderboard.json").is_file());

    let again = testbed(&["run", "--config", "sweep.json", "--output", "serial", "--workers", "1"], dir.path());
    assert!(again.status.success());
    assert_eq!(board, std::fs::read_to_string(dir.path().join("serial/leaderboard.csv")).unwrap());

    let report = testbed(&["report", "out/records.csv", "--baseline", "knn/k=3", "--output", "rep"], dir.path());
    assert!(report.status.success(), "{}", stderr(&report));
    assert!(stdout(&report).starts_with("# testbed leaderboard v1"));
    assert!(dir.path().join("rep/leaderboard.json").is_file());
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"sweep": {"num_test_samples": 0}, "agents": [{"kind": "bbb"}]}"#,
    )
    .unwrap();
    let out = testbed(&["run", "--config", "bad.json"], dir.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("sweep.num_test_samples"), "{err}");
    assert!(err.contains("unknown agent kind \"bbb\""), "{err}");
}

#[test]
fn missing_baseline_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let text = "# testbed records v1\nagent,beta,train_size,tau,kl_or_nll,stderr,count,seconds,seed,failed\nmlp,0.1,10,1,0.5,0.01,10,0.1,0,\n";
    std::fs::write(dir.path().join("r.csv"), text).unwrap();
    let out = testbed(&["report", "r.csv", "--baseline", "ensemble"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ensemble"));
}

#[test]
fn dataset_check_summarises_a_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("a,b,species\n");
    for i in 0..150 {
        csv.push_str(&format!("{},{},{}\n", i % 7, i % 5, ["x", "y", "z"][i % 3]));
    }
    std::fs::write(dir.path().join("iris.csv"), csv).unwrap();
    let out = testbed(&["dataset", "check", "iris.csv", "--label-column", "species"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("rows: 150"));
    assert!(text.contains("classes: 3 (x, y, z)"));
    assert!(text.contains("split: 120 train / 30 test"));

    let out = testbed(&["dataset", "check", "iris.csv", "--label-column", "label"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no column named \"label\""));
}

#[test]
fn correlate_reports_per_family() {
    let dir = tempfile::tempdir().unwrap();
    let header = "# testbed records v1\nagent,beta,train_size,tau,kl_or_nll,stderr,count,seconds,seed,failed\n";
    let mut testbed_csv = String::from(header);
    let mut real_csv = String::from(header);
    for (i, lam) in ["0.1", "1", "10", "100"].iter().enumerate() {
        testbed_csv.push_str(&format!("mlp/lambda={lam},0.1,10,1,{},0.01,10,0,0,\n", i as f64 * 0.1));
        real_csv.push_str(&format!("mlp/lambda={lam},,10,1,{},0.01,10,0,0,\n", 1.0 + i as f64 * 0.3));
    }
    std::fs::write(dir.path().join("t.csv"), testbed_csv).unwrap();
    std::fs::write(dir.path().join("r.csv"), real_csv).unwrap();
    let out = testbed(&["correlate", "t.csv", "r.csv", "--n-bootstrap", "200"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("mlp,Low,1,4,1.0000"), "{}", stdout(&out));

    let out = testbed(&["correlate", "t.csv", "r.csv", "--output", "c.json"], dir.path());
    assert!(out.status.success());
    let json = std::fs::read_to_string(dir.path().join("c.json")).unwrap();
    assert!(json.contains("\"family\": \"mlp\""));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk_sweep.json", "real_data.json"] {
        let text = std::fs::read_to_string(root.join(name)).unwrap();
        let config = testbed_core::cli::parse_config_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(!config.agents.is_empty());
    }
}
