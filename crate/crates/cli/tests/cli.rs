use std::path::Path;
use std::process::{Command, Output};

fn armpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_armpc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config() -> String {
    format!("{}/../../configs/vehicle.json", env!("CARGO_MANIFEST_DIR"))
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn run_ok(args: &[&str]) {
    let o = armpc(args);
    assert_eq!(
        code(&o),
        0,
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Drops the named columns from a CSV so timing noise does not enter comparisons.
fn without_columns(path: &Path, drop: &[&str]) -> Vec<Vec<String>> {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    let keep: Vec<usize> = (0..header.len())
        .filter(|&i| !drop.contains(&header[i].as_str()))
        .collect();
    let mut rows = vec![keep.iter().map(|&i| header[i].clone()).collect::<Vec<_>>()];
    for rec in rd.records() {
        let rec = rec.unwrap();
        rows.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    rows
}

#[test]
fn missing_config_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = armpc(&[
        "bench",
        "--svr-t",
        "t.json",
        "--refs",
        "r.csv",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
    assert!(!out.exists());
}

#[test]
fn unknown_flag_prints_usage_and_exits_1() {
    let o = armpc(&["synthesize", "--config", &config(), "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&armpc(&["--help"])), 0);
}

#[test]
fn bad_config_and_bad_setting_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("broken.json");
    std::fs::write(&cfg, "{\"model\": {\"kind\": \"vehicle\"}}").unwrap();
    let o = armpc(&[
        "synthesize",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);

    let d = dir.path().to_str().unwrap();
    run_ok(&[
        "synthesize",
        "--config",
        &config(),
        "--length",
        "100",
        "--out",
        "r.csv",
        "--out-dir",
        d,
    ]);
    let refs = dir.path().join("r.csv");
    let o = armpc(&[
        "run",
        "--config",
        &config(),
        "--fixed",
        "50,50",
        "--refs",
        refs.to_str().unwrap(),
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn references_for_another_plant_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let robot = format!("{}/../../configs/robot.json", env!("CARGO_MANIFEST_DIR"));
    run_ok(&[
        "synthesize",
        "--config",
        &robot,
        "--length",
        "100",
        "--out",
        "r.csv",
        "--out-dir",
        d,
    ]);
    let refs = dir.path().join("r.csv");
    let o = armpc(&[
        "run",
        "--config",
        &config(),
        "--fixed",
        "5,5",
        "--refs",
        refs.to_str().unwrap(),
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let pipeline = |sub: &str| {
        let d = dir.path().join(sub);
        let ds = d.to_str().unwrap().to_string();
        let p = |f: &str| d.join(f).to_str().unwrap().to_string();
        run_ok(&[
            "synthesize",
            "--config",
            &cfg,
            "--kind",
            "mixed",
            "--length",
            "400",
            "--seed",
            "3",
            "--out",
            "train.csv",
            "--out-dir",
            &ds,
        ]);
        run_ok(&[
            "synthesize",
            "--config",
            &cfg,
            "--kind",
            "rapid",
            "--length",
            "140",
            "--seed",
            "4",
            "--out",
            "test.csv",
            "--out-dir",
            &ds,
        ]);
        run_ok(&[
            "build-dataset",
            "--config",
            &cfg,
            "--traj",
            &p("train.csv"),
            "--stride",
            "3",
            "--workers",
            "2",
            "--seed",
            "1",
            "--out-dir",
            &ds,
        ]);
        run_ok(&[
            "train",
            "--dataset",
            &p("dataset.csv"),
            "--target",
            "t",
            "--out",
            "t.json",
            "--out-dir",
            &ds,
        ]);
        run_ok(&[
            "train",
            "--dataset",
            &p("dataset.csv"),
            "--target",
            "p",
            "--out",
            "p.json",
            "--out-dir",
            &ds,
        ]);
        let out = d.join("bench");
        run_ok(&[
            "bench",
            "--config",
            &cfg,
            "--svr-t",
            &p("t.json"),
            "--svr-p",
            &p("p.json"),
            "--refs",
            &p("test.csv"),
            "--cycles",
            "80",
            "--repeats",
            "1",
            "--out-dir",
            out.to_str().unwrap(),
        ]);
        d
    };
    let a = pipeline("a");
    let b = pipeline("b");
    for f in [
        "train.csv",
        "test.csv",
        "dataset.csv",
        "dataset.csv.meta.json",
        "t.json",
        "t.json.meta.json",
        "p.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    for f in ["report_adaptive.csv", "report_fixed_40_40.csv"] {
        let (x, y) = (a.join("bench").join(f), b.join("bench").join(f));
        assert_eq!(
            without_columns(&x, &["solve_time"]),
            without_columns(&y, &["solve_time"])
        );
        assert!(std::fs::read_to_string(&x).unwrap().ends_with('\n'));
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("bench/summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["cycles"], 80);
    assert_eq!(summary["fixed_40_40"]["mean_t"], 40.0);
}

#[test]
fn train_rejects_a_dataset_whose_header_disagrees_with_its_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let p = |f: &str| dir.path().join(f).to_str().unwrap().to_string();
    run_ok(&[
        "synthesize",
        "--config",
        &config(),
        "--length",
        "60",
        "--out",
        "r.csv",
        "--out-dir",
        d,
    ]);
    run_ok(&[
        "build-dataset",
        "--config",
        &config(),
        "--traj",
        &p("r.csv"),
        "--stride",
        "10",
        "--out-dir",
        d,
    ]);
    let csv = std::fs::read_to_string(p("dataset.csv")).unwrap();
    std::fs::write(p("dataset.csv"), csv.replacen("lat_vel_", "lateral_", 1)).unwrap();
    let o = armpc(&[
        "train",
        "--dataset",
        &p("dataset.csv"),
        "--target",
        "t",
        "--out",
        "m.json",
        "--out-dir",
        d,
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("m.json").exists());
}
