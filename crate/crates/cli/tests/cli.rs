use std::path::Path;
use std::process::{Command, Output};

fn backfrac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backfrac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn ml_eval_prints_values_and_routes() {
    let o = backfrac(&["ml-eval", "--gamma", "1", "--beta", "1", "-1", "0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,value,route"));
    let v: f64 = lines
        .next()
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!((v - (-1f64).exp()).abs() < 1e-15);
    assert_eq!(lines.next(), Some("0,1.00000000000000000e0,Exact"));
}

#[test]
fn positive_arguments_are_rejected() {
    let o = backfrac(&["ml-eval", "--gamma", "0.5", "--beta", "1", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("positive argument"));
}

#[test]
fn invert_reports_json() {
    let o = backfrac(&[
        "invert",
        "--method",
        "mqbvm",
        "--q",
        "2",
        "--rule",
        "aposteriori",
        "--delta",
        "1e-5",
        "--p",
        "4",
        "--xi",
        "1.6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["method"], "mqbvm:2");
    assert_eq!(v["rule"], "aposteriori");
    assert!(v["relative_error"].as_f64().unwrap() < 1e-2);
    // discrepancy root: residual = ξδ
    assert!((v["residual"].as_f64().unwrap() / 1.6e-5 - 1.0).abs() < 1e-6);
}

#[test]
fn manual_parameters_select_the_manual_rule() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let o = backfrac(&[
        "invert",
        "--method",
        "ftm",
        "--n-cut",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["rule"], "manual");
    assert_eq!(v["parameter"], 12.0);
    let csv = std::fs::read_to_string(out).unwrap();
    assert!(csv.starts_with("n,lambda,g,g_rec\n"));
    assert_eq!(csv.lines().count(), 257);
}

#[test]
fn inconsistent_invert_flags_fail() {
    for args in [
        &["invert", "--method", "ftm", "--beta", "0.1"][..],
        &["invert", "--method", "qbvm", "--n-cut", "3"],
        &["invert", "--method", "ftm", "--q", "2"],
        &["invert", "--rule", "apriori", "--beta", "0.1"],
        &["invert", "--method", "tikhonov"],
    ] {
        assert_eq!(backfrac(args).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn forward_writes_coefficients() {
    let o = backfrac(&["forward", "--n-modes", "8", "--t", "0.25,0.5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("n,lambda,g,u(t=0.25),u(t=0.5),h\n"));
    assert_eq!(text.lines().count(), 9);
}

#[test]
fn calibrate_writes_a_loadable_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cal.json");
    let o = backfrac(&[
        "calibrate",
        "--alpha",
        "0.4,0.6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let table = backfrac::mittag_leffler::CalibrationTable::load(&out).unwrap();
    assert_eq!(table.entries.len(), 2);
    assert!(table.entries.iter().all(|e| e.c1_lower <= e.c1_upper));
}

fn rates_in(dir: &Path, threads: &str, extra: &[&str]) -> Output {
    let mut args = vec!["rates", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    Command::new(env!("CARGO_BIN_EXE_backfrac"))
        .args(&args)
        .env("BACKFRAC_THREADS", threads)
        .output()
        .unwrap()
}

#[test]
fn default_sweep_passes_its_checks_and_is_thread_independent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let o = rates_in(a.path(), "1", &["--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert!(rates_in(b.path(), "3", &[]).status.success());
    for name in ["records.csv", "fits.csv", "plots/rates_p6.svg"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn failed_checks_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    // without p = 6 and FTM the rate table cannot be checked
    std::fs::write(
        &spec,
        r#"{"p_values": [1.0, 2.0], "methods": ["qbvm"], "trials": 2}"#,
    )
    .unwrap();
    let o = rates_in(
        dir.path(),
        "2",
        &["--check", "--spec", spec.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
    let o = rates_in(dir.path(), "2", &["--spec", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
}
