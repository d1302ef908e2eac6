use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn valvediag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valvediag")).args(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn config() -> String {
    repo("configs/default_system.json").display().to_string()
}

fn simulate_to(dir: &TempDir, name: &str, faults: &[&str], seed: &str) -> String {
    let out = dir.path().join(name).display().to_string();
    let scenario = repo("scenarios/explicit_steps.json").display().to_string();
    let config = config();
    let mut args = vec!["simulate", "--config", &config, "--scenario", &scenario, "--seed", seed, "--out", &out];
    for f in faults {
        args.extend(["--fault", f]);
    }
    let o = valvediag(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    out
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = simulate_to(&dir, "a.csv", &["AT3:closed"], "5");
    let b = simulate_to(&dir, "b.csv", &["AT3:closed"], "5");
    let c = simulate_to(&dir, "c.csv", &["AT3:closed"], "6");
    let (a, b, c) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), std::fs::read(c).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(text(&a).starts_with("# config_digest="));
}

#[test]
fn bad_fault_valve_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv").display().to_string();
    let scenario = repo("scenarios/explicit_steps.json").display().to_string();
    let o = valvediag(&["simulate", "--config", &config(), "--scenario", &scenario, "--fault", "AT9:closed", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("valve index out of range"), "{}", text(&o.stderr));
}

#[test]
fn empty_trace_is_rejected() {
    let dir = TempDir::new().unwrap();
    let trace = dir.path().join("empty.csv");
    std::fs::write(&trace, "").unwrap();
    let report = dir.path().join("r.json").display().to_string();
    let o = valvediag(&["diagnose", "--config", &config(), "--trace", &trace.display().to_string(), "--report", &report]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).contains("no samples"), "{}", text(&o.stderr));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(valvediag(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(valvediag(&["--help"]).status.code(), Some(0));
}

fn diagnose(dir: &TempDir, trace: &str, extra: &[&str]) -> (Output, String) {
    let report = dir.path().join("report.json").display().to_string();
    let config = config();
    let mut args = vec!["diagnose", "--config", &config, "--trace", trace, "--report", &report];
    args.extend(extra);
    let o = valvediag(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    (o, report)
}

#[test]
fn jammed_valve_gets_a_verdict_and_report_replays() {
    let dir = TempDir::new().unwrap();
    let trace = simulate_to(&dir, "t.csv", &["AT3:closed"], "1");
    let series = dir.path().join("series.csv").display().to_string();
    let (o, report) = diagnose(&dir, &trace, &["--series", &series]);
    let stdout = text(&o.stdout);
    let verdict = stdout
        .lines()
        .find(|l| l.starts_with("AT3 jammed-closed confidence="))
        .unwrap_or_else(|| panic!("{stdout}"));
    let rest = verdict.trim_start_matches("AT3 jammed-closed confidence=");
    let (conf, period) = rest.split_once(" at period ").unwrap();
    assert!(conf.parse::<f64>().unwrap() >= 0.5);
    period.parse::<usize>().unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("* AT3")), "{stdout}");

    let replay = valvediag(&["report", &report]);
    assert_eq!(replay.status.code(), Some(0));
    assert_eq!(text(&replay.stdout), stdout);

    let rows = std::fs::read_to_string(series).unwrap().lines().count();
    let periods: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rows, 1 + 20 * periods["periods"].as_array().unwrap().len());
}

#[test]
fn healthy_trace_reports_no_faults() {
    let dir = TempDir::new().unwrap();
    let trace = simulate_to(&dir, "t.csv", &[], "2");
    let (o, _) = diagnose(&dir, &trace, &[]);
    let stdout = text(&o.stdout);
    assert!(stdout.contains("no faults identified"), "{stdout}");
    assert!(!stdout.lines().any(|l| l.starts_with('*')));
}

#[test]
fn report_without_periods_is_rejected() {
    let dir = TempDir::new().unwrap();
    let trace = simulate_to(&dir, "t.csv", &[], "2");
    let (_, report) = diagnose(&dir, &trace, &[]);
    let mut doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    doc.as_object_mut().unwrap().remove("periods");
    std::fs::write(&report, doc.to_string()).unwrap();
    let o = valvediag(&["report", &report]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o.stderr).starts_with("error: "));
}

#[test]
fn flags_override_the_settings_file() {
    let dir = TempDir::new().unwrap();
    let trace = simulate_to(&dir, "t.csv", &[], "2");
    let settings = dir.path().join("diag.json");
    std::fs::write(&settings, r#"{"period_len": 50}"#).unwrap();
    let settings = settings.display().to_string();

    let count = |report: &str| {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
        doc["periods"].as_array().unwrap().len()
    };
    let (_, r) = diagnose(&dir, &trace, &[]);
    let default_periods = count(&r);
    let (_, r) = diagnose(&dir, &trace, &["--diag-config", &settings]);
    assert_eq!(count(&r), 2 * default_periods);
    let (_, r) = diagnose(&dir, &trace, &["--diag-config", &settings, "--period-len", "200"]);
    assert_eq!(count(&r), default_periods / 2);
}

#[test]
fn mismatched_config_warns() {
    let dir = TempDir::new().unwrap();
    let trace = simulate_to(&dir, "t.csv", &[], "2");
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(repo("configs/default_system.json")).unwrap()).unwrap();
    cfg["tank_pressure"] = serde_json::json!(1.0e5);
    let other = dir.path().join("other.json");
    std::fs::write(&other, cfg.to_string()).unwrap();
    let report = dir.path().join("r.json").display().to_string();
    let o = valvediag(&["diagnose", "--config", &other.display().to_string(), "--trace", &trace, "--report", &report]);
    assert_eq!(o.status.code(), Some(0));
    assert!(text(&o.stderr).starts_with("warning: trace was generated with configuration"));
}
