use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn delayctl(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_delayctl"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn malformed_config_exits_2_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\"name\": ").unwrap();
    let out = tmp.path().join("out");
    let o = delayctl(&["value", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn unknown_subcommand_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayctl(&["frobnicate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn budget_gate_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/scenarios/quadratic_steering.json")).unwrap())
            .unwrap();
    cfg["mc"]["max_work"] = serde_json::json!(10);
    let path = tmp.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = delayctl(&["dpp-check", "--config", path.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(4));
    assert!(!out.exists());
}

#[test]
fn dpp_check_reports_residual() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayctl(&["dpp-check", "--scenario", "quadratic_steering"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "dpp.json")).unwrap();
    assert_eq!(v["command"], "dpp-check");
    assert!(v["result"]["residual"].as_f64().unwrap() <= 1e-2);
}

#[test]
fn csv_outputs_carry_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayctl(&["simulate", "--seed", "9", "--dump"], tmp.path());
    assert!(o.status.success());
    let csv = String::from_utf8(read(tmp.path(), "node_stats.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# config_hash=") && first.ends_with(" seed=9"), "{first}");
    let json: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "simulate.json")).unwrap();
    assert_eq!(first, format!("# config_hash={} seed=9", json["config_hash"].as_str().unwrap()));
    let bin = read(tmp.path(), "paths.bin");
    assert_eq!(&bin[..8], b"DCTLPTH1");
    assert_eq!(&bin[8..72], json["config_hash"].as_str().unwrap().as_bytes());
    assert_eq!(u64::from_le_bytes(bin[72..80].try_into().unwrap()), 9);
}

#[test]
fn outputs_independent_of_thread_count() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(a.path(), "1"), (b.path(), "4")] {
        let o = delayctl(&["value", "--threads", threads], dir);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["value.json", "value_controls.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn repro_all_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let runs = [(a.path(), "1"), (b.path(), "4"), (c.path(), "4")];
    std::thread::scope(|s| {
        for (dir, threads) in runs {
            s.spawn(move || {
                let o = delayctl(&["repro-all", "--seed", "42", "--threads", threads], dir);
                assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
            });
        }
    });
    for f in ["repro_summary.csv", "repro_summary.json"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} 1 vs 4 threads");
        assert_eq!(read(b.path(), f), read(c.path(), f), "{f} repeated");
    }
}

#[test]
fn ez_demo_regime_check() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayctl(&["ez-demo", "--regime-check"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "ez_value.json")).unwrap();
    assert_eq!(v["result"][0]["clamps"], 0);
    assert_eq!(v["result"][1]["violations"], 0);
    assert!(tmp.path().join("ez_policy.csv").exists());
    assert!(tmp.path().join("ez_residual.csv").exists());
}

#[test]
fn mollify_audit_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = delayctl(&["mollify-audit", "--schedule", "4,8,16"], tmp.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&read(tmp.path(), "mollify.json")).unwrap();
    for row in v["result"].as_array().unwrap() {
        let n = row["n"].as_f64().unwrap();
        assert!(row["sup_error"].as_f64().unwrap() * n <= 1.0);
    }
    let o = delayctl(&["mollify-audit", "--schedule", "0"], &tmp.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
}
