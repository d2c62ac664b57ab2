use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use structured_marl::builtin::builtin_config;
use structured_marl::mastac::{RunRecord, Variant};
use structured_marl_cli::bundle::CSV_HEADER;
use structured_marl_cli::{ResultBundle, SeedRun};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_structured-marl"))
        .args(args)
        .env("STRUCTURED_MARL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn agent_sets(report: &Value, agent: usize, key: &str) -> Vec<u64> {
    report["agents"][agent - 1][key].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect()
}

#[test]
fn deps_reports_fixture_sets() {
    let out = cli(&["deps", "--graphs", "six-agent"]);
    assert!(out.status.success());
    let r = json_of(&out);
    assert_eq!(agent_sets(&r, 1, "I_Q"), vec![1, 2]);
    assert_eq!(agent_sets(&r, 3, "I_Q"), vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(agent_sets(&r, 5, "I_Q"), vec![5, 6]);
    assert_eq!(agent_sets(&r, 1, "I_GD"), vec![1, 2, 3, 4]);
    assert_eq!(agent_sets(&r, 3, "I_GD"), vec![3, 4]);

    let r = json_of(&cli(&["deps", "--graphs", "warehouse40", "--kappa", "2"]));
    assert_eq!(r["vd_complete"], Value::Bool(true));
    for i in 1..=40 {
        assert_eq!(agent_sets(&r, i, "I_Q").len(), 40);
        assert_eq!(agent_sets(&r, i, "I_Q_kappa").len(), 15);
    }
    let r = json_of(&cli(&["deps", "--graphs", "thermal40"]));
    assert_eq!(r["vd_strongly_connected_components"], 2);
}

#[test]
fn deps_on_a_decoupled_file_gives_singletons() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.json");
    std::fs::write(&path, r#"{"n_agents":3,"state":[],"obs":[],"reward":[]}"#).unwrap();
    let out = cli(&["deps", "--graphs", path.to_str().unwrap(), "--horizon", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = json_of(&out);
    for i in 1..=3u64 {
        for key in ["I_Q", "I_GD", "I_Qhat"] {
            assert_eq!(agent_sets(&r, i as usize, key), vec![i]);
        }
    }
    assert!(!cli(&["deps", "--graphs", "no-such-thing"]).status.success());
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn train_writes_deterministic_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = cli(&["train", "--env", "warehouse9", "--seeds", "0", "--epochs", "10", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = String::from_utf8(read(&a, "runs.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
    assert_eq!(lines.count(), 10);
    for name in ["runs.csv", "aggregate.csv", "curve.svg", "bundle.json"] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs");
    }
    assert_eq!(read(&a, "checkpoints/seed0/agent9_target_critic.json"), read(&b, "checkpoints/seed0/agent9_target_critic.json"));
    let bundle: Value = serde_json::from_slice(&read(&a, "bundle.json")).unwrap();
    assert_eq!(bundle["metadata"]["rng"], structured_marl::env::RNG_NAME);
    assert_eq!(bundle["metadata"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn train_accepts_config_files_and_seed_ranges() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"builtin":"thermal40","train":{"epochs":6,"variant":"kappa:1"}}"#).unwrap();
    let out = dir.path().join("o");
    let o = cli(&["train", "--env", cfg.to_str().unwrap(), "--seeds", "2..3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read(&out, "runs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("thermal40-kappa:1-s2,kappa:1,2,0,"));
    assert!(!cli(&["train", "--env", "warehouse9", "--seeds", "", "--out", out.to_str().unwrap()]).status.success());
}

#[test]
fn thread_variable_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_structured-marl"))
        .args(["train", "--env", "warehouse9", "--epochs", "1", "--out", "/nonexistent/never"])
        .env("STRUCTURED_MARL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_suites_report_json() {
    let r = json_of(&cli(&["verify", "--suite", "dependency-oracles"]));
    assert_eq!(r["passed"], Value::Bool(true));
    assert!(r["cases"].as_u64().unwrap() >= 200);
    let r = json_of(&cli(&["verify", "--suite", "grad-check"]));
    assert!(r["max_error"].as_f64().unwrap() <= 1e-4);
    let o = cli(&["verify", "--suite", "theorem1", "--mutate"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json_of(&o)["passed"], Value::Bool(false));
    assert_eq!(cli(&["verify", "--suite", "theorem9"]).status.code(), Some(2));
}

#[test]
fn variance_lab_reads_a_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("lab.json");
    std::fs::write(&cfg, r#"{"seed": 3, "samples": 20000, "sigma_q": 0.8, "sigma_qhat": 0.2}"#).unwrap();
    let o = cli(&["variance-lab", "--config", cfg.to_str().unwrap()]);
    let r = json_of(&o);
    assert_eq!(r["report"]["samples"], 20000);
    assert_eq!(r["qhat_set"], serde_json::json!([1, 2]));
    std::fs::write(&cfg, r#"{"sample": 5}"#).unwrap();
    assert_eq!(cli(&["variance-lab", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn failed_seeds_are_reported_not_dropped() {
    let mut exp = builtin_config("warehouse9").unwrap();
    exp.train.epochs = 3;
    let ok = |seed: u64, v: f64| SeedRun {
        seed,
        outcome: Ok((RunRecord::from_steps(Variant::Exact, seed, 8, vec![v; 3], v.abs(), 0), Vec::new())),
    };
    let runs = vec![ok(0, -1.0), SeedRun { seed: 1, outcome: Err("diverged".into()) }, ok(2, -3.0)];
    let bundle = ResultBundle::new(&exp, runs);
    assert_eq!(bundle.failed_seeds(), vec![1]);
    assert_eq!(bundle.aggregate.len(), 3);
    assert_eq!(bundle.aggregate[0].episode_return.n, 2);
    assert_eq!(bundle.aggregate[2].episode_return.mean, -2.0);
    let f = bundle.final_fraction.unwrap();
    assert_eq!((f.n, f.mean), (2, -2.0));
    let summary: Value = serde_json::from_str(&bundle.summary_json().unwrap()).unwrap();
    assert_eq!(summary["failed_seeds"], serde_json::json!([1]));
    assert_eq!(summary["seeds"][1]["failed"], "diverged");
    assert_eq!(bundle.runs_csv().unwrap(), bundle.runs_csv().unwrap());
    assert_eq!(bundle.svg(), bundle.svg());
    assert_eq!(String::from_utf8(bundle.runs_csv().unwrap()).unwrap().lines().count(), 1 + 2 * 3);
}

#[test]
fn final_fraction_uses_the_last_fifth() {
    let steps: Vec<f64> = (0..16).map(|e| e as f64).collect();
    let rec = RunRecord::from_steps(Variant::Exact, 0, 4, steps, 15.0, 0);
    let tail = &rec.episode_return[12..];
    assert_eq!(rec.final_fraction_mean(0.2).unwrap(), tail.iter().sum::<f64>() / 4.0);
}
