use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use regulus_core::forecasting::fixture::{DetectionFixture, FixtureConfig};
use regulus_core::forecasting::io::write_trajectories_csv;
use regulus_core::forecasting::BehaviorTrajectory;
use serde_json::Value;

fn regulus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regulus"))
        .args(args)
        .env_remove("REGULUS_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", p(out), "--set", "n_epochs=6"];
    args.extend(extra);
    regulus(&args)
}

/// Every file under `dir`, relative path to bytes.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_writes_one_reputation_row_per_agent_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let o = run_small(&out, &["--set", "n_agents=5", "--set", "policy_mix.honest=5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = stdout_json(&o);
    assert_eq!(summary["n_agents"], 5);
    let mut rdr = csv::Reader::from_path(out.join("reputations.csv")).unwrap();
    assert_eq!(rdr.records().count(), 5 * 6);
    for f in ["events.csv", "detection.csv", "aggregation.csv", "summary.json", "ledger/ledger.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn config_problems_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let missing = tmp.path().join("absent.json");
    assert_eq!(code(&regulus(&["run", "--config", p(&missing), "--out", p(&out)])), 2);
    assert_eq!(code(&run_small(&out, &["--set", "n_agnets=3"])), 2);
    assert_eq!(code(&run_small(&out, &["--set", "n_agents=0"])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\"n_agents\": \"eight\"}").unwrap();
    assert_eq!(code(&regulus(&["run", "--config", p(&bad), "--out", p(&out)])), 2);
    assert!(!out.exists());
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, "{\"n_agents\": 4, \"n_epochs\": 3, \"policy_mix\": {\"honest\": 3, \"free_rider\": 1}}").unwrap();
    let out = tmp.path().join("r");
    let o = regulus(&["run", "--config", p(&cfg), "--out", p(&out), "--set", "n_epochs=2", "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout_json(&o);
    assert_eq!((s["n_agents"].as_u64(), s["n_epochs"].as_u64(), s["seed"].as_u64()), (Some(4), Some(2), Some(11)));
}

#[test]
fn same_seed_same_bytes_other_seed_differs() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for (d, seed) in dirs.iter().zip(["7", "7", "8"]) {
        assert_eq!(code(&run_small(d, &["--seed", seed])), 0);
    }
    let (a, b, c) = (snapshot(&dirs[0]), snapshot(&dirs[1]), snapshot(&dirs[2]));
    assert_eq!(a, b);
    assert_eq!(a.len(), c.len());
    assert_ne!(a, c);
}

fn scenario_ledger(tmp: &Path) -> PathBuf {
    let out = tmp.join("r");
    assert_eq!(code(&run_small(&out, &[])), 0);
    out.join("ledger")
}

#[test]
fn verify_accepts_an_untampered_export_without_touching_it() {
    let tmp = tempfile::tempdir().unwrap();
    let ledger = scenario_ledger(tmp.path());
    let before = snapshot(&ledger);
    let o = regulus(&["verify", "--ledger", p(&ledger)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["clean"], true);
    assert_eq!(v["blocks"], 6);
    assert_eq!(snapshot(&ledger), before);
    // the report directory itself is accepted too
    assert_eq!(code(&regulus(&["verify", "--ledger", p(ledger.parent().unwrap())])), 0);
}

#[test]
fn verify_names_the_block_of_an_edited_payload() {
    let tmp = tempfile::tempdir().unwrap();
    let ledger = scenario_ledger(tmp.path());
    let path = ledger.join("ledger.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let target = lines.len() / 2;
    let mut rec: Value = serde_json::from_str(&lines[target]).unwrap();
    let id = rec["record_id"].as_str().unwrap().to_string();
    let hex = rec["payload"].as_str().unwrap().to_string();
    // flip the low bit of the last payload byte
    let last = u8::from_str_radix(&hex[hex.len() - 2..], 16).unwrap() ^ 1;
    rec["payload"] = Value::from(format!("{}{last:02x}", &hex[..hex.len() - 2]));
    lines[target] = serde_json::to_string(&rec).unwrap();
    fs::write(&path, lines.join("\n") + "\n").unwrap();

    let blocks: Vec<Value> = serde_json::from_str(&fs::read_to_string(ledger.join("blocks.json")).unwrap()).unwrap();
    let height = blocks
        .iter()
        .find(|b| b["record_ids"].as_array().unwrap().iter().any(|r| r == &Value::from(id.clone())))
        .map(|b| b["height"].as_u64().unwrap())
        .expect("record is sealed");

    let o = regulus(&["verify", "--ledger", p(&ledger)]);
    assert_eq!(code(&o), 1);
    let v = stdout_json(&o);
    assert_eq!(v["clean"], false);
    let violations = v["violations"].as_array().unwrap();
    assert!(violations.iter().any(|f| f["block"] == height && f["check"] == "chain"), "{violations:?}");
    assert!(violations.iter().all(|f| f["block"] == height), "{violations:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains(&format!("block {height}")));
}

#[test]
fn verify_rejects_a_truncated_export_as_unparseable() {
    let tmp = tempfile::tempdir().unwrap();
    let ledger = scenario_ledger(tmp.path());
    let path = ledger.join("ledger.jsonl");
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&regulus(&["verify", "--ledger", p(&ledger)])), 2);
    assert_eq!(code(&regulus(&["verify", "--ledger", p(&tmp.path().join("nowhere"))])), 2);
}

#[test]
fn query_and_export_agree_with_the_export() {
    let tmp = tempfile::tempdir().unwrap();
    let ledger = scenario_ledger(tmp.path());
    let all: Vec<Value> = fs::read_to_string(ledger.join("ledger.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let o = regulus(&["query", "--ledger", p(&ledger), "--agent", "agent-03", "--kind", "report", "--from-epoch", "1", "--to-epoch", "3"]);
    assert_eq!(code(&o), 0);
    let got: Vec<String> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["record_id"].as_str().unwrap().to_string())
        .collect();
    let want: Vec<String> = all
        .iter()
        .filter(|r| r["agent_id"] == "agent-03" && r["kind"] == "report" && (1..=3).contains(&r["epoch"].as_u64().unwrap()))
        .map(|r| r["record_id"].as_str().unwrap().to_string())
        .collect();
    assert!(!want.is_empty());
    assert_eq!(got, want);
    assert_eq!(code(&regulus(&["query", "--ledger", p(&ledger), "--kind", "gossip"])), 2);

    let out = tmp.path().join("csv");
    assert_eq!(code(&regulus(&["export", "--ledger", p(&ledger), "--out", p(&out)])), 0);
    let n = csv::Reader::from_path(out.join("records.csv")).unwrap().records().count();
    assert_eq!(n, all.len());
    let b = csv::Reader::from_path(out.join("blocks.csv")).unwrap().records().count();
    assert_eq!(b, 6);
}

fn write_csv(path: &Path, t: &[BehaviorTrajectory]) {
    write_trajectories_csv(fs::File::create(path).unwrap(), t).unwrap();
}

struct Trained {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    calibration: PathBuf,
    fresh: PathBuf,
    train: PathBuf,
}

fn honest_fixture(window: usize, seed: u64) -> DetectionFixture {
    let cfg = FixtureConfig {
        window,
        n_train: 200,
        n_calibration: 200,
        n_test_honest: 200,
        n_test_anomalous: 0,
        ..FixtureConfig::default()
    };
    DetectionFixture::generate(&cfg, seed)
}

const TRAIN_SETTINGS: [&str; 8] = [
    "--set",
    "forecasting.train.learning_rate=0.03",
    "--set",
    "forecasting.train.epochs=150",
    "--set",
    "forecasting.calibration_draws=1",
    "--seed",
    "5",
];

fn train_on_fixture(model: &str) -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let fx = honest_fixture(8, 21);
    let (train, calibration, fresh) = (tmp.path().join("train.csv"), tmp.path().join("calib.csv"), tmp.path().join("fresh.csv"));
    write_csv(&train, &fx.train);
    write_csv(&calibration, &fx.calibration);
    write_csv(&fresh, &fx.test);
    let dir = tmp.path().join(model);
    let mut args = vec!["train", "--data", p(&train), "--calibration", p(&calibration), "--out", p(&dir)];
    args.extend(TRAIN_SETTINGS);
    let o = regulus(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    Trained {
        dir,
        calibration,
        fresh,
        train,
        _tmp: tmp,
    }
}

/// Independent nearest-rank percentile.
fn nearest_rank(mut v: Vec<f64>, pct: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (pct / 100.0 * v.len() as f64).ceil() as usize;
    v[rank.max(1) - 1]
}

fn scored(t: &Trained, data: &Path, name: &str) -> (Value, Vec<f64>) {
    let out = t.dir.parent().unwrap().join(name);
    let o = regulus(&["score", "--model", p(&t.dir), "--data", p(data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("scores.csv")).unwrap();
    let scores = rdr.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    (stdout_json(&o), scores)
}

#[test]
fn honest_trajectories_stay_within_the_calibrated_budget() {
    let t = train_on_fixture("m");
    let det: Value = serde_json::from_str(&fs::read_to_string(t.dir.join("calibration.json")).unwrap()).unwrap();
    let honest: Vec<f64> = det["calibration"]["honest_scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(honest.len(), 200);
    let threshold = det["calibration"]["threshold"].as_f64().unwrap();
    assert_eq!(threshold, nearest_rank(honest.clone(), 95.0));

    // one calibration pass seeded like scoring: the calibration set's
    // scores come back exactly, so at most 5% lie above its own 95th percentile
    let (summary, scores) = scored(&t, &t.calibration, "s_cal");
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(sorted, honest);
    let above = scores.iter().filter(|s| **s > threshold).count();
    assert_eq!(summary["n_exceeding"].as_u64().unwrap() as usize, above);
    assert!(above as f64 / scores.len() as f64 <= 0.05);

    // fresh honest draws: 5% in expectation; 10% is beyond 3 binomial sd at n = 200
    let (summary, scores) = scored(&t, &t.fresh, "s_fresh");
    let above = scores.iter().filter(|s| **s > threshold).count();
    assert_eq!(summary["n_exceeding"].as_u64().unwrap() as usize, above);
    assert!(above as f64 / scores.len() as f64 <= 0.10, "{above} of {}", scores.len());
}

#[test]
fn mismatched_window_exits_2() {
    let t = train_on_fixture("m");
    let other = t.dir.parent().unwrap().join("w6.csv");
    write_csv(&other, &honest_fixture(6, 3).test);
    let out = t.dir.parent().unwrap().join("s");
    let o = regulus(&["score", "--model", p(&t.dir), "--data", p(&other), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.join("scores.csv").exists());
}

#[test]
fn training_is_deterministic_and_leaves_inputs_alone() {
    let t = train_on_fixture("m1");
    let before = fs::read(&t.train).unwrap();
    let again = t.dir.parent().unwrap().join("m2");
    let mut args = vec!["train", "--data", p(&t.train), "--calibration", p(&t.calibration), "--out", p(&again)];
    args.extend(TRAIN_SETTINGS);
    assert_eq!(code(&regulus(&args)), 0);
    for f in ["model.ckpt", "losses.csv", "calibration.json"] {
        assert_eq!(fs::read(t.dir.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
    assert_eq!(fs::read(&t.train).unwrap(), before);
}

#[test]
fn train_and_score_a_scenario_report() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("r");
    assert_eq!(code(&regulus(&["run", "--out", p(&report), "--set", "n_epochs=30"])), 0);
    let model = tmp.path().join("m");
    let o = regulus(&["train", "--data", p(&report), "--out", p(&model), "--set", "forecasting.train.epochs=50"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let losses = csv::Reader::from_path(model.join("losses.csv")).unwrap().records().count();
    assert_eq!(losses, 50);
    let out = tmp.path().join("s");
    let o = regulus(&["score", "--model", p(&model), "--data", p(&report), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 8 agents, one trajectory per epoch from the first full window on
    assert_eq!(stdout_json(&o)["n_scored"], 8 * (30 - 3));
}
