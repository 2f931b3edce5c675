//! `train` and `score`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;
use regulus_core::forecasting::detect::default_t_star;
use regulus_core::forecasting::io::read_trajectories_csv;
use regulus_core::forecasting::model::common_window;
use regulus_core::forecasting::{
    anomaly_scores, build_schedule, calibration_scores, featurize, train_denoiser, BehaviorTrajectory, Calibration, Denoiser,
    ForecastError, NoiseSchedule, TrainConfig, N_FEATURES,
};
use regulus_core::ledger::Ledger;
use regulus_core::simulation::{ForecastingConfig, LEDGER_DIR};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{load, print_json};
use crate::{domain, usage, Cli, CliResult, Failure};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SCORES_FILE: &str = "scores.csv";
const SUMMARY_FILE: &str = "summary.json";

/// Everything besides the weights that scoring needs.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Detector {
    seed: u64,
    window: usize,
    t_star: usize,
    n_train: usize,
    forecasting: ForecastingConfig,
    calibration: Calibration,
}

fn forecast_failure(e: ForecastError) -> Failure {
    match e {
        ForecastError::ShapeMismatch { .. }
        | ForecastError::InconsistentShapes { .. }
        | ForecastError::Data(_)
        | ForecastError::Checkpoint(_)
        | ForecastError::InvalidRange(_)
        | ForecastError::StepOutOfRange { .. }
        | ForecastError::ZeroWindow
        | ForecastError::NonFiniteEntry => usage(e),
        e => domain(e),
    }
}

fn read_summary(dir: &Path) -> CliResult<Value> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn read_csv(path: &Path) -> CliResult<Vec<BehaviorTrajectory>> {
    let f = File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    read_trajectories_csv(f).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Trajectories of every agent of a scenario report, one per epoch that ends
/// a full window and falls before `until` (or the end of the run).
fn scenario_trajectories(dir: &Path, summary: &Value, f: &ForecastingConfig, until: Option<u64>) -> CliResult<Vec<BehaviorTrajectory>> {
    let ledger = Ledger::import_dir(&dir.join(LEDGER_DIR)).map_err(usage)?;
    let n_epochs = summary["n_epochs"].as_u64().ok_or_else(|| usage("summary.json lacks n_epochs"))?;
    let agents: Vec<&str> = summary["agents"]
        .as_array()
        .ok_or_else(|| usage("summary.json lacks agents"))?
        .iter()
        .filter_map(|a| a["agent_id"].as_str())
        .collect();
    let end = until.unwrap_or(n_epochs).min(n_epochs);
    let mut out = Vec::new();
    for epoch in (f.window.max(1) as u64 - 1)..end {
        for agent in &agents {
            let t = match featurize(agent, &ledger, f.window, epoch, &f.features) {
                Ok(t) => t,
                Err(ForecastError::EmptyWindow { .. }) => {
                    BehaviorTrajectory::new(*agent, epoch + 1 - f.window as u64, Array2::zeros((f.window, N_FEATURES)))
                        .map_err(forecast_failure)?
                }
                Err(e) => return Err(forecast_failure(e)),
            };
            out.push(t);
        }
    }
    Ok(out)
}

fn schedule_of(f: &ForecastingConfig) -> CliResult<(NoiseSchedule, usize)> {
    let s = build_schedule(f.schedule, f.steps, f.beta_min, f.beta_max).map_err(forecast_failure)?;
    Ok((s, f.t_star.unwrap_or_else(|| default_t_star(f.steps))))
}

pub fn train(cli: &Cli, data: &Path, calibration: Option<&Path>, out: &Path) -> CliResult {
    let scenario = data.is_dir();
    let summary = if scenario { Some(read_summary(data)?) } else { None };
    // a scenario report carries its own config; an explicit --config wins
    let base = summary.as_ref().map(|s| s["config"].clone());
    let cfg = load(cli.config.as_deref(), base, &cli.overrides, cli.seed)?;
    let f = &cfg.forecasting;
    let mut all = match &summary {
        Some(s) => {
            let onset = s["onset_epoch"].as_u64().ok_or_else(|| usage("summary.json lacks onset_epoch"))?;
            scenario_trajectories(data, s, f, Some(onset))?
        }
        None => read_csv(data)?,
    };
    let held = match calibration {
        Some(p) => read_csv(p)?,
        None => {
            all.sort_by_key(|t| t.window_start_epoch);
            let split = all.len().div_ceil(2);
            all.split_off(split)
        }
    };
    let window = common_window(&all).map_err(forecast_failure)?;
    if let Some(bad) = held.iter().find(|t| t.window() != window) {
        return Err(usage(format!("calibration window {} differs from training window {window}", bad.window())));
    }
    let (schedule, t_star) = schedule_of(f)?;
    let tc = TrainConfig { seed: cfg.seed, ..f.train.clone() };
    let trained = train_denoiser(&all, &schedule, &tc).map_err(forecast_failure)?;
    let refs: Vec<&Array2<f64>> = held.iter().map(|t| &t.x).collect();
    let cal = calibration_scores(&trained.model, &refs, &schedule, t_star, f.repetitions, cfg.seed, f.calibration_draws)
        .map_err(forecast_failure)?;
    let calibration = Calibration::fit(&cal, f.percentile).map_err(forecast_failure)?;

    fs::create_dir_all(out).map_err(domain)?;
    let ckpt = File::create(out.join(CHECKPOINT_FILE)).map_err(domain)?;
    trained.model.write_checkpoint(BufWriter::new(ckpt)).map_err(domain)?;
    let mut w = csv::Writer::from_path(out.join(LOSSES_FILE)).map_err(domain)?;
    w.write_record(["epoch", "loss"]).map_err(domain)?;
    for (i, l) in trained.losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(domain)?;
    }
    w.flush().map_err(domain)?;
    let detector = Detector {
        seed: cfg.seed,
        window,
        t_star,
        n_train: all.len(),
        forecasting: f.clone(),
        calibration,
    };
    let mut text = serde_json::to_string_pretty(&detector).expect("serializable");
    text.push('\n');
    fs::write(out.join(CALIBRATION_FILE), text).map_err(domain)?;
    print_json(&json!({
        "n_train": all.len(),
        "n_calibration": cal.len(),
        "final_loss": trained.losses.last(),
        "threshold": detector.calibration.threshold,
    }))
}

pub fn score(model_dir: &Path, data: &Path, out: &Path) -> CliResult {
    let path = model_dir.join(CALIBRATION_FILE);
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let det: Detector = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let path = model_dir.join(CHECKPOINT_FILE);
    let ckpt = File::open(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let model = Denoiser::read_checkpoint(std::io::BufReader::new(ckpt)).map_err(forecast_failure)?;
    if model.window != det.window {
        return Err(usage(format!("checkpoint window {} disagrees with {CALIBRATION_FILE}", model.window)));
    }
    let data = if data.is_dir() {
        let f = ForecastingConfig {
            window: det.window,
            ..det.forecasting.clone()
        };
        scenario_trajectories(data, &read_summary(data)?, &f, None)?
    } else {
        read_csv(data)?
    };
    if let Some(bad) = data.iter().find(|t| t.window() != model.window) {
        return Err(usage(format!(
            "trajectory {}@{} has window {}, checkpoint expects {}",
            bad.agent_id,
            bad.window_start_epoch,
            bad.window(),
            model.window
        )));
    }
    let (schedule, _) = schedule_of(&det.forecasting)?;
    let refs: Vec<&Array2<f64>> = data.iter().map(|t| &t.x).collect();
    let scores = anomaly_scores(&model, &refs, &schedule, det.t_star, det.forecasting.repetitions, det.seed)
        .map_err(forecast_failure)?;

    fs::create_dir_all(out).map_err(domain)?;
    let mut w = csv::Writer::from_path(out.join(SCORES_FILE)).map_err(domain)?;
    w.write_record(["agent_id", "window_start_epoch", "score", "deviation_probability", "exceeds_threshold", "action"])
        .map_err(domain)?;
    let cal = &det.calibration;
    let mut exceeding = 0;
    for (t, s) in data.iter().zip(&scores) {
        let p = cal.deviation_probability(*s);
        exceeding += cal.exceeds(*s) as usize;
        let action = det.forecasting.cutpoints.action(p).map_or("", |a| a.as_str());
        w.write_record([
            t.agent_id.clone(),
            t.window_start_epoch.to_string(),
            s.to_string(),
            p.to_string(),
            cal.exceeds(*s).to_string(),
            action.to_string(),
        ])
        .map_err(domain)?;
    }
    w.flush().map_err(domain)?;
    print_json(&json!({
        "n_scored": scores.len(),
        "n_exceeding": exceeding,
        "fraction_exceeding": exceeding as f64 / scores.len().max(1) as f64,
        "threshold": cal.threshold,
    }))
}
