//! Synthetic honest/anomalous trajectory population for detection tests.
//!
//! Each honest trajectory has a latent diligence level that moves all six
//! channel means together along a fixed direction, plus AR(1) per-channel
//! residual noise with standard deviation `residual_sd`. Anomalous
//! trajectories start from an honest draw and move the means of
//! `shifted_channels` randomly chosen channels by `shift_sigmas` residual
//! standard deviations, in random directions, for the whole window.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::detect::{anomaly_scores, default_t_star, roc_auc, Calibration, DetectionMetrics, ZScoreBaseline};
use super::model::{train_denoiser, TrainConfig};
use super::schedule::{build_schedule, ScheduleKind};
use super::{BehaviorTrajectory, ForecastError, N_FEATURES};

const BASE: [f64; N_FEATURES] = [0.6, 0.4, 0.5, 0.5, 0.3, 0.5];
const LOADING: [f64; N_FEATURES] = [0.4, -0.4, 0.3, 0.2, -0.3, 0.4];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub window: usize,
    pub n_train: usize,
    pub n_calibration: usize,
    pub n_test_honest: usize,
    pub n_test_anomalous: usize,
    pub residual_sd: f64,
    pub autocorrelation: f64,
    pub shift_sigmas: f64,
    pub shifted_channels: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            window: 8,
            n_train: 800,
            n_calibration: 200,
            n_test_honest: 200,
            n_test_anomalous: 200,
            residual_sd: 0.04,
            autocorrelation: 0.6,
            shift_sigmas: 3.0,
            shifted_channels: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectionFixture {
    pub train: Vec<BehaviorTrajectory>,
    pub calibration: Vec<BehaviorTrajectory>,
    pub test: Vec<BehaviorTrajectory>,
    /// `true` marks an anomalous test trajectory.
    pub labels: Vec<bool>,
}

fn honest(cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let level: f64 = rng.random_range(-0.5..0.5);
    let rho = cfg.autocorrelation;
    let innovation = (1.0 - rho * rho).sqrt() * cfg.residual_sd;
    let mut x = Array2::zeros((cfg.window, N_FEATURES));
    for c in 0..N_FEATURES {
        let mut e = cfg.residual_sd * rng.sample::<f64, _>(StandardNormal);
        for r in 0..cfg.window {
            if r > 0 {
                e = rho * e + innovation * rng.sample::<f64, _>(StandardNormal);
            }
            x[[r, c]] = BASE[c] + LOADING[c] * level + e;
        }
    }
    x
}

fn anomalous(cfg: &FixtureConfig, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut x = honest(cfg, rng);
    let k = cfg.shifted_channels.clamp(1, N_FEATURES);
    for c in sample(rng, N_FEATURES, k) {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let shift = sign * cfg.shift_sigmas * cfg.residual_sd;
        x.column_mut(c).mapv_inplace(|v| v + shift);
    }
    x
}

fn wrap(name: &str, i: usize, x: Array2<f64>) -> BehaviorTrajectory {
    BehaviorTrajectory::new(format!("{name}-{i:04}"), 0, x).expect("finite (W, 6)")
}

impl DetectionFixture {
    pub fn generate(cfg: &FixtureConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |n: usize, name: &str, rng: &mut ChaCha8Rng| -> Vec<BehaviorTrajectory> {
            (0..n).map(|i| wrap(name, i, honest(cfg, rng))).collect()
        };
        let train = draw(cfg.n_train, "train", &mut rng);
        let calibration = draw(cfg.n_calibration, "calib", &mut rng);
        let mut test = draw(cfg.n_test_honest, "honest", &mut rng);
        let mut labels = vec![false; test.len()];
        for i in 0..cfg.n_test_anomalous {
            test.push(wrap("anomalous", i, anomalous(cfg, &mut rng)));
            labels.push(true);
        }
        DetectionFixture {
            train,
            calibration,
            test,
            labels,
        }
    }
}

/// Training profile used on this fixture. The library default learning rate
/// underfits it within a reasonable epoch budget.
pub fn detection_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-2,
        epochs: 800,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectionResult {
    pub auc: f64,
    pub diffusion: DetectionMetrics,
    pub baseline_auc: f64,
    pub baseline: DetectionMetrics,
}

fn split(scores: &[f64], labels: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, l) in scores.iter().zip(labels) {
        if *l { pos.push(*s) } else { neg.push(*s) }
    }
    (pos, neg)
}

fn judge(cal: &[f64], test: &[f64], labels: &[bool], percentile: f64) -> Result<(f64, DetectionMetrics), ForecastError> {
    let c = Calibration::fit(cal, percentile)?;
    let predicted: Vec<bool> = test.iter().map(|s| c.exceeds(*s)).collect();
    let (pos, neg) = split(test, labels);
    Ok((roc_auc(&pos, &neg), DetectionMetrics::evaluate(&predicted, labels)?))
}

/// Train on the honest split (`T = 100`, linear schedule), calibrate both
/// detectors on the calibration split and score the test split.
pub fn run_detection(cfg: &FixtureConfig, train: &TrainConfig, seed: u64, percentile: f64) -> Result<DetectionResult, ForecastError> {
    let fx = DetectionFixture::generate(cfg, seed);
    let schedule = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02)?;
    let model = train_denoiser(&fx.train, &schedule, train)?.model;
    let t_star = default_t_star(schedule.steps());
    let cal: Vec<_> = fx.calibration.iter().map(|t| &t.x).collect();
    let test: Vec<_> = fx.test.iter().map(|t| &t.x).collect();
    let cal_scores = anomaly_scores(&model, &cal, &schedule, t_star, 4, seed)?;
    let test_scores = anomaly_scores(&model, &test, &schedule, t_star, 4, seed)?;
    let (auc, diffusion) = judge(&cal_scores, &test_scores, &fx.labels, percentile)?;

    let z = ZScoreBaseline::fit(&fx.train.iter().map(|t| &t.x).collect::<Vec<_>>())?;
    let zc: Vec<f64> = cal.iter().map(|x| z.score(x)).collect();
    let zt: Vec<f64> = test.iter().map(|x| z.score(x)).collect();
    let (baseline_auc, baseline) = judge(&zc, &zt, &fx.labels, percentile)?;
    Ok(DetectionResult {
        auc,
        diffusion,
        baseline_auc,
        baseline,
    })
}
