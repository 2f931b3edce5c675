//! Reverse process, anomaly scoring, calibration and countermeasures.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{flatten, Denoiser};
use super::schedule::NoiseSchedule;
use super::{ForecastError, N_FEATURES};
use crate::arbitration::{ArbitrationContract, ClaimKind, CONTRACT_ID};
use crate::ledger::{Hash32, Payload, RecordKind};
use crate::reputation::EventSink;
use crate::AgentId;

pub const MIN_CALIBRATION: usize = 20;

fn check_step(t: usize, schedule: &NoiseSchedule) -> Result<(), ForecastError> {
    if t == 0 || t > schedule.steps() {
        return Err(ForecastError::StepOutOfRange { t, max: schedule.steps() });
    }
    Ok(())
}

/// Ancestral reverse updates from `t_start` down to 1 on a batch of flattened
/// rows. Row `i` draws its sampling noise from `rngs[i]`.
fn reverse_batch(
    model: &Denoiser,
    mut x: Array2<f64>,
    t_start: usize,
    schedule: &NoiseSchedule,
    rngs: &mut [ChaCha8Rng],
) -> Array2<f64> {
    for t in (1..=t_start).rev() {
        let steps = vec![t; x.nrows()];
        let eps_hat = model.predict(&x, &steps);
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        x.scaled_add(-coef, &eps_hat);
        x *= inv_sqrt_alpha;
        if t > 1 {
            let sigma = schedule.posterior_variance(t).sqrt();
            for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
                row.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    x
}

fn check_shape(model: &Denoiser, x: &Array2<f64>) -> Result<(), ForecastError> {
    if x.dim() != (model.window, N_FEATURES) {
        return Err(ForecastError::ShapeMismatch {
            expected: (model.window, N_FEATURES),
            got: x.dim(),
        });
    }
    Ok(())
}

/// Reconstruct `x0` from the noisy trajectory `x_t`.
pub fn denoise_trajectory(
    model: &Denoiser,
    x_t: &Array2<f64>,
    t_start: usize,
    schedule: &NoiseSchedule,
    noise_seed: u64,
) -> Result<Array2<f64>, ForecastError> {
    check_step(t_start, schedule)?;
    check_shape(model, x_t)?;
    let mut rngs = [ChaCha8Rng::seed_from_u64(noise_seed)];
    let out = reverse_batch(model, flatten(&[x_t]), t_start, schedule, &mut rngs);
    Ok(out.into_shape_with_order(x_t.dim()).expect("same size"))
}

/// Seed for repetition `k` of trajectory `x`, derived from its content, so a
/// trajectory's score does not depend on what else is in the batch.
fn repetition_seed(seed: u64, k: usize, x: &Array2<f64>) -> u64 {
    let mut h = Sha256::new();
    h.update(b"regulus/score/v1");
    h.update(seed.to_be_bytes());
    h.update((k as u64).to_be_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Mean over `k` repetitions of the per-entry squared reconstruction error
/// after noising to `t_star` and denoising back.
pub fn anomaly_scores(
    model: &Denoiser,
    trajectories: &[&Array2<f64>],
    schedule: &NoiseSchedule,
    t_star: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<f64>, ForecastError> {
    check_step(t_star, schedule)?;
    let k = k.max(1);
    for x in trajectories {
        check_shape(model, x)?;
    }
    let d = model.flat_dim();
    let rows = trajectories.len() * k;
    let mut rngs: Vec<ChaCha8Rng> = Vec::with_capacity(rows);
    let mut clean = Array2::zeros((rows, d));
    let mut noisy = Array2::zeros((rows, d));
    let ab = schedule.alpha_bar(t_star);
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    for (i, x) in trajectories.iter().enumerate() {
        let flat = Array1::from_iter(x.iter().copied());
        for rep in 0..k {
            let r = i * k + rep;
            let mut rng = ChaCha8Rng::seed_from_u64(repetition_seed(seed, rep, x));
            clean.row_mut(r).assign(&flat);
            let mut row = noisy.row_mut(r);
            for (o, v) in row.iter_mut().zip(flat.iter()) {
                *o = sa * v + sb * rng.sample::<f64, _>(StandardNormal);
            }
            rngs.push(rng);
        }
    }
    let recon = reverse_batch(model, noisy, t_star, schedule, &mut rngs);
    let err = (recon - &clean).mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    Ok(err
        .as_slice()
        .expect("contiguous")
        .chunks(k)
        .map(|c| c.iter().sum::<f64>() / k as f64)
        .collect())
}

pub fn anomaly_score(
    model: &Denoiser,
    x: &Array2<f64>,
    schedule: &NoiseSchedule,
    t_star: usize,
    k: usize,
    seed: u64,
) -> Result<f64, ForecastError> {
    Ok(anomaly_scores(model, &[x], schedule, t_star, k, seed)?[0])
}

/// Seed of calibration pass `draw`; pass 0 uses `seed` itself, so scoring a
/// calibration trajectory with `seed` reproduces its first-pass score.
pub fn calibration_seed(seed: u64, draw: usize) -> u64 {
    if draw == 0 {
        seed
    } else {
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(draw as u64)
    }
}

/// Honest scores from `draws` independent scoring passes over `trajectories`.
pub fn calibration_scores(
    model: &Denoiser,
    trajectories: &[&Array2<f64>],
    schedule: &NoiseSchedule,
    t_star: usize,
    k: usize,
    seed: u64,
    draws: usize,
) -> Result<Vec<f64>, ForecastError> {
    let mut out = Vec::with_capacity(trajectories.len() * draws);
    for d in 0..draws.max(1) {
        out.extend(anomaly_scores(model, trajectories, schedule, t_star, k, calibration_seed(seed, d))?);
    }
    Ok(out)
}

/// Default noising depth: one twentieth of the schedule, at least 1.
pub fn default_t_star(steps: usize) -> usize {
    (steps / 20).max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub percentile: f64,
    pub threshold: f64,
    /// Honest scores, ascending.
    pub honest_scores: Vec<f64>,
}

impl Calibration {
    /// Nearest-rank percentile of the honest scores.
    pub fn fit(scores: &[f64], percentile: f64) -> Result<Self, ForecastError> {
        if scores.len() < MIN_CALIBRATION {
            return Err(ForecastError::InsufficientCalibrationData {
                needed: MIN_CALIBRATION,
                got: scores.len(),
            });
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let rank = ((percentile / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
        Ok(Calibration {
            percentile,
            threshold: sorted[rank.min(sorted.len()) - 1],
            honest_scores: sorted,
        })
    }

    /// Fraction of honest scores strictly below `score`.
    pub fn deviation_probability(&self, score: f64) -> f64 {
        self.honest_scores.partition_point(|s| *s < score) as f64 / self.honest_scores.len() as f64
    }

    pub fn exceeds(&self, score: f64) -> bool {
        score > self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    RaiseAlert,
    RestrictParticipation,
    EscalateToArbitration,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::RaiseAlert => "raise_alert",
            Action::RestrictParticipation => "restrict_participation",
            Action::EscalateToArbitration => "escalate_to_arbitration",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cutpoints {
    pub raise: f64,
    pub restrict: f64,
    pub escalate: f64,
}

impl Default for Cutpoints {
    fn default() -> Self {
        Cutpoints {
            raise: 0.95,
            restrict: 0.99,
            escalate: 0.999,
        }
    }
}

impl Cutpoints {
    pub fn action(&self, probability: f64) -> Option<Action> {
        if probability >= self.escalate {
            Some(Action::EscalateToArbitration)
        } else if probability >= self.restrict {
            Some(Action::RestrictParticipation)
        } else if probability >= self.raise {
            Some(Action::RaiseAlert)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub agent_id: AgentId,
    pub epoch: u64,
    pub anomaly_score: f64,
    pub deviation_probability: f64,
    pub action: Action,
    pub record_id: Hash32,
    pub dispute_id: Option<u64>,
}

/// Turn scores into alerts and apply their countermeasures on `contract`.
/// Escalations open a contract-initiated dispute over `evidence[agent]`;
/// the claim kind is that of the first rule the evidence trips, falling back
/// to a contradiction claim when none does.
pub fn forecast_alerts(
    scores: &[(AgentId, f64)],
    calibration: Option<&Calibration>,
    cutpoints: &Cutpoints,
    contract: &mut ArbitrationContract,
    evidence: &BTreeMap<AgentId, Vec<Hash32>>,
) -> Result<Vec<Alert>, ForecastError> {
    let cal = calibration.ok_or(ForecastError::NotCalibrated)?;
    let epoch = contract.current_epoch();
    let mut alerts = Vec::new();
    for (agent, score) in scores {
        let p = cal.deviation_probability(*score);
        let Some(action) = cutpoints.action(p) else {
            continue;
        };
        let mut dispute_id = None;
        match action {
            Action::RaiseAlert => {}
            Action::RestrictParticipation => contract.restrict(agent, "forecast_alert")?,
            Action::EscalateToArbitration => {
                let ev = evidence.get(agent).cloned().unwrap_or_default();
                let kind = contract.suggest_claim(agent, &ev)?.unwrap_or(ClaimKind::Contradiction);
                dispute_id = Some(contract.open_dispute(CONTRACT_ID, agent, kind, ev)?.dispute_id);
            }
        }
        let mut payload = Payload::new()
            .with("event", "alert")
            .with("agent", agent)
            .with("score", score)
            .with("deviation_probability", p)
            .with("action", action.as_str());
        if let Some(d) = dispute_id {
            payload.insert("dispute_id", d);
        }
        let record_id = contract.emit(RecordKind::ActionLog, payload)?.expect("contract records events");
        alerts.push(Alert {
            agent_id: agent.clone(),
            epoch,
            anomaly_score: *score,
            deviation_probability: p,
            action,
            record_id,
            dispute_id,
        });
    }
    Ok(alerts)
}

/// Per-channel z-score baseline: mean squared z over all entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScoreBaseline {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreBaseline {
    pub fn fit(trajectories: &[&Array2<f64>]) -> Result<Self, ForecastError> {
        if trajectories.is_empty() {
            return Err(ForecastError::EmptyDataset);
        }
        let mut mean = vec![0.0; N_FEATURES];
        let mut sq = vec![0.0; N_FEATURES];
        let mut n = 0.0;
        for x in trajectories {
            for row in x.rows() {
                for c in 0..N_FEATURES {
                    mean[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                n += 1.0;
            }
        }
        let std = (0..N_FEATURES)
            .map(|c| {
                let m = mean[c] / n;
                (sq[c] / n - m * m).max(0.0).sqrt().max(1e-9)
            })
            .collect();
        Ok(ZScoreBaseline {
            mean: mean.iter().map(|m| m / n).collect(),
            std,
        })
    }

    pub fn score(&self, x: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        for row in x.rows() {
            for c in 0..N_FEATURES {
                let z = (row[c] - self.mean[c]) / self.std[c];
                acc += z * z;
            }
        }
        acc / x.len() as f64
    }
}

/// Probability that a random positive outscores a random negative; ties
/// count one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    if positives.is_empty() || negatives.is_empty() {
        return f64::NAN;
    }
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for p in positives {
        let below = neg.partition_point(|n| n < p);
        let ties = neg.partition_point(|n| n <= p) - below;
        wins += below as f64 + 0.5 * ties as f64;
    }
    wins / (positives.len() * neg.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl DetectionMetrics {
    /// Empty denominators count as perfect, so a run with no positives and no
    /// alerts scores 1.0 throughout.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        DetectionMetrics {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn evaluate(predicted: &[bool], labels: &[bool]) -> Result<Self, ForecastError> {
        if predicted.len() != labels.len() {
            return Err(ForecastError::LabelMismatch {
                scores: predicted.len(),
                labels: labels.len(),
            });
        }
        let mut c = [0usize; 4];
        for (p, l) in predicted.iter().zip(labels) {
            c[match (p, l) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            }] += 1;
        }
        Ok(Self::from_counts(c[0], c[1], c[2], c[3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecasting::schedule::{build_schedule, ScheduleKind};

    #[test]
    fn nearest_rank_threshold_and_ecdf() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let cal = Calibration::fit(&scores, 95.0).unwrap();
        assert_eq!(cal.threshold, 95.0);
        assert_eq!(cal.deviation_probability(0.5), 0.0);
        assert_eq!(cal.deviation_probability(1000.0), 1.0);
        assert_eq!(cal.deviation_probability(95.5), 0.95);
        assert!(matches!(
            Calibration::fit(&scores[..19], 95.0),
            Err(ForecastError::InsufficientCalibrationData { needed: 20, got: 19 })
        ));
    }

    #[test]
    fn action_bands() {
        let c = Cutpoints::default();
        assert_eq!(c.action(0.5), None);
        assert_eq!(c.action(0.96), Some(Action::RaiseAlert));
        assert_eq!(c.action(0.99), Some(Action::RestrictParticipation));
        assert_eq!(c.action(0.9995), Some(Action::EscalateToArbitration));
    }

    #[test]
    fn confusion_metrics() {
        let m = DetectionMetrics::from_counts(8, 2, 2, 88);
        assert!((m.precision - 0.8).abs() < 1e-12 && (m.recall - 0.8).abs() < 1e-12 && (m.f1 - 0.8).abs() < 1e-12);
        let none = DetectionMetrics::evaluate(&[false; 5], &[false; 5]).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (1.0, 1.0, 1.0));
        let labels: Vec<bool> = (0..10).map(|i| i == 0).collect();
        let all = DetectionMetrics::evaluate(&[true; 10], &labels).unwrap();
        assert!((all.precision - 0.1).abs() < 1e-12);
        assert!(DetectionMetrics::evaluate(&[true], &[]).is_err());
    }

    #[test]
    fn auc_against_brute_force() {
        let pos = [0.9, 0.4, 0.7, 0.7];
        let neg = [0.1, 0.7, 0.3, 0.95, 0.2];
        let mut brute = 0.0;
        for p in pos {
            for n in neg {
                brute += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        assert!((roc_auc(&pos, &neg) - brute / 20.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_shapes_and_determinism() {
        let s = build_schedule(ScheduleKind::Linear, 20, 1e-4, 0.02).unwrap();
        let m = Denoiser::new(3, 16, 1);
        let x = Array2::from_elem((3, N_FEATURES), 0.3);
        let a = denoise_trajectory(&m, &x, 5, &s, 9).unwrap();
        assert_eq!(a.dim(), x.dim());
        assert_eq!(a, denoise_trajectory(&m, &x, 5, &s, 9).unwrap());
        assert!(denoise_trajectory(&m, &x, 21, &s, 9).is_err());
        assert!(denoise_trajectory(&m, &Array2::zeros((4, N_FEATURES)), 5, &s, 9).is_err());
        let one = anomaly_score(&m, &x, &s, 3, 2, 5).unwrap();
        let y = Array2::from_elem((3, N_FEATURES), 0.9);
        let batch = anomaly_scores(&m, &[&y, &x], &s, 3, 2, 5).unwrap();
        assert!(one >= 0.0);
        assert!((batch[1] - one).abs() < 1e-12);
    }

    #[test]
    fn zscore_baseline_centers_on_training_data() {
        let a = Array2::from_shape_fn((2, N_FEATURES), |(r, _)| r as f64);
        let b = ZScoreBaseline::fit(&[&a]).unwrap();
        assert!(b.mean.iter().all(|m| (m - 0.5).abs() < 1e-12));
        assert!((b.score(&a) - 1.0).abs() < 1e-12);
    }
}
