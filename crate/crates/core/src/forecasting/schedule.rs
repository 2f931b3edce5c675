//! Noise schedules and the closed-form forward process.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::ForecastError;

/// Offset of the squared-cosine profile.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip for cosine-derived betas.
pub const COSINE_BETA_CAP: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Step `t` runs from 1 to `T`; vectors are stored at index `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<(), ForecastError> {
        if t == 0 || t > self.steps() {
            return Err(ForecastError::StepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar(0)` is 1 by convention.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of the ancestral reverse step into `t - 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }
}

pub fn build_schedule(kind: ScheduleKind, steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, ForecastError> {
    if steps == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(ForecastError::InvalidRange(format!(
            "T={steps}, beta range [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if steps == 1 => vec![beta_min],
        ScheduleKind::Linear => (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect(),
        ScheduleKind::Cosine => {
            let f = |t: f64| {
                let v = ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos();
                v * v
            };
            let f0 = f(0.0);
            (1..=steps)
                .map(|t| {
                    let prev = f((t - 1) as f64) / f0;
                    let cur = f(t as f64) / f0;
                    (1.0 - cur / prev).clamp(beta_min, COSINE_BETA_CAP)
                })
                .collect()
        }
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// `sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
pub fn forward_diffuse_with(alpha_bar: f64, x0: &Array2<f64>, eps: &Array2<f64>) -> Result<Array2<f64>, ForecastError> {
    if x0.dim() != eps.dim() {
        return Err(ForecastError::ShapeMismatch {
            expected: x0.dim(),
            got: eps.dim(),
        });
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0 * a + eps * b)
}

pub fn forward_diffuse(
    x0: &Array2<f64>,
    t: usize,
    eps: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>, ForecastError> {
    schedule.check(t)?;
    forward_diffuse_with(schedule.alpha_bar(t), x0, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_endpoints_are_evenly_spaced() {
        let s = build_schedule(ScheduleKind::Linear, 4, 1e-4, 0.02).unwrap();
        let want = [0.0001, 0.0001 + 0.0199 / 3.0, 0.0001 + 2.0 * 0.0199 / 3.0, 0.02];
        for (b, w) in s.betas.iter().zip(want) {
            assert!((b - w).abs() < 1e-15, "{b} vs {w}");
        }
        assert!((s.betas[1] - 0.006_733_333_333_333_333).abs() < 1e-15);
    }

    #[test]
    fn cosine_profile_reaches_noise() {
        let s = build_schedule(ScheduleKind::Cosine, 1000, 1e-4, 0.02).unwrap();
        // independent evaluation of the last cumulative product
        let f = |t: f64| ((t / 1000.0 + 0.008) / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut ab = 1.0;
        for t in 1..=1000 {
            let beta = (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-4, 0.999);
            ab *= 1.0 - beta;
        }
        assert!((s.alpha_bar(1000) - ab).abs() < 1e-15);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alpha_bar(1) > 0.99);
    }

    #[test]
    fn alpha_bars_strictly_decrease() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t in [1, 4, 100, 1000] {
                let s = build_schedule(kind, t, 1e-4, 0.02).unwrap();
                assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
                assert!(s.betas.iter().all(|b| *b > 0.0 && *b < 1.0));
            }
        }
    }

    #[test]
    fn invalid_ranges() {
        assert!(build_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 4, 0.0, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Linear, 4, 0.03, 0.02).is_err());
        assert!(build_schedule(ScheduleKind::Cosine, 4, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_limits_and_arithmetic() {
        let x0 = array![[1.0, 2.0]];
        let eps = array![[0.5, -1.0]];
        assert_eq!(forward_diffuse_with(1.0, &x0, &eps).unwrap(), x0);
        assert_eq!(forward_diffuse_with(0.0, &x0, &eps).unwrap(), eps);
        let v = forward_diffuse_with(0.64, &array![[1.0]], &array![[0.5]]).unwrap();
        assert!((v[[0, 0]] - 1.1).abs() < 1e-12);
        assert!(forward_diffuse_with(0.5, &x0, &array![[1.0]]).is_err());
        let s = build_schedule(ScheduleKind::Linear, 4, 1e-4, 0.02).unwrap();
        assert!(matches!(
            forward_diffuse(&x0, 5, &eps, &s),
            Err(ForecastError::StepOutOfRange { t: 5, max: 4 })
        ));
    }
}
