//! Time-conditioned feedforward denoiser with hand-written backprop.
//!
//! Input is the flattened noisy trajectory concatenated with a sinusoidal
//! embedding of the step; two SiLU hidden layers; output is the predicted
//! noise with the trajectory's shape.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::{BehaviorTrajectory, ForecastError, N_FEATURES};

pub const TIME_EMBEDDING: usize = 32;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RGLS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            hidden: 128,
            seed: 0,
        }
    }
}

/// Sinusoidal embedding of step `t`: 16 sines then 16 cosines.
pub fn time_embedding(t: usize) -> [f64; TIME_EMBEDDING] {
    let half = TIME_EMBEDDING / 2;
    let mut out = [0.0; TIME_EMBEDDING];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of SiLU at `x`, given `s = sigmoid(x)`.
fn silu_grad(x: f64, s: f64) -> f64 {
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// Shape (in, out).
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn xavier(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (input + output) as f64).sqrt();
        Dense {
            w: Array2::from_shape_fn((input, output), |_| rng.random_range(-a..a)),
            b: Array1::zeros(output),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }
}

/// Three dense layers; hidden activations SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub window: usize,
    pub layers: Vec<Dense>,
}

struct Cache {
    x: Array2<f64>,
    h: Vec<Array2<f64>>,
    sig: Vec<Array2<f64>>,
    a: Vec<Array2<f64>>,
}

impl Denoiser {
    pub fn new(window: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = window * N_FEATURES;
        let dims = [d + TIME_EMBEDDING, hidden, hidden, d];
        Denoiser {
            window,
            layers: dims.windows(2).map(|w| Dense::xavier(w[0], w[1], &mut rng)).collect(),
        }
    }

    pub fn flat_dim(&self) -> usize {
        self.window * N_FEATURES
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn input(&self, x_t: &Array2<f64>, steps: &[usize]) -> Array2<f64> {
        let d = self.flat_dim();
        let mut x = Array2::zeros((x_t.nrows(), d + TIME_EMBEDDING));
        x.slice_mut(s![.., ..d]).assign(x_t);
        for (i, t) in steps.iter().enumerate() {
            for (j, v) in time_embedding(*t).into_iter().enumerate() {
                x[[i, d + j]] = v;
            }
        }
        x
    }

    fn forward_cached(&self, x_t: &Array2<f64>, steps: &[usize]) -> (Array2<f64>, Cache) {
        let x = self.input(x_t, steps);
        let mut h = Vec::with_capacity(2);
        let mut sig = Vec::with_capacity(2);
        let mut a = Vec::with_capacity(2);
        let mut cur = x.clone();
        for layer in &self.layers[..self.layers.len() - 1] {
            let pre = layer.forward(&cur);
            let sg = pre.mapv(sigmoid);
            cur = &pre * &sg;
            h.push(pre);
            sig.push(sg);
            a.push(cur.clone());
        }
        let out = self.layers.last().expect("three layers").forward(&cur);
        (out, Cache { x, h, sig, a })
    }

    /// Predicted noise for a batch: rows are flattened noisy trajectories,
    /// `steps[i]` is the diffusion step of row `i`.
    pub fn predict(&self, x_t: &Array2<f64>, steps: &[usize]) -> Array2<f64> {
        let mut cur = self.input(x_t, steps);
        for layer in &self.layers[..self.layers.len() - 1] {
            cur = layer.forward(&cur).mapv(silu);
        }
        self.layers.last().expect("three layers").forward(&cur)
    }

    /// Mean squared error of one batch and its parameter gradients.
    fn loss_and_grads(&self, x_t: &Array2<f64>, steps: &[usize], eps: &Array2<f64>) -> (f64, Vec<Dense>) {
        let (out, cache) = self.forward_cached(x_t, steps);
        let diff = out - eps;
        let n = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n;
        let mut delta = diff * (2.0 / n);
        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { &cache.x } else { &cache.a[k - 1] };
            grads.push(Dense {
                w: input.t().dot(&delta),
                b: delta.sum_axis(Axis(0)),
            });
            if k > 0 {
                let mut back = delta.dot(&self.layers[k].w.t());
                ndarray::Zip::from(&mut back)
                    .and(&cache.h[k - 1])
                    .and(&cache.sig[k - 1])
                    .for_each(|g, &pre, &sg| *g *= silu_grad(pre, sg));
                delta = back;
            }
        }
        grads.reverse();
        (loss, grads)
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            w.write_all(&(l.w.nrows() as u32).to_le_bytes())?;
            w.write_all(&(l.w.ncols() as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.w.iter().chain(l.b.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.n_params() * 8);
        self.write_checkpoint(&mut out).expect("vec write");
        out
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self, ForecastError> {
        let bad = |m: &str| ForecastError::Checkpoint(m.to_string());
        let mut u32_buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32, ForecastError> {
            r.read_exact(&mut u32_buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32_buf))
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(ForecastError::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers != 3 {
            return Err(ForecastError::Checkpoint(format!("expected 3 layers, found {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            dims.push((read_u32(&mut r)? as usize, read_u32(&mut r)? as usize));
        }
        let flat = dims[n_layers - 1].1;
        let chained = dims.windows(2).all(|w| w[0].1 == w[1].0);
        if !chained || flat % N_FEATURES != 0 || dims[0].0 != flat + TIME_EMBEDDING {
            return Err(bad("inconsistent layer dimensions"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut f = [0u8; 8];
        for (i, o) in dims {
            let mut take = |n: usize| -> Result<Vec<f64>, ForecastError> {
                (0..n)
                    .map(|_| {
                        r.read_exact(&mut f).map_err(|_| bad("truncated parameters"))?;
                        Ok(f64::from_le_bytes(f))
                    })
                    .collect()
            };
            let w = Array2::from_shape_vec((i, o), take(i * o)?).expect("sized");
            let b = Array1::from_vec(take(o)?);
            layers.push(Dense { w, b });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read failure"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Denoiser {
            window: flat / N_FEATURES,
            layers,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Denoiser,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
}

pub fn flatten(trajectories: &[&Array2<f64>]) -> Array2<f64> {
    let d = trajectories.first().map_or(0, |x| x.len());
    let mut out = Array2::zeros((trajectories.len(), d));
    for (mut row, x) in out.rows_mut().into_iter().zip(trajectories) {
        row.assign(&Array1::from_iter(x.iter().copied()));
    }
    out
}

/// Check that every trajectory has shape `(W, 6)` for a common `W`.
pub fn common_window(data: &[BehaviorTrajectory]) -> Result<usize, ForecastError> {
    let first = data.first().ok_or(ForecastError::EmptyDataset)?;
    let w = first.window();
    if let Some(bad) = data.iter().find(|t| t.x.dim() != (w, N_FEATURES)) {
        return Err(ForecastError::InconsistentShapes {
            expected: (w, N_FEATURES),
            got: bad.x.dim(),
        });
    }
    Ok(w)
}

/// Noise-prediction training with uniformly sampled steps.
pub fn train_denoiser(
    data: &[BehaviorTrajectory],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutput, ForecastError> {
    let window = common_window(data)?;
    let all = flatten(&data.iter().map(|t| &t.x).collect::<Vec<_>>());
    let mut model = Denoiser::new(window, cfg.hidden, cfg.seed);
    let mut velocity: Vec<Dense> = model
        .layers
        .iter()
        .map(|l| Dense {
            w: Array2::zeros(l.w.dim()),
            b: Array1::zeros(l.b.dim()),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0f_d1ff);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = cfg.batch_size.max(1);
    let d = model.flat_dim();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let eps = Array2::from_shape_fn((b, d), |_| rng.sample::<f64, _>(StandardNormal));
            let mut x_t = Array2::zeros((b, d));
            for (i, &idx) in chunk.iter().enumerate() {
                let ab = schedule.alpha_bar(steps[i]);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let mut row = x_t.row_mut(i);
                row.assign(&all.row(idx));
                row *= sa;
                row.scaled_add(sb, &eps.row(i));
            }
            let (loss, grads) = model.loss_and_grads(&x_t, &steps, &eps);
            if !loss.is_finite() {
                return Err(ForecastError::NonFiniteLoss { epoch });
            }
            total += loss * b as f64;
            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&grads) {
                v.w.zip_mut_with(&g.w, |v, g| *v = cfg.momentum * *v + g);
                v.b.zip_mut_with(&g.b, |v, g| *v = cfg.momentum * *v + g);
                layer.w.scaled_add(-cfg.learning_rate, &v.w);
                layer.b.scaled_add(-cfg.learning_rate, &v.b);
            }
            if !model.params_finite() {
                return Err(ForecastError::NonFiniteLoss { epoch });
            }
        }
        losses.push(total / data.len() as f64);
    }
    Ok(TrainOutput { model, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecasting::schedule::{build_schedule, ScheduleKind};

    fn constant(n: usize, w: usize) -> Vec<BehaviorTrajectory> {
        (0..n)
            .map(|i| BehaviorTrajectory::new(format!("a{i}"), 0, Array2::from_elem((w, N_FEATURES), 0.5)).unwrap())
            .collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Denoiser::new(2, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((3, 12), |_| rng.random_range(-1.0..1.0));
        let eps = Array2::from_shape_fn((3, 12), |_| rng.sample::<f64, _>(StandardNormal));
        let steps = [1, 7, 30];
        let (_, grads) = m.loss_and_grads(&x, &steps, &eps);
        let h = 1e-6;
        for (k, idx) in [(0, (5, 3)), (1, (2, 7)), (2, (4, 11))] {
            let orig = m.layers[k].w[idx];
            m.layers[k].w[idx] = orig + h;
            let up = m.loss_and_grads(&x, &steps, &eps).0;
            m.layers[k].w[idx] = orig - h;
            let down = m.loss_and_grads(&x, &steps, &eps).0;
            m.layers[k].w[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[k].w[idx];
            assert!((numeric - analytic).abs() < 1e-6 * (1.0 + analytic.abs()), "layer {k}: {numeric} vs {analytic}");
        }
        let orig = m.layers[1].b[4];
        m.layers[1].b[4] = orig + h;
        let up = m.loss_and_grads(&x, &steps, &eps).0;
        m.layers[1].b[4] = orig - h;
        let down = m.loss_and_grads(&x, &steps, &eps).0;
        assert!(((up - down) / (2.0 * h) - grads[1].b[4]).abs() < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let m = Denoiser::new(3, 16, 5);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"RGLS");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 8 + m.n_params() * 8);
        let back = Denoiser::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, m);
        assert!(Denoiser::read_checkpoint(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Denoiser::read_checkpoint(&bad[..]).is_err());
    }

    #[test]
    fn empty_and_ragged_datasets() {
        let s = build_schedule(ScheduleKind::Linear, 10, 1e-4, 0.02).unwrap();
        assert!(matches!(
            train_denoiser(&[], &s, &TrainConfig::default()),
            Err(ForecastError::EmptyDataset)
        ));
        let mut data = constant(2, 3);
        data.push(BehaviorTrajectory::new("x", 0, Array2::zeros((4, N_FEATURES))).unwrap());
        assert!(matches!(
            train_denoiser(&data, &s, &TrainConfig::default()),
            Err(ForecastError::InconsistentShapes { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_learns_a_constant() {
        let s = build_schedule(ScheduleKind::Linear, 100, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            seed: 42,
            ..TrainConfig::default()
        };
        let data = constant(4096, 4);
        let a = train_denoiser(&data, &s, &cfg).unwrap();
        let b = train_denoiser(&data, &s, &cfg).unwrap();
        assert_eq!(
            a.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            b.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert!(a.losses.windows(2).all(|w| w[1] < w[0]), "{:?}", a.losses);
    }
}
