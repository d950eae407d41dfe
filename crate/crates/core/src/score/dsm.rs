//! Denoising score matching.
//!
//! With `x(t) = m(t) x0 + std(t) z`, the per-time objective is
//! `L_t = E || std(t) s(x(t), t) + z ||^2`, minimized by the true perturbed
//! score. For [`LearnedScore`](super::LearnedScore) this is `E || z - eps_hat ||^2`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpGradients, MlpScoreNet};
use super::{GmmSpec, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::NoiseSchedule;

/// Lower end of the training time range; avoids the `std(0) = 0` degeneracy.
pub const TRAIN_T_MIN: f64 = 1e-3;

/// Fixed reduction granularity so gradients do not depend on the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DsmBatchLoss {
    pub loss: f64,
    pub gradients: MlpGradients,
}

fn check_time(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    let m = schedule.marginal(t)?;
    if t <= 0.0 || m.std <= 0.0 {
        return Err(Error::Degenerate(format!(
            "noise std is zero at t = {t}; DSM needs t > 0"
        )));
    }
    Ok(m.std)
}

fn perturb(schedule: &NoiseSchedule, x0: &[f64], z: &[f64], t: f64) -> Vec<f64> {
    let m = schedule.marginal_unchecked(t);
    x0.iter().zip(z).map(|(x, z)| m.mean_scale * x + m.std * z).collect()
}

/// Monte-Carlo `L_t` for any score model, one noise draw per batch element.
pub fn dsm_objective(
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    batch: &[Vec<f64>],
    t: f64,
    stream: &NoiseStream,
) -> Result<f64> {
    let std = check_time(schedule, t)?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let total: f64 = batch
        .iter()
        .enumerate()
        .map(|(i, x0)| {
            let z = stream.normal_vec(i as u64, 0, x0.len());
            let xt = perturb(schedule, x0, &z, t);
            let s = score.score(&xt, t);
            s.iter().zip(&z).map(|(s, z)| (std * s + z).powi(2)).sum::<f64>()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// `L_t` for the network and its exact gradient with respect to every weight.
pub fn dsm_loss(
    net: &MlpScoreNet,
    schedule: &NoiseSchedule,
    batch: &[Vec<f64>],
    t: f64,
    stream: &NoiseStream,
) -> Result<DsmBatchLoss> {
    check_time(schedule, t)?;
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .enumerate()
        .map(|(i, x0)| stream.normal_vec(i as u64, 0, x0.len()))
        .collect();
    let times = vec![t; batch.len()];
    Ok(loss_and_grad(net, schedule, batch, &times, &noise))
}

fn loss_and_grad(
    net: &MlpScoreNet,
    schedule: &NoiseSchedule,
    batch: &[Vec<f64>],
    times: &[f64],
    noise: &[Vec<f64>],
) -> DsmBatchLoss {
    let n = batch.len();
    let partials: Vec<(f64, MlpGradients)> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut grads = MlpGradients::zeros_like(net);
            let mut loss = 0.0;
            for &i in idx {
                let (x0, z, t) = (&batch[i], &noise[i], times[i]);
                let xt = perturb(schedule, x0, z, t);
                let cache = net.forward_cached(&net.features(schedule, &xt, t));
                let mut grad_out = Vec::with_capacity(z.len());
                for (e, zi) in cache.output().iter().zip(z) {
                    let r = zi - e;
                    loss += r * r;
                    grad_out.push(-2.0 * r / n as f64);
                }
                net.backward(&cache, &grad_out, &mut grads);
            }
            (loss, grads)
        })
        .collect();
    let mut gradients = MlpGradients::zeros_like(net);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        gradients.add_assign(g);
    }
    DsmBatchLoss {
        loss: loss / n as f64,
        gradients,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeWeighting {
    /// `lambda(t) = 1` with `t ~ U(TRAIN_T_MIN, 1]`.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale the gradient to at most this norm.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            momentum: 0.9,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub weighting: TimeWeighting,
    /// Draw a fresh `t` for each batch element instead of one per step.
    pub time_per_example: bool,
    /// Steps between recorded loss averages.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            weighting: TimeWeighting::Uniform,
            time_per_example: true,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrainingData {
    Gmm(GmmSpec),
    Samples(Vec<Vec<f64>>),
}

impl TrainingData {
    fn dim(&self) -> Result<usize> {
        match self {
            TrainingData::Gmm(g) => Ok(g.dim()),
            TrainingData::Samples(s) => s
                .first()
                .map(Vec::len)
                .ok_or_else(|| Error::InvalidParameter("empty training set".into())),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            TrainingData::Gmm(g) => g.sample_with_label(rng).1,
            TrainingData::Samples(s) => s[rng.random_range(0..s.len())].clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    /// `(step, mean loss over the preceding window)`.
    pub loss_history: Vec<(usize, f64)>,
    pub final_loss_ema: f64,
}

/// Fits `net` by SGD with momentum on uniformly weighted DSM.
pub fn train_score(
    mut net: MlpScoreNet,
    data: &TrainingData,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    stream: &NoiseStream,
) -> Result<(MlpScoreNet, TrainReport)> {
    if data.dim()? != net.data_dim() {
        return Err(Error::shape(net.data_dim(), data.dim()?));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
    }
    let mut rng = stream.sequential(0x7EA1_u64);
    let mut velocity = MlpGradients::zeros_like(&net);
    let mut ema = None::<f64>;
    let mut window = (0.0, 0usize);
    let mut history = Vec::new();
    let d = net.data_dim();
    let uniform_t = |rng: &mut dyn RngCore| TRAIN_T_MIN + (1.0 - TRAIN_T_MIN) * (1.0 - rand::Rng::random::<f64>(rng));

    for step in 0..config.steps {
        let batch: Vec<Vec<f64>> = (0..config.batch_size).map(|_| data.draw(&mut rng)).collect();
        let times: Vec<f64> = if config.time_per_example {
            (0..config.batch_size).map(|_| uniform_t(&mut rng)).collect()
        } else {
            vec![uniform_t(&mut rng); config.batch_size]
        };
        let noise: Vec<Vec<f64>> = (0..config.batch_size)
            .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let DsmBatchLoss { loss, mut gradients } = loss_and_grad(&net, schedule, &batch, &times, &noise);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        if let Some(max) = config.optimizer.clip_norm {
            let norm = gradients.norm();
            if norm > max {
                gradients.scale(max / norm);
            }
        }
        velocity.scale(config.optimizer.momentum);
        velocity.add_assign(&gradients);
        net.apply_update(&velocity, config.optimizer.learning_rate);
        if !net.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }

        ema = Some(match ema {
            None => loss,
            Some(e) => 0.99 * e + 0.01 * loss,
        });
        window.0 += loss;
        window.1 += 1;
        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            history.push((step + 1, window.0 / window.1 as f64));
            window = (0.0, 0);
        }
    }
    Ok((
        net,
        TrainReport {
            steps: config.steps,
            loss_history: history,
            final_loss_ema: ema.unwrap_or(f64::NAN),
        },
    ))
}
