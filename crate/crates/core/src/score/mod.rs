//! Score estimators `s(x, t) ~ grad_x log p_t(x)`.

mod dsm;
mod gmm;
mod mlp;

pub use dsm::{
    dsm_loss, dsm_objective, train_score, DsmBatchLoss, OptimizerConfig, TimeWeighting,
    TrainConfig, TrainReport, TrainingData, TRAIN_T_MIN,
};
pub use gmm::{AnalyticGmmScore, GmmComponent, GmmSpec};
pub use mlp::{Activation, LearnedScore, MlpGradients, MlpScoreNet, TimeEmbedding, WeightsHeader};

/// Anything that maps `(x, t)` to a score vector of the same dimension.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `s(x, t)` into `out`; both slices have length `dim()`.
    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]);

    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.score_into(x, t, &mut out);
        out
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).score_into(x, t, out)
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for Box<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).score_into(x, t, out)
    }
}

impl<S: ScoreModel + ?Sized> ScoreModel for std::sync::Arc<S> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        (**self).score_into(x, t, out)
    }
}

/// `s(x, t) = 0`: the sampler reduces to pure Gaussian diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZeroScore {
    pub dim: usize,
}

impl ZeroScore {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl ScoreModel for ZeroScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score_into(&self, _x: &[f64], _t: f64, out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Gradient of a time-dependent classifier `grad_x log p_t(y | x)`.
pub trait ClassifierGradient: Send + Sync {
    fn num_classes(&self) -> usize;

    fn grad_log_posterior_into(&self, x: &[f64], t: f64, label: usize, out: &mut [f64]);
}

impl<C: ClassifierGradient + ?Sized> ClassifierGradient for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn grad_log_posterior_into(&self, x: &[f64], t: f64, label: usize, out: &mut [f64]) {
        (**self).grad_log_posterior_into(x, t, label, out)
    }
}
