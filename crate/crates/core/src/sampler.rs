//! Forward perturbation, reverse-SDE Euler–Maruyama steps, and the guided
//! synthesis/editing procedure (VE and VP, with and without an edit mask,
//! optionally classifier-guided).
//!
//! The reverse loop visits `t_n = t0 n / N` for `n = N..=1` and evaluates the
//! score at the pre-step state with time `t_n`. The last step lands exactly on
//! `t = 0`, so a masked run leaves residual noise of scale `sigma(t0 / N)` on
//! preserved coordinates unless `hard_restore` is set.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::schedule::{Marginal, NoiseSchedule, TimeGrid, VeSchedule, VpSchedule};
use crate::score::{ClassifierGradient, ScoreModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Flat { len: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat { len } => len,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Flat { len } => write!(f, "[{len}]"),
            Shape::Image { channels, height, width } => write!(f, "[{channels}x{height}x{width}]"),
        }
    }
}

/// The user-provided starting point, flat or `C x H x W` (channel-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Guide {
    data: Vec<f64>,
    shape: Shape,
}

impl Guide {
    pub fn flat(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidParameter("guide must be nonempty".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("guide entries must be finite".into()));
        }
        let len = data.len();
        Ok(Self { data, shape: Shape::Flat { len } })
    }

    pub fn image(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::Image { channels, height, width };
        if shape.is_empty() || data.len() != shape.len() {
            return Err(Error::shape(shape, format!("[{}]", data.len())));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("image guide values must lie in [0, 1]".into()));
        }
        Ok(Self { data, shape })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Binary edit mask: `true` marks editable coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditMask {
    omega: Vec<bool>,
    shape: Shape,
}

impl EditMask {
    pub fn new(omega: Vec<bool>, shape: Shape) -> Result<Self> {
        if omega.len() != shape.len() {
            return Err(Error::shape(shape, format!("[{}]", omega.len())));
        }
        Ok(Self { omega, shape })
    }

    /// From `{0, 1}` values; anything else is rejected.
    pub fn from_values(values: &[f64], shape: Shape) -> Result<Self> {
        let omega = values
            .iter()
            .map(|&v| match v {
                v if v == 0.0 => Ok(false),
                v if v == 1.0 => Ok(true),
                v => Err(Error::InvalidParameter(format!("mask entry {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(omega, shape)
    }

    pub fn all(shape: Shape, editable: bool) -> Self {
        Self { omega: vec![editable; shape.len()], shape }
    }

    pub fn omega(&self) -> &[bool] {
        &self.omega
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn editable_count(&self) -> usize {
        self.omega.iter().filter(|&&b| b).count()
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.omega.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Guidance {
    pub label: usize,
    /// Multiplier on the classifier gradient; `1` is exact conditioning.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeditConfig {
    pub t0: f64,
    pub n_steps: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance: Option<Guidance>,
    /// Record the state every `stride` reverse steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_stride: Option<usize>,
    /// After a masked run, copy the guide back onto preserved coordinates.
    #[serde(default)]
    pub hard_restore: bool,
}

fn default_repeats() -> usize {
    1
}

impl SdeditConfig {
    pub fn new(t0: f64, n_steps: usize) -> Self {
        Self {
            t0,
            n_steps,
            repeats: 1,
            seed: 0,
            guidance: None,
            snapshot_stride: None,
            hard_restore: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_repeats(mut self, repeats: usize) -> Self {
        self.repeats = repeats;
        self
    }

    pub fn with_guidance(mut self, label: usize, scale: f64) -> Self {
        self.guidance = Some(Guidance { label, scale });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t0) {
            return Err(Error::Domain { name: "t0", value: self.t0, domain: "[0, 1]" });
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be >= 1".into()));
        }
        if self.snapshot_stride == Some(0) {
            return Err(Error::InvalidParameter("snapshot_stride must be >= 1".into()));
        }
        if let Some(g) = self.guidance {
            if !g.scale.is_finite() {
                return Err(Error::InvalidParameter("guidance scale must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub repeat: usize,
    pub step: usize,
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub output: Vec<f64>,
    pub shape: Shape,
    pub seed: u64,
    pub stream: u64,
    /// Reverse steps taken across all repeats.
    pub steps: usize,
    /// State right after the forward perturbation of the final repeat.
    pub perturbed: Vec<f64>,
    /// Largest `||s(x, t)||^2` seen by the integrator.
    pub max_score_norm_sq: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub snapshots: Vec<Snapshot>,
}

/// Optional wall-clock cap for a run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunControl {
    pub deadline: Option<Instant>,
}

/// Forward-perturbation coefficients: VE `(1, sigma(t0))`; VP uses the
/// discrete retention on the `n_steps` grid, `(sqrt(alpha), sqrt(1 - alpha))`.
pub fn perturbation(schedule: &NoiseSchedule, t0: f64, n_steps: usize) -> Result<Marginal> {
    match schedule {
        NoiseSchedule::Ve(ve) => Ok(Marginal { mean_scale: 1.0, std: ve.sigma(t0)? }),
        NoiseSchedule::Vp(vp) => {
            let alpha = vp.discrete_alpha(t0, n_steps)?;
            Ok(Marginal { mean_scale: alpha.sqrt(), std: (1.0 - alpha).sqrt() })
        }
    }
}

/// One draw of `x(t0)` given the guide.
pub fn forward_perturb(
    guide: &[f64],
    schedule: &NoiseSchedule,
    t0: f64,
    n_steps: usize,
    stream: &NoiseStream,
) -> Result<Vec<f64>> {
    let m = perturbation(schedule, t0, n_steps)?;
    let z = stream.normal_vec(0, 0, guide.len());
    Ok(guide.iter().zip(z).map(|(x, z)| m.mean_scale * x + m.std * z).collect())
}

/// VE step from `t` to `t - dt`: `x + eps^2 s(x, t) + eps z`,
/// `eps^2 = sigma^2(t) - sigma^2(t - dt)`.
pub fn reverse_step_ve(
    ve: &VeSchedule,
    score: &dyn ScoreModel,
    x: &[f64],
    t: f64,
    dt: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let prev = t - dt;
    if prev < -1e-12 {
        return Err(Error::Domain { name: "t - dt", value: prev, domain: "[0, 1]" });
    }
    let var = ve.sigma(t)?.powi(2) - ve.sigma(prev.max(0.0))?.powi(2);
    if var < 0.0 {
        return Err(Error::NegativeVariance { t, increment: var });
    }
    let eps = var.sqrt();
    let s = score.score(x, t);
    Ok(x.iter()
        .zip(&s)
        .zip(z)
        .map(|((x, s), z)| x + var * s + eps * z)
        .collect())
}

/// VP step: `(x + b s(x, t)) / sqrt(1 - b) + sqrt(b) z` with `b = beta(t) dt`.
pub fn reverse_step_vp(
    vp: &VpSchedule,
    score: &dyn ScoreModel,
    x: &[f64],
    t: f64,
    dt: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let b = vp.beta(t)? * dt;
    if b >= 1.0 {
        return Err(Error::Resolution(format!("beta({t}) * dt = {b} >= 1")));
    }
    let inv = 1.0 / (1.0 - b).sqrt();
    let noise = b.sqrt();
    let s = score.score(x, t);
    Ok(x.iter()
        .zip(&s)
        .zip(z)
        .map(|((x, s), z)| inv * (x + b * s) + noise * z)
        .collect())
}

/// Per-step coefficients for one grid, shared across repeats.
enum StepTable {
    /// `sigma[n] = sigma(t_n)`, `n = 0..=N`, with `sigma[0] = 0`.
    Ve { sigma: Vec<f64> },
    /// `beta_dt[n] = beta(t_n) dt`; `alpha[n] = prod_{i<=n} (1 - beta_dt[i])`.
    Vp { beta_dt: Vec<f64>, alpha: Vec<f64> },
}

impl StepTable {
    fn new(schedule: &NoiseSchedule, grid: &TimeGrid) -> Result<Self> {
        let n = grid.n_steps;
        match schedule {
            NoiseSchedule::Ve(ve) => {
                let sigma: Vec<f64> = (0..=n)
                    .map(|i| if i == 0 { Ok(0.0) } else { ve.sigma(grid.time(i)) })
                    .collect::<Result<_>>()?;
                if let Some(i) = (1..=n).find(|&i| sigma[i] < sigma[i - 1]) {
                    return Err(Error::NegativeVariance {
                        t: grid.time(i),
                        increment: sigma[i].powi(2) - sigma[i - 1].powi(2),
                    });
                }
                Ok(StepTable::Ve { sigma })
            }
            NoiseSchedule::Vp(vp) => {
                let alpha = vp.discrete_alpha_prefix(grid.t0, n)?;
                let beta_dt = (0..=n)
                    .map(|i| if i == 0 { 0.0 } else { vp.beta_unchecked(grid.time(i)) * grid.delta_t })
                    .collect();
                Ok(StepTable::Vp { beta_dt, alpha })
            }
        }
    }

    fn start(&self, n: usize) -> Marginal {
        match self {
            StepTable::Ve { sigma } => Marginal { mean_scale: 1.0, std: sigma[n] },
            StepTable::Vp { alpha, .. } => Marginal {
                mean_scale: alpha[n].sqrt(),
                std: (1.0 - alpha[n]).sqrt(),
            },
        }
    }
}

/// Reusable sampler over one score model and schedule.
pub struct Sampler<'a> {
    score: &'a dyn ScoreModel,
    schedule: NoiseSchedule,
    classifier: Option<&'a dyn ClassifierGradient>,
    control: RunControl,
}

impl<'a> Sampler<'a> {
    pub fn new(score: &'a dyn ScoreModel, schedule: NoiseSchedule) -> Self {
        Self { score, schedule, classifier: None, control: RunControl::default() }
    }

    pub fn with_classifier(mut self, classifier: &'a dyn ClassifierGradient) -> Self {
        self.classifier = Some(classifier);
        self
    }

    pub fn with_control(mut self, control: RunControl) -> Self {
        self.control = control;
        self
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Runs with the stream derived from `config.seed`.
    pub fn run(&self, guide: &Guide, mask: Option<&EditMask>, config: &SdeditConfig) -> Result<SampleResult> {
        self.run_with_stream(guide, mask, config, &NoiseStream::new(config.seed))
    }

    pub fn run_with_stream(
        &self,
        guide: &Guide,
        mask: Option<&EditMask>,
        config: &SdeditConfig,
        stream: &NoiseStream,
    ) -> Result<SampleResult> {
        config.validate()?;
        let d = guide.len();
        if self.score.dim() != d {
            return Err(Error::shape(format!("score dim {}", self.score.dim()), format!("guide dim {d}")));
        }
        if let Some(m) = mask {
            if m.omega().len() != d || m.shape() != guide.shape() {
                return Err(Error::shape(guide.shape(), m.shape()));
            }
        }
        let classifier = match (config.guidance, self.classifier) {
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::InvalidParameter("guidance requested without a classifier".into()))
            }
            (Some(g), Some(c)) => {
                if g.label >= c.num_classes() {
                    return Err(Error::InvalidParameter(format!(
                        "label {} out of range for {} classes",
                        g.label,
                        c.num_classes()
                    )));
                }
                Some((c, g))
            }
        };

        let mut result = SampleResult {
            output: guide.data().to_vec(),
            shape: guide.shape(),
            seed: stream.seed,
            stream: stream.stream,
            steps: 0,
            perturbed: guide.data().to_vec(),
            max_score_norm_sq: 0.0,
            snapshots: Vec::new(),
        };
        if config.t0 == 0.0 {
            return Ok(result);
        }

        let grid = TimeGrid::new(config.t0, config.n_steps)?;
        let table = StepTable::new(&self.schedule, &grid)?;
        let guide0 = guide.data();
        let omega = mask.map(EditMask::omega);
        let start = table.start(grid.n_steps);

        let mut x = guide0.to_vec();
        let mut z = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut g = vec![0.0; d];
        for k in 0..config.repeats {
            stream.fill_normal(k as u64, 0, &mut z);
            for i in 0..d {
                let base = match omega {
                    Some(om) if !om[i] => guide0[i],
                    _ => x[i],
                };
                x[i] = start.mean_scale * base + start.std * z[i];
            }
            result.perturbed.copy_from_slice(&x);

            for (n, t) in grid.steps() {
                if let Some(deadline) = self.control.deadline {
                    if Instant::now() > deadline {
                        return Err(Error::DeadlineExceeded { steps: result.steps });
                    }
                }
                stream.fill_normal(k as u64, n as u64, &mut z);
                self.score.score_into(&x, t, &mut s);
                let norm_sq: f64 = s.iter().map(|v| v * v).sum();
                if norm_sq > result.max_score_norm_sq || norm_sq.is_nan() {
                    result.max_score_norm_sq = norm_sq;
                }
                if let Some((c, guidance)) = classifier {
                    c.grad_log_posterior_into(&x, t, guidance.label, &mut g);
                    g.iter_mut().for_each(|v| *v *= guidance.scale);
                }
                let guided = classifier.is_some();
                match &table {
                    StepTable::Ve { sigma } => {
                        let var = sigma[n] * sigma[n] - sigma[n - 1] * sigma[n - 1];
                        let eps = var.sqrt();
                        for i in 0..d {
                            match omega {
                                Some(om) if !om[i] => x[i] = guide0[i] + sigma[n] * z[i],
                                _ => {
                                    let drift = if guided { s[i] + g[i] } else { s[i] };
                                    x[i] += var * drift + eps * z[i];
                                }
                            }
                        }
                    }
                    StepTable::Vp { beta_dt, alpha } => {
                        let b = beta_dt[n];
                        let inv = 1.0 / (1.0 - b).sqrt();
                        let noise = b.sqrt();
                        let (keep, fresh) = (alpha[n].sqrt(), (1.0 - alpha[n]).sqrt());
                        for i in 0..d {
                            match omega {
                                Some(om) if !om[i] => x[i] = keep * guide0[i] + fresh * z[i],
                                _ => {
                                    let mut v = inv * (x[i] + b * s[i]) + noise * z[i];
                                    if guided {
                                        v += b * g[i];
                                    }
                                    x[i] = v;
                                }
                            }
                        }
                    }
                }
                result.steps += 1;
                if let Some(stride) = config.snapshot_stride {
                    if (grid.n_steps - n) % stride == 0 || n == 1 {
                        result.snapshots.push(Snapshot { repeat: k, step: n, t, state: x.clone() });
                    }
                }
            }
        }
        if config.hard_restore {
            if let Some(om) = omega {
                for i in 0..d {
                    if !om[i] {
                        x[i] = guide0[i];
                    }
                }
            }
        }
        result.output = x;
        Ok(result)
    }

    /// Unconditional sampling: start from the prior at `t = 1`
    /// (`N(0, sigma_max^2 I)` for VE, `N(0, I)` for VP) and integrate down.
    pub fn sample_prior(&self, n_steps: usize, stream: &NoiseStream) -> Result<Vec<f64>> {
        let d = self.score.dim();
        let prior_std = match self.schedule {
            NoiseSchedule::Ve(ve) => ve.sigma_max,
            NoiseSchedule::Vp(_) => 1.0,
        };
        let mut x = stream.normal_vec(0, 0, d);
        x.iter_mut().for_each(|v| *v *= prior_std);
        let grid = TimeGrid::new(1.0, n_steps)?;
        let mut z = vec![0.0; d];
        for (n, t) in grid.steps() {
            stream.fill_normal(0, n as u64, &mut z);
            x = match &self.schedule {
                NoiseSchedule::Ve(ve) => reverse_step_ve(ve, self.score, &x, t, grid.delta_t, &z)?,
                NoiseSchedule::Vp(vp) => reverse_step_vp(vp, self.score, &x, t, grid.delta_t, &z)?,
            };
        }
        Ok(x)
    }
}

/// Guided synthesis without a mask.
pub fn sdedit(
    guide: &Guide,
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SdeditConfig,
) -> Result<SampleResult> {
    Sampler::new(score, *schedule).run(guide, None, config)
}

/// Guided editing restricted to the coordinates where the mask is set.
pub fn sdedit_masked(
    guide: &Guide,
    mask: &EditMask,
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SdeditConfig,
) -> Result<SampleResult> {
    Sampler::new(score, *schedule).run(guide, Some(mask), config)
}

/// Classifier-guided synthesis; `config.guidance` selects the label.
pub fn sdedit_class_conditional(
    guide: &Guide,
    score: &dyn ScoreModel,
    classifier: &dyn ClassifierGradient,
    schedule: &NoiseSchedule,
    config: &SdeditConfig,
) -> Result<SampleResult> {
    if config.guidance.is_none() {
        return Err(Error::InvalidParameter("class-conditional sampling needs a label".into()));
    }
    Sampler::new(score, *schedule)
        .with_classifier(classifier)
        .run(guide, None, config)
}
