//! A small fully connected score network with hand-written backpropagation.
//!
//! The network predicts the noise `eps` that produced `x(t)`; the score is
//! `-eps / std(t)`. Inputs are `x * c_in(t)` with `c_in = 1 / sqrt(m^2 + std^2)`
//! followed by the time embedding `[t, sin(2^j pi t), cos(2^j pi t)]`.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const WEIGHTS_MAGIC: &str = "SDEDIT-MLP";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Silu => a / (1.0 + (-a).exp()),
            Activation::Tanh => a.tanh(),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 + a * (1.0 - s))
            }
            Activation::Tanh => {
                let th = a.tanh();
                1.0 - th * th
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    /// Number of sin/cos pairs at frequencies `2^j * pi`, `j = 0..pairs`.
    pub pairs: usize,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self { pairs: 4 }
    }
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        1 + 2 * self.pairs
    }

    pub fn write(&self, t: f64, out: &mut [f64]) {
        out[0] = t;
        let mut freq = std::f64::consts::PI;
        for j in 0..self.pairs {
            out[1 + 2 * j] = (freq * t).sin();
            out[2 + 2 * j] = (freq * t).cos();
            freq *= 2.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreNet {
    data_dim: usize,
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    embedding: TimeEmbedding,
    activation: Activation,
}

/// Gradient with the same layout as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(net: &MlpScoreNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .flat_map(|v| v.iter_mut())
            .for_each(|x| *x *= s);
    }

    /// Parameters in the same order as [`MlpScoreNet::params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Activations recorded by a forward pass for backpropagation.
pub(crate) struct ForwardCache {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &[f64] {
        self.inputs.last().expect("nonempty")
    }
}

impl MlpScoreNet {
    /// LeCun-normal initialization; the output layer starts near zero.
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        embedding: TimeEmbedding,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter("layer sizes must be >= 1".into()));
        }
        let mut sizes = vec![data_dim + embedding.width()];
        sizes.extend_from_slice(hidden);
        sizes.push(data_dim);
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == layers { 0.1 } else { 1.0 };
            let scale = gain / (fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            data_dim,
            sizes,
            weights,
            biases,
            embedding,
            activation,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn embedding(&self) -> TimeEmbedding {
        self.embedding
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flattened parameters, layer by layer: weights (row-major `out x in`) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::shape(self.param_count(), params.len()));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&params[at..at + nw]);
            at += nw;
            b.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Network input for state `x` at time `t`.
    pub fn features(&self, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Vec<f64> {
        let m = schedule.marginal_unchecked(t.clamp(0.0, 1.0));
        let c_in = 1.0 / (m.mean_scale * m.mean_scale + m.std * m.std).sqrt();
        let mut input = Vec::with_capacity(self.sizes[0]);
        input.extend(x.iter().map(|v| v * c_in));
        input.resize(self.sizes[0], 0.0);
        self.embedding.write(t, &mut input[self.data_dim..]);
        input
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        let layers = self.weights.len();
        for l in 0..layers {
            let mut a = self.affine(l, &h);
            if l + 1 < layers {
                a.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = a;
        }
        h
    }

    pub(crate) fn forward_cached(&self, input: &[f64]) -> ForwardCache {
        let layers = self.weights.len();
        let mut inputs = Vec::with_capacity(layers + 1);
        let mut pre = Vec::with_capacity(layers.saturating_sub(1));
        inputs.push(input.to_vec());
        for l in 0..layers {
            let a = self.affine(l, &inputs[l]);
            if l + 1 < layers {
                let h = a.iter().map(|v| self.activation.apply(*v)).collect();
                pre.push(a);
                inputs.push(h);
            } else {
                inputs.push(a);
            }
        }
        ForwardCache { inputs, pre }
    }

    /// Accumulates `d(loss)/d(params)` into `grads` given `d(loss)/d(output)`.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut MlpGradients) {
        let layers = self.weights.len();
        let mut delta = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.inputs[l];
            let gw = &mut grads.weights[l];
            for o in 0..fan_out {
                let d = delta[o];
                grads.biases[l][o] += d;
                let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
            }
            for (p, a) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                *p *= self.activation.derivative(*a);
            }
            delta = prev;
        }
    }

    fn affine(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = &self.weights[l];
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                self.biases[l][o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// `params -= lr * update`, layout as in [`MlpGradients`].
    pub(crate) fn apply_update(&mut self, update: &MlpGradients, lr: f64) {
        for (w, g) in self.weights.iter_mut().zip(&update.weights) {
            w.iter_mut().zip(g).for_each(|(p, d)| *p -= lr * d);
        }
        for (b, g) in self.biases.iter_mut().zip(&update.biases) {
            b.iter_mut().zip(g).for_each(|(p, d)| *p -= lr * d);
        }
    }
}

/// A trained network paired with the schedule it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedScore {
    pub net: MlpScoreNet,
    pub schedule: NoiseSchedule,
}

impl LearnedScore {
    pub fn new(net: MlpScoreNet, schedule: NoiseSchedule) -> Self {
        Self { net, schedule }
    }

    pub fn predict_noise(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.net.forward(&self.net.features(&self.schedule, x, t))
    }
}

impl ScoreModel for LearnedScore {
    fn dim(&self) -> usize {
        self.net.data_dim
    }

    fn score_into(&self, x: &[f64], t: f64, out: &mut [f64]) {
        let std = self
            .schedule
            .marginal_unchecked(t.clamp(0.0, 1.0))
            .std
            .max(1e-12);
        let eps = self.predict_noise(x, t);
        for (o, e) in out.iter_mut().zip(eps) {
            *o = -e / std;
        }
    }
}

/// Text header of a serialized weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsHeader {
    pub version: u32,
    pub data_dim: usize,
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
    pub schedule_preset: String,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl LearnedScore {
    /// Writes the versioned text header followed by little-endian `f64` parameters.
    pub fn write_weights<W: Write>(&self, out: &mut W, schedule_preset: &str, seed: u64) -> Result<()> {
        let io = |e| Error::io("<weights>", e);
        let sizes: Vec<String> = self.net.sizes.iter().map(ToString::to_string).collect();
        writeln!(out, "{WEIGHTS_MAGIC} {WEIGHTS_VERSION}").map_err(io)?;
        writeln!(out, "data_dim {}", self.net.data_dim).map_err(io)?;
        writeln!(out, "layers {}", sizes.join(" ")).map_err(io)?;
        writeln!(out, "activation {}", self.net.activation.name()).map_err(io)?;
        writeln!(out, "embedding_pairs {}", self.net.embedding.pairs).map_err(io)?;
        writeln!(out, "schedule_preset {schedule_preset}").map_err(io)?;
        writeln!(out, "schedule {}", serde_json::to_string(&self.schedule)?).map_err(io)?;
        writeln!(out, "seed {seed}").map_err(io)?;
        writeln!(out, "params {}", self.net.param_count()).map_err(io)?;
        writeln!(out, "end").map_err(io)?;
        for p in self.net.params() {
            out.write_all(&p.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_weights<R: BufRead>(input: &mut R) -> Result<(Self, WeightsHeader)> {
        let io = |e| Error::io("<weights>", e);
        let bad = |msg: String| Error::Format(format!("weights header: {msg}"));
        let mut fields = std::collections::HashMap::new();
        let mut version = None;
        loop {
            let mut line = String::new();
            if input.read_line(&mut line).map_err(io)? == 0 {
                return Err(bad("missing `end`".into()));
            }
            let line = line.trim_end_matches(['\n', '\r']);
            if line == "end" {
                break;
            }
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            if key == WEIGHTS_MAGIC {
                version = Some(value.parse::<u32>().map_err(|e| bad(e.to_string()))?);
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }
        let version = version.ok_or_else(|| bad("missing magic line".into()))?;
        if version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing `{k}`")));
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|e: std::num::ParseIntError| bad(format!("{k}: {e}")))
        };
        let data_dim = parse_usize("data_dim")?;
        let sizes = get("layers")?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| bad(format!("layers: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let activation = match get("activation")?.as_str() {
            "silu" => Activation::Silu,
            "tanh" => Activation::Tanh,
            other => return Err(bad(format!("unknown activation `{other}`"))),
        };
        let embedding = TimeEmbedding {
            pairs: parse_usize("embedding_pairs")?,
        };
        let schedule: NoiseSchedule = serde_json::from_str(get("schedule")?)?;
        let seed = get("seed")?
            .parse::<u64>()
            .map_err(|e| bad(format!("seed: {e}")))?;
        let count = parse_usize("params")?;
        if sizes.len() < 2
            || sizes[0] != data_dim + embedding.width()
            || *sizes.last().unwrap() != data_dim
        {
            return Err(bad(format!("layer sizes {sizes:?} inconsistent with data_dim {data_dim}")));
        }
        let layers = sizes.len() - 1;
        let mut net = MlpScoreNet {
            data_dim,
            weights: (0..layers).map(|l| vec![0.0; sizes[l] * sizes[l + 1]]).collect(),
            biases: (0..layers).map(|l| vec![0.0; sizes[l + 1]]).collect(),
            sizes: sizes.clone(),
            embedding,
            activation,
        };
        if count != net.param_count() {
            return Err(bad(format!("params {count} != {}", net.param_count())));
        }
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes).map_err(io)?;
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        net.set_params(&params)?;
        let header = WeightsHeader {
            version,
            data_dim,
            sizes,
            activation,
            embedding,
            schedule_preset: get("schedule_preset")?.clone(),
            schedule,
            seed,
        };
        Ok((LearnedScore::new(net, schedule), header))
    }

    pub fn save(&self, path: impl AsRef<Path>, schedule_preset: &str, seed: u64) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_weights(&mut w, schedule_preset, seed)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, WeightsHeader)> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_weights(&mut std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{VpSchedule, NoiseSchedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> MlpScoreNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MlpScoreNet::new(2, &[8, 8], TimeEmbedding::default(), Activation::Silu, &mut rng).unwrap()
    }

    #[test]
    fn layout() {
        let n = net(0);
        assert_eq!(n.sizes(), &[11, 8, 8, 2]);
        assert_eq!(n.param_count(), 11 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
        let mut m = n.clone();
        let p: Vec<f64> = (0..n.param_count()).map(|i| i as f64 * 1e-3).collect();
        m.set_params(&p).unwrap();
        assert_eq!(m.params(), p);
        assert!(m.set_params(&p[1..]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        for activation in [Activation::Silu, Activation::Tanh] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut n =
                MlpScoreNet::new(2, &[8, 8], TimeEmbedding::default(), activation, &mut rng).unwrap();
            // Nonzero biases exercise every term.
            let p: Vec<f64> = n.params().iter().enumerate().map(|(i, v)| v + 0.01 * (i % 7) as f64).collect();
            n.set_params(&p).unwrap();
            let input: Vec<f64> = (0..11).map(|i| (i as f64 * 0.37).sin()).collect();
            let target = [0.3, -0.8];
            let loss = |net: &MlpScoreNet| -> f64 {
                let out = net.forward(&input);
                out.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum()
            };
            let cache = n.forward_cached(&input);
            let grad_out: Vec<f64> = cache.output().iter().zip(target).map(|(o, t)| 2.0 * (o - t)).collect();
            let mut g = MlpGradients::zeros_like(&n);
            n.backward(&cache, &grad_out, &mut g);
            let analytic = g.flatten();
            let h = 1e-6;
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus[i] += h;
                let mut minus = p.clone();
                minus[i] -= h;
                let mut np = n.clone();
                np.set_params(&plus).unwrap();
                let mut nm = n.clone();
                nm.set_params(&minus).unwrap();
                let fd = (loss(&np) - loss(&nm)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
                assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", analytic[i]);
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let schedule = NoiseSchedule::Vp(VpSchedule::new(0.1, 20.0).unwrap());
        let score = LearnedScore::new(net(9), schedule);
        let mut buf = Vec::new();
        score.write_weights(&mut buf, "vp-default", 9).unwrap();
        let text_end = buf.windows(4).position(|w| w == b"end\n").unwrap();
        let header = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert!(header.starts_with("SDEDIT-MLP 1\n"));
        assert!(header.contains("layers 11 8 8 2"));
        let (back, h) = LearnedScore::read_weights(&mut &buf[..]).unwrap();
        assert_eq!(back, score);
        assert_eq!(h.schedule_preset, "vp-default");
        assert_eq!(h.seed, 9);
        assert_eq!(back.score(&[0.1, 0.2], 0.5), score.score(&[0.1, 0.2], 0.5));
    }

    #[test]
    fn corrupt_weights_rejected() {
        let schedule = NoiseSchedule::Vp(VpSchedule::new(0.1, 20.0).unwrap());
        let score = LearnedScore::new(net(1), schedule);
        let mut buf = Vec::new();
        score.write_weights(&mut buf, "vp-default", 1).unwrap();
        let truncated = &buf[..buf.len() - 8];
        assert!(LearnedScore::read_weights(&mut &truncated[..]).is_err());
        let text = String::from_utf8_lossy(&buf).replace("SDEDIT-MLP 1", "SDEDIT-MLP 9");
        assert!(LearnedScore::read_weights(&mut text.as_bytes()).is_err());
    }
}
