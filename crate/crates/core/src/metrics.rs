//! Faithfulness (L2 to the guide), realism (polynomial-kernel MMD, a
//! feature-free stand-in for KID), the `t0` trade-off sweep, and an
//! empirical check of the high-probability bound on `||guide - output||^2`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::sampler::{Guide, Sampler, SdeditConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::score::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessScore {
    pub l2: f64,
    pub l2_squared: f64,
}

pub fn faithfulness(guide: &[f64], output: &[f64]) -> Result<FaithfulnessScore> {
    if guide.len() != output.len() {
        return Err(Error::shape(format!("[{}]", guide.len()), format!("[{}]", output.len())));
    }
    let l2_squared: f64 = guide.iter().zip(output).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(FaithfulnessScore { l2: l2_squared.sqrt(), l2_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolynomialKernel {
    pub degree: i32,
    pub offset: f64,
}

impl Default for PolynomialKernel {
    /// `k(x, y) = (x.y / d + 1)^3`.
    fn default() -> Self {
        Self { degree: 3, offset: 1.0 }
    }
}

impl PolynomialKernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (dot / x.len() as f64 + self.offset).powi(self.degree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdScore {
    pub value: f64,
    pub kernel: PolynomialKernel,
    pub n_a: usize,
    pub n_b: usize,
}

fn within_sum(kernel: &PolynomialKernel, s: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        for j in (i + 1)..s.len() {
            total += kernel.eval(&s[i], &s[j]);
        }
    }
    2.0 * total
}

fn canonical_first(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    let key = |s: &[Vec<f64>]| -> (usize, Vec<u64>) {
        (s.len(), s.iter().flatten().map(|v| v.to_bits()).collect())
    };
    key(a) <= key(b)
}

/// Unbiased MMD^2 with the cubic polynomial kernel on raw coordinates.
///
/// Equal sample sizes use the paired U-statistic, which skips the `(i, i)`
/// cross pairs so identical ordered sets score exactly zero; otherwise the
/// cross term averages over all pairs. Exactly symmetric in its arguments.
pub fn mmd_kid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdScore> {
    mmd_with_kernel(a, b, PolynomialKernel::default())
}

pub fn mmd_with_kernel(a: &[Vec<f64>], b: &[Vec<f64>], kernel: PolynomialKernel) -> Result<MmdScore> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "MMD needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::shape(format!("vectors of dim {d}"), "mixed dimensions"));
    }
    let (m, n) = (a.len() as f64, b.len() as f64);
    let term_a = within_sum(&kernel, a) / (m * (m - 1.0));
    let term_b = within_sum(&kernel, b) / (n * (n - 1.0));
    let (x, y) = if canonical_first(a, b) { (a, b) } else { (b, a) };
    let cross = if a.len() == b.len() {
        let mut total = 0.0;
        for i in 0..x.len() {
            for j in 0..y.len() {
                if i != j {
                    total += kernel.eval(&x[i], &y[j]);
                }
            }
        }
        total / (m * (m - 1.0))
    } else {
        let mut total = 0.0;
        for xi in x {
            for yj in y {
                total += kernel.eval(xi, yj);
            }
        }
        total / (m * n)
    };
    Ok(MmdScore {
        value: term_a + term_b - 2.0 * cross,
        kernel,
        n_a: a.len(),
        n_b: b.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub t0: f64,
    pub l2sq_mean: f64,
    pub l2sq_stderr: f64,
    pub mmd_mean: f64,
    pub mmd_stderr: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub t0_grid: Vec<f64>,
    pub runs_per_point: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Disjoint output folds used for the MMD standard error.
    pub mmd_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub schedule: ScheduleConfig,
    pub config: SweepConfig,
    pub n_guides: usize,
    pub n_reference: usize,
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t0,l2sq_mean,l2sq_stderr,mmd_mean,mmd_stderr\n");
        for p in &self.points {
            out.push_str(&format!(
                "{:?},{:?},{:?},{:?},{:?}\n",
                p.t0, p.l2sq_mean, p.l2sq_stderr, p.mmd_mean, p.mmd_stderr
            ));
        }
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: Option<&Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        std::fs::write(json_path, self.to_json()?).map_err(|e| Error::io(json_path, e))?;
        if let Some(csv) = csv_path {
            std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        }
        Ok(())
    }

    /// Number of adjacent pairs where the mean squared L2 decreases.
    pub fn l2_inversions(&self) -> usize {
        self.points.windows(2).filter(|w| w[1].l2sq_mean < w[0].l2sq_mean).count()
    }

    /// Number of adjacent pairs where the MMD increases.
    pub fn mmd_inversions(&self) -> usize {
        self.points.windows(2).filter(|w| w[1].mmd_mean > w[0].mmd_mean).count()
    }
}

fn mean_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs guided synthesis over a grid of `t0` values and records mean squared
/// L2 to the guides and MMD of the outputs against `reference`.
///
/// Run `r` uses guide `r mod len` and the same noise stream at every grid
/// point, so neighbouring points differ only through `t0`.
pub fn tradeoff_sweep(
    guides: &[Guide],
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    reference: &[Vec<f64>],
    config: &SweepConfig,
) -> Result<TradeoffReport> {
    if config.t0_grid.is_empty() {
        return Err(Error::InvalidParameter("t0 grid must be nonempty".into()));
    }
    if config.t0_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter("t0 grid must be strictly increasing".into()));
    }
    if guides.is_empty() || config.runs_per_point == 0 {
        return Err(Error::InvalidParameter("need at least one guide and one run".into()));
    }
    let folds = config.mmd_folds.clamp(1, (config.runs_per_point / 2).max(1));
    let sampler = Sampler::new(score, *schedule);
    let root = NoiseStream::new(config.seed);
    let mut points = Vec::with_capacity(config.t0_grid.len());
    for &t0 in &config.t0_grid {
        let sdedit = SdeditConfig::new(t0, config.n_steps);
        let outputs: Vec<(f64, Vec<f64>)> = (0..config.runs_per_point)
            .into_par_iter()
            .map(|r| {
                let guide = &guides[r % guides.len()];
                let res = sampler.run_with_stream(guide, None, &sdedit, &root.substream(r as u64))?;
                let f = faithfulness(guide.data(), &res.output)?;
                Ok((f.l2_squared, res.output))
            })
            .collect::<Result<_>>()?;
        let l2: Vec<f64> = outputs.iter().map(|(l, _)| *l).collect();
        let samples: Vec<Vec<f64>> = outputs.into_iter().map(|(_, x)| x).collect();
        let (l2sq_mean, l2sq_stderr) = mean_stderr(&l2);
        let (mmd_mean, mmd_stderr) = if samples.len() >= 2 && reference.len() >= 2 {
            let full = mmd_kid(&samples, reference)?.value;
            let per_fold: Vec<f64> = if folds >= 2 {
                let size = samples.len() / folds;
                (0..folds)
                    .map(|f| mmd_kid(&samples[f * size..(f + 1) * size], reference).map(|m| m.value))
                    .collect::<Result<_>>()?
            } else {
                vec![full]
            };
            (full, mean_stderr(&per_fold).1 / (folds as f64).sqrt().max(1.0))
        } else {
            (f64::NAN, f64::NAN)
        };
        points.push(TradeoffPoint {
            t0,
            l2sq_mean,
            l2sq_stderr,
            mmd_mean,
            mmd_stderr,
            n_runs: config.runs_per_point,
        });
    }
    Ok(TradeoffReport {
        schedule: (*schedule).into(),
        config: config.clone(),
        n_guides: guides.len(),
        n_reference: reference.len(),
        points,
    })
}

/// `sigma^2 (C sigma^2 + d + 2 sqrt(-d ln delta) - 2 ln delta)`.
pub fn prop1_bound(c: f64, d: usize, delta: f64, sigma_t0: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain { name: "delta", value: delta, domain: "(0, 1)" });
    }
    if !(c >= 0.0) || !(sigma_t0 >= 0.0) || d == 0 {
        return Err(Error::InvalidParameter(format!(
            "bound needs C >= 0, sigma >= 0, d >= 1; got C = {c}, sigma = {sigma_t0}, d = {d}"
        )));
    }
    let s2 = sigma_t0 * sigma_t0;
    let ln = delta.ln();
    let d = d as f64;
    Ok(s2 * (c * s2 + d + 2.0 * (-d * ln).sqrt() - 2.0 * ln))
}

/// Which starting point the output distance is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundReference {
    /// The perturbed guide `x(t0)`; the diffusion part of `output - x(t0)` has
    /// variance exactly `sigma^2(t0)` per coordinate.
    #[default]
    Perturbed,
    /// The clean guide; this adds the initial perturbation, doubling the variance.
    Guide,
}

/// Squared distances of many independent runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSamples {
    pub to_perturbed: Vec<f64>,
    pub to_guide: Vec<f64>,
    pub max_score_norm_sq: f64,
    pub sigma_t0: f64,
}

pub fn bound_samples(
    guide: &Guide,
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SdeditConfig,
    n_runs: usize,
) -> Result<BoundSamples> {
    let NoiseSchedule::Ve(ve) = schedule else {
        return Err(Error::InvalidParameter("the bound is stated for the VE schedule".into()));
    };
    if config.repeats != 1 {
        return Err(Error::InvalidParameter("the bound covers a single pass (repeats = 1)".into()));
    }
    let sigma_t0 = ve.sigma(config.t0)?;
    let sampler = Sampler::new(score, *schedule);
    let root = NoiseStream::new(config.seed);
    let runs: Vec<(f64, f64, f64)> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let res = sampler.run_with_stream(guide, None, config, &root.substream(r as u64))?;
            let p = faithfulness(&res.perturbed, &res.output)?.l2_squared;
            let g = faithfulness(guide.data(), &res.output)?.l2_squared;
            Ok((p, g, res.max_score_norm_sq))
        })
        .collect::<Result<_>>()?;
    Ok(BoundSamples {
        to_perturbed: runs.iter().map(|r| r.0).collect(),
        to_guide: runs.iter().map(|r| r.1).collect(),
        max_score_norm_sq: runs.iter().map(|r| r.2).fold(0.0, f64::max),
        sigma_t0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub c: f64,
    pub c_measured: bool,
    pub d: usize,
    pub delta: f64,
    pub sigma_t0: f64,
    pub bound: f64,
    pub n_runs: usize,
    pub violations: usize,
    pub violation_fraction: f64,
    pub reference: BoundReference,
}

/// Fraction of runs whose squared distance exceeds the bound. When `c` is
/// `None` it is measured as the largest squared score norm seen in any step.
#[allow(clippy::too_many_arguments)]
pub fn check_prop1(
    guide: &Guide,
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SdeditConfig,
    c: Option<f64>,
    delta: f64,
    n_runs: usize,
    reference: BoundReference,
) -> Result<BoundCheckReport> {
    if n_runs == 0 {
        return Err(Error::InvalidParameter("n_runs must be >= 1".into()));
    }
    let samples = bound_samples(guide, score, schedule, config, n_runs)?;
    summarize_bound(&samples, guide.len(), c, delta, reference)
}

pub fn summarize_bound(
    samples: &BoundSamples,
    d: usize,
    c: Option<f64>,
    delta: f64,
    reference: BoundReference,
) -> Result<BoundCheckReport> {
    let c_value = c.unwrap_or(samples.max_score_norm_sq);
    let bound = prop1_bound(c_value, d, delta, samples.sigma_t0)?;
    let dist = match reference {
        BoundReference::Perturbed => &samples.to_perturbed,
        BoundReference::Guide => &samples.to_guide,
    };
    let violations = dist.iter().filter(|&&v| v > bound).count();
    Ok(BoundCheckReport {
        c: c_value,
        c_measured: c.is_none(),
        d,
        delta,
        sigma_t0: samples.sigma_t0,
        bound,
        n_runs: dist.len(),
        violations,
        violation_fraction: violations as f64 / dist.len() as f64,
        reference,
    })
}
