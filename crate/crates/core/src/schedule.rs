//! Variance-exploding and variance-preserving noise schedules, and the
//! uniform descending time grid shared by every sampler.
//!
//! VE: `sigma(t) = sigma_min * (sigma_max / sigma_min)^t` for `t > 0` and
//! exactly `0` at `t = 0`; the signal is never rescaled.
//!
//! VP: `beta(t) = beta_min + t * (beta_max - beta_min)`. Samplers use the
//! discrete retention `alpha(t0) = prod_{n=1..N} (1 - beta(n t0 / N) dt)`,
//! while the analytic marginals use the continuous `exp(-int_0^t beta)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_unit_interval(name: &'static str, t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value: t,
            domain: "[0, 1]",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VeSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl VeSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_min must be positive, got {sigma_min}"
            )));
        }
        if !(sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma_max must exceed sigma_min, got {sigma_max} <= {sigma_min}"
            )));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
        })
    }

    /// Noise standard deviation at time `t`, evaluated in log space.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok(self.sigma_unchecked(t))
    }

    pub(crate) fn sigma_unchecked(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t == 1.0 {
            self.sigma_max
        } else {
            let log_min = self.sigma_min.ln();
            (log_min + t * (self.sigma_max.ln() - log_min)).exp()
        }
    }

    /// Inverse of `sigma` on `(0, 1]`: the time at which the noise level equals `sigma`.
    pub fn time_for_sigma(&self, sigma: f64) -> Result<f64> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(Error::Domain {
                name: "sigma",
                value: sigma,
                domain: "[sigma_min, sigma_max]",
            });
        }
        Ok((sigma / self.sigma_min).ln() / (self.sigma_max / self.sigma_min).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VpSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl VpSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > 0.0 && beta_min.is_finite() && beta_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta bounds must be positive, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok(self.beta_unchecked(t))
    }

    pub(crate) fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min)
    }

    /// Continuous-time signal retention `exp(-int_0^t beta)`.
    pub fn continuous_alpha(&self, t: f64) -> f64 {
        (-self.integrated_beta(t)).exp()
    }

    /// Discrete signal retention on the `n_steps` grid ending at `t0`.
    pub fn discrete_alpha(&self, t0: f64, n_steps: usize) -> Result<f64> {
        Ok(*self.discrete_alpha_prefix(t0, n_steps)?.last().expect("n_steps >= 1"))
    }

    /// Running products: entry `n` is `prod_{i=1..n} (1 - beta(i t0 / N) dt)`, entry 0 is 1.
    pub fn discrete_alpha_prefix(&self, t0: f64, n_steps: usize) -> Result<Vec<f64>> {
        check_unit_interval("t0", t0)?;
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        let dt = t0 / n_steps as f64;
        let mut prefix = Vec::with_capacity(n_steps + 1);
        let mut acc = 1.0;
        prefix.push(acc);
        for n in 1..=n_steps {
            let t = t0 * n as f64 / n_steps as f64;
            let factor = 1.0 - self.beta_unchecked(t) * dt;
            if factor <= 0.0 {
                return Err(Error::Resolution(format!(
                    "1 - beta({t}) * {dt} = {factor} <= 0; increase n_steps"
                )));
            }
            acc *= factor;
            prefix.push(acc);
        }
        Ok(prefix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Ve,
    Vp,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Ve => f.write_str("ve"),
            Variant::Vp => f.write_str("vp"),
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Ok(Variant::Ve),
            "vp" => Ok(Variant::Vp),
            other => Err(Error::InvalidParameter(format!("unknown variant `{other}`"))),
        }
    }
}

/// Perturbation kernel `x(t) = mean_scale * x(0) + std * z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Marginal {
    pub mean_scale: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum NoiseSchedule {
    Ve(VeSchedule),
    Vp(VpSchedule),
}

impl NoiseSchedule {
    pub fn variant(&self) -> Variant {
        match self {
            NoiseSchedule::Ve(_) => Variant::Ve,
            NoiseSchedule::Vp(_) => Variant::Vp,
        }
    }

    /// Continuous-time marginal of the forward SDE started at `x(0)`.
    pub fn marginal(&self, t: f64) -> Result<Marginal> {
        check_unit_interval("t", t)?;
        Ok(self.marginal_unchecked(t))
    }

    pub(crate) fn marginal_unchecked(&self, t: f64) -> Marginal {
        match self {
            NoiseSchedule::Ve(ve) => Marginal {
                mean_scale: 1.0,
                std: ve.sigma_unchecked(t),
            },
            NoiseSchedule::Vp(vp) => {
                let alpha = vp.continuous_alpha(t);
                Marginal {
                    mean_scale: alpha.sqrt(),
                    std: (1.0 - alpha).max(0.0).sqrt(),
                }
            }
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        preset(name).ok_or_else(|| Error::UnknownPreset(name.to_string()))
    }

    /// Parses a key-value schedule config, either `preset = "<name>"` or
    /// `variant` plus the matching constants.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let raw: ScheduleConfig = toml::from_str(text)?;
        raw.resolve()
    }

    pub fn from_config_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }
}

/// Flat on-disk form of a schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<NoiseSchedule> {
        let base = match &self.preset {
            Some(name) => Some(NoiseSchedule::from_preset(name)?),
            None => None,
        };
        let variant = match (self.variant, base) {
            (Some(v), _) => v,
            (None, Some(b)) => b.variant(),
            (None, None) => {
                return Err(Error::InvalidParameter(
                    "schedule config needs `preset` or `variant`".into(),
                ))
            }
        };
        match variant {
            Variant::Ve => {
                let (dmin, dmax) = match base {
                    Some(NoiseSchedule::Ve(ve)) => (ve.sigma_min, ve.sigma_max),
                    _ => (DEFAULT_SIGMA_MIN, DEFAULT_TOY_SIGMA_MAX),
                };
                Ok(NoiseSchedule::Ve(VeSchedule::new(
                    self.sigma_min.unwrap_or(dmin),
                    self.sigma_max.unwrap_or(dmax),
                )?))
            }
            Variant::Vp => {
                let (dmin, dmax) = match base {
                    Some(NoiseSchedule::Vp(vp)) => (vp.beta_min, vp.beta_max),
                    _ => (DEFAULT_BETA_MIN, DEFAULT_BETA_MAX),
                };
                Ok(NoiseSchedule::Vp(VpSchedule::new(
                    self.beta_min.unwrap_or(dmin),
                    self.beta_max.unwrap_or(dmax),
                )?))
            }
        }
    }
}

impl From<NoiseSchedule> for ScheduleConfig {
    fn from(schedule: NoiseSchedule) -> Self {
        match schedule {
            NoiseSchedule::Ve(ve) => ScheduleConfig {
                variant: Some(Variant::Ve),
                sigma_min: Some(ve.sigma_min),
                sigma_max: Some(ve.sigma_max),
                ..Default::default()
            },
            NoiseSchedule::Vp(vp) => ScheduleConfig {
                variant: Some(Variant::Vp),
                beta_min: Some(vp.beta_min),
                beta_max: Some(vp.beta_max),
                ..Default::default()
            },
        }
    }
}

pub const DEFAULT_SIGMA_MIN: f64 = 0.01;
/// Default VE `sigma_max` for unit-scale toy data.
pub const DEFAULT_TOY_SIGMA_MAX: f64 = 25.0;
pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;

/// Named schedule presets and their constants.
pub const PRESETS: &[(&str, NoiseSchedule)] = &[
    ("ve-church-256", ve_const(380.0)),
    ("ve-bedroom-256", ve_const(378.0)),
    ("ve-ffhq-256", ve_const(348.0)),
    ("ve-ffhq-1024", ve_const(1348.0)),
    ("ve-toy", ve_const(DEFAULT_TOY_SIGMA_MAX)),
    (
        "vp-default",
        NoiseSchedule::Vp(VpSchedule {
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
        }),
    ),
];

const fn ve_const(sigma_max: f64) -> NoiseSchedule {
    NoiseSchedule::Ve(VeSchedule {
        sigma_min: DEFAULT_SIGMA_MIN,
        sigma_max,
    })
}

pub fn preset(name: &str) -> Option<NoiseSchedule> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, schedule)| *schedule)
}

/// Uniform descending grid `t_n = t0 * n / N` for `n = N..=1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub n_steps: usize,
    pub delta_t: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, n_steps: usize) -> Result<Self> {
        if !(t0 > 0.0 && t0 <= 1.0) {
            return Err(Error::Domain {
                name: "t0",
                value: t0,
                domain: "(0, 1]",
            });
        }
        if n_steps == 0 {
            return Err(Error::InvalidParameter("n_steps must be >= 1".into()));
        }
        Ok(Self {
            t0,
            n_steps,
            delta_t: t0 / n_steps as f64,
        })
    }

    /// Time of step `n` (1-based); `time(N) == t0`.
    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.t0
        } else {
            self.t0 * n as f64 / self.n_steps as f64
        }
    }

    /// `(n, t_n)` pairs in integration order, `n = N` down to `1`.
    pub fn steps(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (1..=self.n_steps).rev().map(move |n| (n, self.time(n)))
    }

    pub fn times(&self) -> Vec<f64> {
        self.steps().map(|(_, t)| t).collect()
    }
}
