//! Interactive bisection over `t0`.
//!
//! Each round shows a candidate at the current probe. "More realistic" means
//! the probe was too faithful, so the lower end moves up; "more faithful"
//! moves the upper end down. `Accept` freezes the probe.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initial bracket for the interactive search.
pub const DEFAULT_INTERVAL: (f64, f64) = (0.3, 0.6);

/// Rounds after which [`T0SearchState::at_soft_cap`] reports true.
pub const SOFT_CAP: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    MoreRealistic,
    MoreFaithful,
    Accept,
}

impl std::str::FromStr for Feedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "more_realistic" | "r" | "realistic" => Ok(Feedback::MoreRealistic),
            "more_faithful" | "f" | "faithful" => Ok(Feedback::MoreFaithful),
            "accept" | "a" => Ok(Feedback::Accept),
            other => Err(Error::InvalidParameter(format!("unknown feedback `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T0SearchState {
    pub lo: f64,
    pub hi: f64,
    pub probe: f64,
    pub iterations: usize,
    pub accepted: bool,
    pub history: Vec<(f64, Feedback)>,
}

impl Default for T0SearchState {
    fn default() -> Self {
        Self::new(DEFAULT_INTERVAL.0, DEFAULT_INTERVAL.1).expect("valid default interval")
    }
}

impl T0SearchState {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "search interval [{lo}, {hi}] must satisfy 0 <= lo < hi <= 1"
            )));
        }
        Ok(Self {
            lo,
            hi,
            probe: midpoint(lo, hi),
            iterations: 0,
            accepted: false,
            history: Vec::new(),
        })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn at_soft_cap(&self) -> bool {
        self.iterations >= SOFT_CAP
    }

    /// Applies one round of feedback.
    pub fn step(&self, feedback: Feedback) -> Result<Self> {
        if self.accepted {
            return Err(Error::Protocol(format!(
                "search already accepted t0 = {}",
                self.probe
            )));
        }
        let mut next = self.clone();
        next.history.push((self.probe, feedback));
        match feedback {
            Feedback::MoreRealistic => next.lo = self.probe,
            Feedback::MoreFaithful => next.hi = self.probe,
            Feedback::Accept => {
                next.accepted = true;
                return Ok(next);
            }
        }
        next.probe = midpoint(next.lo, next.hi);
        next.iterations += 1;
        Ok(next)
    }
}

/// Midpoint rounded to 12 decimals, so probes reached from decimal endpoints
/// print as the decimals a user expects (0.45, 0.525, ...).
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = 0.5 * (lo + hi);
    let snapped = (m * 1e12).round() / 1e12;
    if lo < snapped && snapped < hi {
        snapped
    } else {
        m
    }
}

/// Free-function form of [`T0SearchState::step`].
pub fn t0_binary_search(state: &T0SearchState, feedback: Feedback) -> Result<T0SearchState> {
    state.step(feedback)
}
