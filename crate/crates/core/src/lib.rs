//! Guided synthesis and editing with score-based diffusion SDEs.
//!
//! A guide is perturbed with Gaussian noise up to an intermediate time `t0`
//! and then denoised by integrating the reverse-time SDE with
//! Euler–Maruyama. Small `t0` keeps the output close to the guide; large
//! `t0` trades that closeness for samples that look like the data.

pub mod error;
pub mod guide_tools;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod search;

pub use error::{Error, Result};
pub use rng::NoiseStream;
pub use schedule::{NoiseSchedule, TimeGrid, Variant, VeSchedule, VpSchedule};
pub use score::{AnalyticGmmScore, ClassifierGradient, GmmComponent, GmmSpec, ScoreModel, ZeroScore};
pub use sampler::{
    forward_perturb, reverse_step_ve, reverse_step_vp, sdedit, sdedit_class_conditional, sdedit_masked,
    EditMask, Guidance, Guide, RunControl, SampleResult, Sampler, SdeditConfig, Shape,
};
pub use search::{t0_binary_search, Feedback, T0SearchState};
pub use metrics::{
    check_prop1, faithfulness, mmd_kid, prop1_bound, tradeoff_sweep, BoundCheckReport, BoundReference,
    FaithfulnessScore, MmdScore, SweepConfig, TradeoffPoint, TradeoffReport,
};
