//! Interactive editing service: sessions holding a guide, an optional edit
//! mask, and a `t0` search state, exposed both as direct calls
//! ([`EditService`]) and as a JSON HTTP API ([`api::router`]).

pub mod api;
pub mod error;
pub mod presets;
pub mod service;

pub use api::{router, serve, AppState};
pub use error::{ApiError, ApiResult, ErrorCode};
pub use presets::{LoadedPreset, ModelSpec, PresetFile, PresetInfo, PresetRegistry};
pub use service::{
    EditService, FeedbackRequest, GenerateRequest, GenerateResponse, GenerationTicket, GuideAck, GuideRequest,
    Limits, Payload, ResultBytes, SearchView, SessionInfo, Snapshot, StoredResult,
};

/// Environment variable naming the default preset directory.
pub const PRESET_DIR_ENV: &str = "SDEDIT_PRESET_DIR";
