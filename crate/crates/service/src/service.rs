//! In-memory session store and the direct-call editing API.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use parking_lot::{Mutex, RwLock};
use sdedit_core::guide_tools::{format_vector, RasterImage};
use sdedit_core::sampler::RunControl;
use sdedit_core::{faithfulness, EditMask, Feedback, FaithfulnessScore, Guide, Sampler, SampleResult, SdeditConfig, Shape, T0SearchState};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::error::{ApiError, ApiResult};
use crate::presets::{LoadedPreset, PresetInfo, PresetRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_width: usize,
    pub max_height: usize,
    pub max_steps: usize,
    pub max_repeats: usize,
    pub history_cap: usize,
    /// Wall-clock cap per generation.
    pub deadline_secs: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_width: 64,
            max_height: 64,
            max_steps: 1000,
            max_repeats: 10,
            history_cap: 16,
            deadline_secs: 60.0,
        }
    }
}

pub const DEFAULT_STEPS: usize = 500;

/// An image (binary PPM/PGM, base64) or a flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum Payload {
    Pnm { data: String },
    Vector { values: Vec<f64> },
}

impl Payload {
    pub fn from_image(img: &RasterImage) -> Self {
        Payload::Pnm { data: B64.encode(img.to_pnm()) }
    }

    fn decode(&self) -> ApiResult<Decoded> {
        match self {
            Payload::Pnm { data } => {
                let bytes = B64
                    .decode(data)
                    .map_err(|e| ApiError::bad_request(format!("payload is not valid base64: {e}")))?;
                Ok(Decoded::Image(RasterImage::from_pnm(&bytes)?))
            }
            Payload::Vector { values } => Ok(Decoded::Vector(values.clone())),
        }
    }
}

enum Decoded {
    Image(RasterImage),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideRequest {
    pub guide: Payload,
    #[serde(default)]
    pub mask: Option<Payload>,
}

/// Shape echo: image guides report `w`, `h`, `c`; vectors report `len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuideAck {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub len: Option<usize>,
    pub masked: bool,
    pub editable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    #[serde(default)]
    pub t0: Option<f64>,
    #[serde(default)]
    pub n_steps: Option<usize>,
    #[serde(default)]
    pub repeats: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Class label for guided generation (mixture presets only).
    #[serde(default)]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub result_id: u64,
    pub t0: f64,
    pub n_steps: usize,
    pub repeats: usize,
    pub seed: u64,
    pub faithfulness: FaithfulnessScore,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub verdict: Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchView {
    pub lo: f64,
    pub hi: f64,
    pub probe: f64,
    pub iterations: usize,
    pub accepted: bool,
    pub at_soft_cap: bool,
}

impl From<&T0SearchState> for SearchView {
    fn from(s: &T0SearchState) -> Self {
        Self {
            lo: s.lo,
            hi: s.hi,
            probe: s.probe,
            iterations: s.iterations,
            accepted: s.accepted,
            at_soft_cap: s.at_soft_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: Uuid,
    pub preset: String,
    pub shape: Shape,
    pub search: SearchView,
    pub has_guide: bool,
    pub results: Vec<u64>,
}

/// A fetched result: PNM bytes for image presets, a text vector otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultBytes {
    pub content_type: &'static str,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResult {
    pub id: u64,
    pub config: SdeditConfig,
    pub result: SampleResult,
    pub faithfulness: FaithfulnessScore,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    pub id: Uuid,
    pub preset: String,
    pub guide: Option<Guide>,
    pub mask: Option<EditMask>,
    pub search: T0SearchState,
    /// Set by a generation, cleared by feedback.
    pub pending: bool,
    pub history: VecDeque<StoredResult>,
    pub next_result: u64,
    #[serde(skip)]
    busy: bool,
}

impl Session {
    fn new(preset: &str) -> Self {
        Self {
            id: Uuid::new_v4(),
            preset: preset.to_string(),
            guide: None,
            mask: None,
            search: T0SearchState::default(),
            pending: false,
            history: VecDeque::new(),
            next_result: 1,
            busy: false,
        }
    }

    fn info(&self, shape: Shape) -> SessionInfo {
        SessionInfo {
            id: self.id,
            preset: self.preset.clone(),
            shape,
            search: SearchView::from(&self.search),
            has_guide: self.guide.is_some(),
            results: self.history.iter().map(|r| r.id).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub sessions: Vec<Session>,
}

type SessionRef = Arc<Mutex<Session>>;

/// The editing service. All methods are synchronous and thread-safe.
pub struct EditService {
    presets: PresetRegistry,
    sessions: RwLock<HashMap<Uuid, SessionRef>>,
    limits: Limits,
}

impl EditService {
    pub fn new(presets: PresetRegistry, limits: Limits) -> Self {
        Self { presets, sessions: RwLock::new(HashMap::new()), limits }
    }

    pub fn with_builtins() -> Self {
        Self::new(PresetRegistry::with_builtins().expect("built-in presets are valid"), Limits::default())
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    pub fn presets(&self) -> Vec<PresetInfo> {
        self.presets.infos()
    }

    fn preset(&self, name: &str) -> ApiResult<Arc<LoadedPreset>> {
        self.presets
            .get(name)
            .ok_or_else(|| ApiError::not_found(format!("unknown preset `{name}`")))
    }

    fn session(&self, id: Uuid) -> ApiResult<SessionRef> {
        self.sessions
            .read()
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn create_session(&self, preset: &str) -> ApiResult<SessionInfo> {
        let p = self.preset(preset)?;
        let session = Session::new(preset);
        let info = session.info(p.info.shape);
        self.sessions.write().insert(session.id, Arc::new(Mutex::new(session)));
        Ok(info)
    }

    pub fn session_info(&self, id: Uuid) -> ApiResult<SessionInfo> {
        let s = self.session(id)?;
        let s = s.lock();
        let shape = self.preset(&s.preset)?.info.shape;
        Ok(s.info(shape))
    }

    pub fn submit_guide(&self, id: Uuid, request: &GuideRequest) -> ApiResult<GuideAck> {
        let session = self.session(id)?;
        let shape = self.preset(&session.lock().preset)?.info.shape;
        let (guide, mut ack) = self.decode_guide(&request.guide, shape)?;
        let mask = match &request.mask {
            None => None,
            Some(m) => Some(decode_mask(m, shape)?),
        };
        ack.masked = mask.is_some();
        ack.editable = mask.as_ref().map_or(shape.len(), EditMask::editable_count);

        let mut s = session.lock();
        if s.busy {
            return Err(ApiError::busy("a generation is in progress for this session"));
        }
        s.guide = Some(guide);
        s.mask = mask;
        s.search = T0SearchState::default();
        s.pending = false;
        Ok(ack)
    }

    fn decode_guide(&self, payload: &Payload, shape: Shape) -> ApiResult<(Guide, GuideAck)> {
        match (payload.decode()?, shape) {
            (Decoded::Image(img), Shape::Image { .. }) => {
                if img.width() > self.limits.max_width || img.height() > self.limits.max_height {
                    return Err(ApiError::bad_request(format!(
                        "guide is {}x{}; the limit is {}x{}",
                        img.width(),
                        img.height(),
                        self.limits.max_width,
                        self.limits.max_height
                    )));
                }
                if img.shape() != shape {
                    return Err(ApiError::shape_mismatch(format!(
                        "guide is {}, preset expects {shape}",
                        img.shape()
                    )));
                }
                let ack = GuideAck {
                    w: Some(img.width()),
                    h: Some(img.height()),
                    c: Some(img.channels()),
                    len: None,
                    masked: false,
                    editable: 0,
                };
                Ok((img.to_guide(), ack))
            }
            (Decoded::Vector(values), Shape::Flat { len }) => {
                if values.len() != len {
                    return Err(ApiError::shape_mismatch(format!(
                        "guide has {} values, preset expects {len}",
                        values.len()
                    )));
                }
                let n = values.len();
                let ack = GuideAck { w: None, h: None, c: None, len: Some(n), masked: false, editable: 0 };
                Ok((Guide::flat(values)?, ack))
            }
            (Decoded::Image(img), Shape::Flat { .. }) => Err(ApiError::shape_mismatch(format!(
                "preset expects a vector, got an image {}",
                img.shape()
            ))),
            (Decoded::Vector(v), Shape::Image { .. }) => Err(ApiError::shape_mismatch(format!(
                "preset expects an image {shape}, got a vector of {}",
                v.len()
            ))),
        }
    }

    /// Validates a generation request and marks the session busy. The
    /// returned ticket runs the sampler without holding any lock; dropping
    /// it unexecuted releases the session.
    pub fn begin_generate(self: &Arc<Self>, id: Uuid, request: &GenerateRequest) -> ApiResult<GenerationTicket> {
        let session = self.session(id)?;
        let mut s = session.lock();
        if s.busy {
            return Err(ApiError::busy("a generation is already in progress for this session"));
        }
        let preset = self.preset(&s.preset)?;
        let guide = s
            .guide
            .clone()
            .ok_or_else(|| ApiError::bad_request("submit a guide before generating"))?;
        let n_steps = request.n_steps.unwrap_or(DEFAULT_STEPS);
        let repeats = request.repeats.unwrap_or(1);
        if n_steps == 0 || n_steps > self.limits.max_steps {
            return Err(ApiError::bad_request(format!(
                "n_steps must be in 1..={}, got {n_steps}",
                self.limits.max_steps
            )));
        }
        if repeats == 0 || repeats > self.limits.max_repeats {
            return Err(ApiError::bad_request(format!(
                "repeats must be in 1..={}, got {repeats}",
                self.limits.max_repeats
            )));
        }
        let t0 = request.t0.unwrap_or(s.search.probe);
        let seed = request.seed.unwrap_or_else(|| s.next_result.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id.as_u64_pair().0);
        let mut config = SdeditConfig::new(t0, n_steps).with_repeats(repeats).with_seed(seed);
        if let Some(label) = request.label {
            if preset.classifier.is_none() {
                return Err(ApiError::bad_request(format!(
                    "preset `{}` has no classifier for guidance",
                    preset.info.name
                )));
            }
            config = config.with_guidance(label, 1.0);
        }
        config.validate()?;
        s.busy = true;
        let mask = s.mask.clone();
        drop(s);
        Ok(GenerationTicket {
            service: Arc::clone(self),
            session,
            preset,
            guide,
            mask,
            config,
            done: false,
        })
    }

    pub fn generate(self: &Arc<Self>, id: Uuid, request: &GenerateRequest) -> ApiResult<GenerateResponse> {
        self.begin_generate(id, request)?.execute()
    }

    pub fn feedback(&self, id: Uuid, verdict: Feedback) -> ApiResult<SearchView> {
        let session = self.session(id)?;
        let mut s = session.lock();
        if s.busy {
            return Err(ApiError::busy("a generation is in progress for this session"));
        }
        if !s.pending {
            return Err(ApiError::bad_request("protocol error: no candidate generated since the last feedback"));
        }
        s.search = s.search.step(verdict)?;
        s.pending = false;
        Ok(SearchView::from(&s.search))
    }

    pub fn result(&self, id: Uuid, result_id: u64) -> ApiResult<StoredResult> {
        let session = self.session(id)?;
        let s = session.lock();
        s.history
            .iter()
            .find(|r| r.id == result_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no result {result_id} in session {id}")))
    }

    pub fn result_bytes(&self, id: Uuid, result_id: u64) -> ApiResult<ResultBytes> {
        let stored = self.result(id, result_id)?;
        encode_output(&stored.result)
    }

    pub fn delete_session(&self, id: Uuid) -> ApiResult<()> {
        self.sessions
            .write()
            .remove(&id)
            .map(|_| ())
            .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut sessions: Vec<Session> = self.sessions.read().values().map(|s| s.lock().clone()).collect();
        sessions.sort_by_key(|s| s.id);
        Snapshot { version: 1, sessions }
    }

    /// Replaces all sessions with those in `snapshot`. Sessions whose preset
    /// is no longer available are dropped; the count of restored sessions is returned.
    pub fn restore(&self, snapshot: Snapshot) -> usize {
        let mut map = HashMap::new();
        for mut s in snapshot.sessions {
            if self.presets.get(&s.preset).is_none() {
                tracing::warn!(session = %s.id, preset = %s.preset, "dropping session with unknown preset");
                continue;
            }
            s.busy = false;
            map.insert(s.id, Arc::new(Mutex::new(s)));
        }
        let n = map.len();
        *self.sessions.write() = map;
        n
    }

    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> ApiResult<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec(&self.snapshot()).map_err(|e| ApiError::internal(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| ApiError::internal(format!("writing {}: {e}", path.display())))
    }

    pub fn load_snapshot(&self, path: impl AsRef<Path>) -> ApiResult<usize> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ApiError::internal(format!("reading {}: {e}", path.display())))?;
        let snapshot: Snapshot =
            serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("bad snapshot: {e}")))?;
        Ok(self.restore(snapshot))
    }
}

fn decode_mask(payload: &Payload, shape: Shape) -> ApiResult<EditMask> {
    match payload.decode()? {
        Decoded::Image(img) => match shape {
            Shape::Image { height, width, .. } if img.height() == height && img.width() == width => {
                Ok(img.to_mask(shape)?)
            }
            _ => Err(ApiError::shape_mismatch(format!("mask is {}, guide is {shape}", img.shape()))),
        },
        Decoded::Vector(values) => {
            if values.len() != shape.len() {
                return Err(ApiError::shape_mismatch(format!(
                    "mask has {} values, guide is {shape}",
                    values.len()
                )));
            }
            Ok(EditMask::from_values(&values, shape)?)
        }
    }
}

fn encode_output(result: &SampleResult) -> ApiResult<ResultBytes> {
    match result.shape {
        Shape::Image { .. } => {
            let clamped: Vec<f64> = result.output.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let img = RasterImage::from_chw(result.shape, &clamped)?;
            let content_type = if img.channels() == 1 { "image/x-portable-graymap" } else { "image/x-portable-pixmap" };
            Ok(ResultBytes { content_type, bytes: img.to_pnm() })
        }
        Shape::Flat { .. } => Ok(ResultBytes {
            content_type: "text/plain; charset=utf-8",
            bytes: format_vector(&result.output).into_bytes(),
        }),
    }
}

/// A validated generation holding its session's busy flag.
pub struct GenerationTicket {
    service: Arc<EditService>,
    session: SessionRef,
    preset: Arc<LoadedPreset>,
    guide: Guide,
    mask: Option<EditMask>,
    config: SdeditConfig,
    done: bool,
}

impl GenerationTicket {
    pub fn config(&self) -> &SdeditConfig {
        &self.config
    }

    pub fn execute(mut self) -> ApiResult<GenerateResponse> {
        let start = Instant::now();
        let deadline = Duration::from_secs_f64(self.service.limits.deadline_secs);
        let mut sampler = Sampler::new(self.preset.score.as_ref(), self.preset.schedule)
            .with_control(RunControl { deadline: Some(start + deadline) });
        if let Some(c) = &self.preset.classifier {
            sampler = sampler.with_classifier(c.as_ref());
        }
        let outcome = sampler.run(&self.guide, self.mask.as_ref(), &self.config);
        let elapsed_ms = start.elapsed().as_millis() as u64;

        let mut s = self.session.lock();
        s.busy = false;
        self.done = true;
        let result = match outcome {
            Ok(r) => r,
            Err(sdedit_core::Error::DeadlineExceeded { steps }) => {
                return Err(ApiError::bad_request(format!(
                    "generation exceeded the {}s limit after {steps} steps",
                    self.service.limits.deadline_secs
                )))
            }
            Err(e) => return Err(ApiError::internal(e.to_string())),
        };
        let faith = faithfulness(self.guide.data(), &result.output)?;
        let id = s.next_result;
        s.next_result += 1;
        s.history.push_back(StoredResult { id, config: self.config.clone(), result, faithfulness: faith });
        while s.history.len() > self.service.limits.history_cap {
            s.history.pop_front();
        }
        s.pending = true;
        Ok(GenerateResponse {
            result_id: id,
            t0: self.config.t0,
            n_steps: self.config.n_steps,
            repeats: self.config.repeats,
            seed: self.config.seed,
            faithfulness: faith,
            elapsed_ms,
        })
    }
}

impl Drop for GenerationTicket {
    fn drop(&mut self) {
        if !self.done {
            self.session.lock().busy = false;
        }
    }
}
