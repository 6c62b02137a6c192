use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use futures_util::Stream;
use serde::Deserialize;
use serde_json::{json, Value};
use teachkit_core::classifier::{check_trainable, train_classifier, ClassifierSnapshot, ClsTrainConfig};
use teachkit_core::dataset::load_manifest;
use teachkit_core::dataset::synth::hsv_to_rgb;
use teachkit_core::diversity::{Embedder, EmbeddingCache, PixelEmbedder, ProjectionView, RefitDecision, RefitScheduler};
use teachkit_core::live::LiveLoop;
use teachkit_core::saliency::{assess, overlay};
use teachkit_core::segmenter::{
    train_from_manifest, HandSegmenter, HeuristicHandSegmenter, LearnedHandSegmenter, ObjectSegmenter, SegTrainConfig,
    UNetConfig,
};
use teachkit_core::session::{
    now_ms, Category, CategoryId, Condition, Phase, SessionEvent, SessionState, TeachingSample, TeachingSet,
};
use teachkit_core::{Error as CoreError, Frame, Mask};

use crate::bundle::{export_bundle, import_bundle, ExportBundle};
use crate::events::EventHub;
use crate::jobs::{JobKind, JobStatus, TrainingJob};

pub const OBJECT_MODEL_DIR: &str = "object_segmenter";
pub const HAND_MODEL_DIR: &str = "hand_segmenter";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::UnknownSample(_) => StatusCode::NOT_FOUND,
            CoreError::Io(_) | CoreError::ModelFile(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub model_dir: Option<PathBuf>,
    /// Limit on one decoded PNG upload.
    pub max_frame_bytes: usize,
    /// Defaults for classifier jobs; request bodies may override parts.
    pub classifier: ClsTrainConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            model_dir: None,
            max_frame_bytes: 4 << 20,
            classifier: ClsTrainConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `PORT`, `MODEL_DIR` and `MAX_FRAME_BYTES`.
    pub fn from_env() -> Result<Self, String> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("PORT") {
            c.port = v.parse().map_err(|e| format!("PORT: {e}"))?;
        }
        if let Ok(v) = std::env::var("MODEL_DIR") {
            c.model_dir = Some(PathBuf::from(v));
        }
        if let Ok(v) = std::env::var("MAX_FRAME_BYTES") {
            c.max_frame_bytes = v.parse().map_err(|e| format!("MAX_FRAME_BYTES: {e}"))?;
        }
        Ok(c)
    }
}

pub struct Models {
    pub hands: Arc<dyn HandSegmenter>,
    pub objects: RwLock<Option<Arc<ObjectSegmenter>>>,
}

impl Models {
    pub fn new(hands: Arc<dyn HandSegmenter>, objects: Option<ObjectSegmenter>) -> Self {
        Self {
            hands,
            objects: RwLock::new(objects.map(Arc::new)),
        }
    }

    pub fn heuristic() -> Self {
        Self::new(Arc::new(HeuristicHandSegmenter::default()), None)
    }

    /// Picks up `hand_segmenter/` and `object_segmenter/` under `dir` when
    /// present; falls back to the heuristic hand segmenter.
    pub fn load(dir: &FsPath) -> teachkit_core::Result<Self> {
        let hands: Arc<dyn HandSegmenter> = if dir.join(HAND_MODEL_DIR).is_dir() {
            Arc::new(LearnedHandSegmenter::load(&dir.join(HAND_MODEL_DIR))?)
        } else {
            Arc::new(HeuristicHandSegmenter::default())
        };
        let objects = if dir.join(OBJECT_MODEL_DIR).is_dir() {
            Some(ObjectSegmenter::load(&dir.join(OBJECT_MODEL_DIR))?.0)
        } else {
            None
        };
        Ok(Self::new(hands, objects))
    }

    fn objects(&self) -> Option<Arc<ObjectSegmenter>> {
        self.objects.read().expect("models lock").clone()
    }
}

struct LiveFrame {
    frame: Frame,
    hand_mask: Mask,
    highlight: Option<Mask>,
}

pub struct ApiSession {
    pub id: String,
    pub created_at: u64,
    /// The single writer. Events are published while it is held so stream
    /// order matches mutation order.
    state: Mutex<SessionState>,
    pub hub: EventHub,
    refit: RefitScheduler,
    cache: Mutex<EmbeddingCache>,
    pixels: Arc<PixelEmbedder>,
    classifier: RwLock<Option<Arc<ClassifierSnapshot>>>,
    live: Mutex<Option<LiveFrame>>,
    job: Mutex<Option<Arc<Mutex<TrainingJob>>>>,
    next_sample: AtomicU64,
}

fn publish_session_event(hub: &EventHub, ev: &SessionEvent) {
    let value = serde_json::to_value(ev).expect("event serializes");
    let kind = value["type"].as_str().unwrap_or("session").to_string();
    hub.publish(&kind, value);
}

impl ApiSession {
    fn new(id: String, state: SessionState) -> Self {
        let next = state.teaching_set().len() as u64;
        Self {
            id,
            created_at: now_ms(),
            state: Mutex::new(state),
            hub: EventHub::new(),
            refit: RefitScheduler::new(),
            cache: Mutex::new(EmbeddingCache::default()),
            pixels: Arc::new(PixelEmbedder::default()),
            classifier: RwLock::new(None),
            live: Mutex::new(None),
            job: Mutex::new(None),
            next_sample: AtomicU64::new(next),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SessionState> {
        self.state.lock().expect("session lock")
    }

    pub fn teaching_set(&self) -> Arc<TeachingSet> {
        self.lock().snapshot()
    }

    pub fn phase(&self) -> Phase {
        self.lock().phase()
    }

    pub fn classifier(&self) -> Option<Arc<ClassifierSnapshot>> {
        self.classifier.read().expect("classifier lock").clone()
    }

    /// Trained classifier once there is one, a fixed pixel projection before.
    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match self.classifier() {
            Some(m) => m,
            None => self.pixels.clone(),
        }
    }

    pub fn projection(&self) -> Option<Arc<ProjectionView>> {
        self.refit.current()
    }

    fn move_to(&self, st: &mut SessionState, to: Phase) -> teachkit_core::Result<()> {
        while st.phase() != to {
            let next = match st.phase() {
                Phase::Teaching => Phase::Training,
                Phase::Training => Phase::Assessing,
                Phase::Assessing => Phase::Teaching,
            };
            let ev = st.transition(next)?.clone();
            publish_session_event(&self.hub, &ev);
        }
        Ok(())
    }

    fn schedule_refit(self: &Arc<Self>) {
        if self.refit.on_change() != RefitDecision::Start {
            return;
        }
        let s = self.clone();
        match tokio::runtime::Handle::try_current() {
            Ok(h) => {
                h.spawn_blocking(move || s.run_refits());
            }
            Err(_) => s.run_refits(),
        }
    }

    fn run_refits(&self) {
        loop {
            let set = self.teaching_set();
            let embedder = self.embedder();
            let view = if set.is_empty() {
                None
            } else {
                let mut cache = self.cache.lock().expect("cache lock");
                ProjectionView::build(&set, embedder.as_ref(), &mut cache).ok()
            };
            match &view {
                Some(v) => {
                    self.hub.publish(
                        "diversity_report",
                        json!({
                            "space": v.space,
                            "report": v.report,
                            "points": v.points,
                            "explained_variance": v.projection.explained_variance,
                        }),
                    );
                }
                None => {
                    self.refit.clear();
                    self.hub.publish("status", json!({ "projection": "unavailable" }));
                }
            }
            if !self.refit.finish(view) {
                break;
            }
        }
    }

    fn summary(&self) -> Value {
        let st = self.lock();
        let set = st.teaching_set();
        let samples: Vec<Value> = set
            .samples()
            .map(|s| {
                json!({
                    "sample_id": s.sample_id,
                    "category_id": s.category_id,
                    "condition": s.condition,
                    "captured_at": s.captured_at,
                    "has_object_mask": s.object_mask.is_some(),
                })
            })
            .collect();
        let job = self.job.lock().expect("job lock").as_ref().map(|j| j.lock().expect("job").clone());
        let view = self.refit.current();
        json!({
            "id": self.id,
            "created_at": self.created_at,
            "phase": st.phase(),
            "active_category": st.active_category,
            "categories": set.categories(),
            "counts": set.counts_per_category(),
            "samples": samples,
            "latest_snapshot": st.latest_snapshot,
            "projection": view.map(|v| json!({ "space": v.space, "report": v.report, "points": v.points })),
            "last_seq": self.hub.last_seq(),
            "job": job,
        })
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub models: Models,
    sessions: RwLock<HashMap<String, Arc<ApiSession>>>,
    jobs: RwLock<HashMap<String, Arc<Mutex<TrainingJob>>>>,
    counter: AtomicU64,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn new(config: ServiceConfig, models: Models) -> Shared {
        Arc::new(Self {
            config,
            models,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
        })
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{prefix}_{:x}{n:04}", now_ms())
    }

    pub fn session(&self, id: &str) -> ApiResult<Arc<ApiSession>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn job(&self, id: &str) -> Option<TrainingJob> {
        let jobs = self.jobs.read().expect("jobs lock");
        jobs.get(id).map(|j| j.lock().expect("job lock").clone())
    }

    fn decode_png(&self, b64: &str) -> ApiResult<Vec<u8>> {
        let data = b64.rsplit_once(',').map_or(b64, |(head, rest)| if head.starts_with("data:") { rest } else { b64 });
        let bytes = STANDARD
            .decode(data.trim())
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid base64: {e}")))?;
        if bytes.len() > self.config.max_frame_bytes {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                format!("upload is {} bytes, limit {}", bytes.len(), self.config.max_frame_bytes),
            ));
        }
        Ok(bytes)
    }

    fn decode_frame(&self, b64: &str) -> ApiResult<Frame> {
        Ok(Frame::from_png(&self.decode_png(b64)?)?)
    }
}

fn png_b64(bytes: teachkit_core::Result<Vec<u8>>) -> ApiResult<String> {
    Ok(STANDARD.encode(bytes?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

pub fn router(state: Shared) -> Router {
    // base64 inflates by 4/3; a capture may carry a frame-sized mask too
    let body_limit = state.config.max_frame_bytes / 3 * 8 + (64 << 10);
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/categories", post(add_category))
        .route("/sessions/{id}/frames", post(post_frame))
        .route("/sessions/{id}/capture", post(capture))
        .route("/sessions/{id}/samples/{sid}", delete(delete_sample))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/assess", post(assess_frame))
        .route("/sessions/{id}/export", get(export))
        .route("/sessions/{id}/events", get(events))
        .route("/jobs/{id}", get(get_job))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

/// Binds `0.0.0.0:PORT` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let models = match &config.model_dir {
        Some(dir) => Models::load(dir).map_err(|e| std::io::Error::other(e.to_string()))?,
        None => Models::heuristic(),
    };
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", config.port)).await?;
    let app = router(AppState::new(config, models));
    axum::serve(listener, app).await
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    #[serde(default)]
    categories: Vec<Category>,
    import: Option<ExportBundle>,
}

fn parse_json<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

async fn create_session(State(app): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let body: CreateBody = parse_json(&body)?;
    let mut state = match &body.import {
        Some(bundle) => SessionState::new(import_bundle(bundle)?),
        None => SessionState::default(),
    };
    for c in body.categories {
        state.add_category(c)?;
    }
    let imported = !state.teaching_set().is_empty();
    let session = Arc::new(ApiSession::new(app.fresh_id("ses"), state));
    for ev in session.lock().events() {
        publish_session_event(&session.hub, ev);
    }
    app.sessions
        .write()
        .expect("sessions lock")
        .insert(session.id.clone(), session.clone());
    if imported {
        session.schedule_refit();
    }
    Ok((StatusCode::CREATED, Json(session.summary())))
}

async fn get_session(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(app.session(&id)?.summary()))
}

#[derive(Deserialize)]
struct CategoryBody {
    id: Option<CategoryId>,
    name: String,
    color: Option<[u8; 3]>,
}

async fn add_category(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<CategoryBody>,
) -> ApiResult<(StatusCode, Json<Category>)> {
    let session = app.session(&id)?;
    let mut st = session.lock();
    let existing = st.teaching_set().categories();
    let cid = body
        .id
        .unwrap_or_else(|| existing.iter().map(|c| c.id + 1).max().unwrap_or(0));
    let color = body
        .color
        .unwrap_or_else(|| hsv_to_rgb((cid as f32 * 137.5) % 360.0, 0.7, 0.9));
    let category = Category::new(cid, body.name, color)?;
    let ev = st.add_category(category.clone())?.clone();
    publish_session_event(&session.hub, &ev);
    Ok((StatusCode::CREATED, Json(category)))
}

#[derive(Deserialize)]
struct FrameBody {
    image: String,
    category_id: Option<CategoryId>,
}

async fn post_frame(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<FrameBody>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let frame = app.decode_frame(&body.image)?;
    blocking(move || live_step(&app, &session, frame, body.category_id)).await.map(Json)
}

fn live_step(app: &AppState, session: &ApiSession, frame: Frame, class: Option<CategoryId>) -> ApiResult<Value> {
    let class = {
        let mut st = session.lock();
        if let Some(c) = class {
            st.teaching_set().category(c).ok_or(CoreError::UnknownCategory(c))?;
            st.active_category = Some(c);
        }
        st.active_category
    };
    let view = session.refit.current();
    let embedder = session.embedder();
    let objects = app.models.objects();
    let live = LiveLoop {
        hands: app.models.hands.as_ref(),
        objects: objects.as_deref(),
        view: view.as_deref(),
        embedder: embedder.as_ref(),
    };
    let step = live.step(&frame, class)?;
    let highlight = step.highlight.map(|h| h.mask);
    let body = json!({
        "hand_mask": png_b64(step.hand_mask.to_png())?,
        "highlight_mask": highlight.as_ref().map(|m| png_b64(m.to_png())).transpose()?,
        "live_point": step.live_point,
        "projection_available": view.is_some(),
    });
    *session.live.lock().expect("live lock") = Some(LiveFrame {
        frame,
        hand_mask: step.hand_mask,
        highlight,
    });
    if let Some(p) = &step.live_point {
        session.hub.publish("live_point", serde_json::to_value(p).expect("point serializes"));
    }
    Ok(body)
}

#[derive(Deserialize)]
struct CaptureBody {
    category_id: Option<CategoryId>,
    condition: Condition,
    /// Teacher-drawn annotation for the click and contour conditions.
    mask: Option<String>,
}

async fn capture(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<CaptureBody>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let session = app.session(&id)?;
    let drawn = body.mask.as_deref().map(|m| app.decode_png(m)).transpose()?;
    let (frame, hand_mask, highlight) = {
        let live = session.live.lock().expect("live lock");
        let lf = live
            .as_ref()
            .ok_or_else(|| ApiError::unprocessable("no frame has been streamed in this session yet"))?;
        (lf.frame.clone(), lf.hand_mask.clone(), lf.highlight.clone())
    };
    let object_mask = match (body.condition, drawn) {
        (Condition::Naive, Some(_)) => return Err(CoreError::UnexpectedMask.into()),
        (Condition::Naive, None) => None,
        (Condition::InSitu, _) => Some(highlight.ok_or(CoreError::MaskRequired)?),
        (_, Some(bytes)) => Some(Mask::from_png(&bytes)?),
        (c, None) => return Err(ApiError::unprocessable(format!("condition {c} needs an annotation mask"))),
    };
    let mut st = session.lock();
    let category_id = body
        .category_id
        .or(st.active_category)
        .ok_or_else(|| ApiError::unprocessable("no category given and none active"))?;
    let sample = TeachingSample {
        sample_id: format!("s{:05}", session.next_sample.fetch_add(1, Ordering::Relaxed)),
        frame,
        category_id,
        object_mask,
        hand_mask: Some(hand_mask),
        captured_at: now_ms(),
        condition: body.condition,
    };
    sample.validate()?;
    if st.phase() == Phase::Assessing {
        session.move_to(&mut st, Phase::Teaching)?;
    }
    let sample_id = sample.sample_id.clone();
    let ev = st.add_sample(sample)?.clone();
    publish_session_event(&session.hub, &ev);
    let count = st.teaching_set().counts_per_category().get(&category_id).copied().unwrap_or(0);
    drop(st);
    session.schedule_refit();
    Ok((
        StatusCode::CREATED,
        Json(json!({ "sample_id": sample_id, "category_id": category_id, "condition": body.condition, "category_count": count })),
    ))
}

async fn delete_sample(
    State(app): State<Shared>,
    Path((id, sid)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let mut st = session.lock();
    let (removed, ev) = st.remove_sample(&sid)?;
    let ev = ev.clone();
    publish_session_event(&session.hub, &ev);
    drop(st);
    session.cache.lock().expect("cache lock").forget(&sid);
    session.schedule_refit();
    Ok(Json(json!({ "sample_id": removed.sample_id, "category_id": removed.category_id })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainBody {
    kind: Option<JobKind>,
    epochs: Option<usize>,
    seed: Option<u64>,
    use_masks: Option<bool>,
    background_suppression_prob: Option<f64>,
    /// Segmenter jobs: server-side manifest path.
    manifest: Option<PathBuf>,
    /// Segmenter jobs: network input side.
    resolution: Option<usize>,
}

async fn train(
    State(app): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<TrainingJob>)> {
    let body: TrainBody = parse_json(&body)?;
    let session = app.session(&id)?;
    let kind = body.kind.unwrap_or(JobKind::Classifier);

    let mut slot = session.job.lock().expect("job lock");
    if let Some(j) = slot.as_ref() {
        let j = j.lock().expect("job");
        if !j.status.is_finished() {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("job {} is still {:?}", j.id, j.status)));
        }
    }

    let work: Box<dyn FnOnce(&Arc<Mutex<TrainingJob>>) + Send> = match kind {
        JobKind::Classifier => {
            let mut config = app.config.classifier.clone();
            if let Some(e) = body.epochs {
                config.epochs = e;
            }
            if let Some(s) = body.seed {
                config.seed = s;
            }
            if let Some(m) = body.use_masks {
                config.use_masks = m;
            }
            if let Some(p) = body.background_suppression_prob {
                config.background_suppression_prob = p;
            } else if !config.use_masks {
                config.background_suppression_prob = 0.0;
            } else if config.background_suppression_prob == 0.0 {
                config.background_suppression_prob = ClsTrainConfig::masked(0.5).background_suppression_prob;
            }
            config.validate()?;
            let set = {
                let mut st = session.lock();
                check_trainable(st.teaching_set())?;
                session.move_to(&mut st, Phase::Training)?;
                st.snapshot()
            };
            let (app, session) = (app.clone(), session.clone());
            Box::new(move |job| run_classifier_job(&app, &session, job, &set, &config))
        }
        JobKind::Segmenter => {
            let path = body
                .manifest
                .ok_or_else(|| ApiError::unprocessable("segmenter jobs need a manifest path"))?;
            let mut config = SegTrainConfig::default();
            if let Some(e) = body.epochs {
                config.epochs = e;
            }
            if let Some(s) = body.seed {
                config.seed = s;
            }
            if let Some(r) = body.resolution {
                config.architecture = UNetConfig {
                    resolution: r,
                    ..config.architecture
                };
            }
            config.architecture.validate()?;
            let manifest = load_manifest(&path)?;
            let (app, session) = (app.clone(), session.clone());
            Box::new(move |job| {
                let result = train_from_manifest(&manifest, &config, |epoch, loss| {
                    progress(&session, job, (epoch + 1) as f64 / config.epochs as f64, json!({ "loss": loss }));
                });
                let outcome = result.and_then(|(model, report)| {
                    if let Some(dir) = &app.config.model_dir {
                        model.save(&dir.join(OBJECT_MODEL_DIR), Some(manifest.fingerprint.clone()), Some(report.clone()))?;
                    }
                    *app.models.objects.write().expect("models lock") = Some(Arc::new(model));
                    Ok(serde_json::to_value(&report)?)
                });
                finish(&session, job, outcome);
            })
        }
    };

    let job = Arc::new(Mutex::new(TrainingJob::new(app.fresh_id("job"), session.id.clone(), kind)));
    let snapshot = job.lock().expect("job").clone();
    app.jobs.write().expect("jobs lock").insert(snapshot.id.clone(), job.clone());
    *slot = Some(job.clone());
    drop(slot);
    session.hub.publish("job_progress", job_payload(&snapshot, json!({})));

    tokio::task::spawn_blocking(move || {
        {
            let mut j = job.lock().expect("job");
            j.advance(JobStatus::Running);
        }
        work(&job);
    });
    Ok((StatusCode::ACCEPTED, Json(snapshot)))
}

fn job_payload(job: &TrainingJob, extra: Value) -> Value {
    json!({
        "job_id": job.id,
        "kind": job.kind,
        "status": job.status,
        "progress": job.progress,
        "detail": extra,
    })
}

fn progress(session: &ApiSession, job: &Mutex<TrainingJob>, p: f64, detail: Value) {
    let snap = {
        let mut j = job.lock().expect("job");
        j.set_progress(p);
        j.clone()
    };
    session.hub.publish("job_progress", job_payload(&snap, detail));
}

fn finish(session: &ApiSession, job: &Mutex<TrainingJob>, outcome: teachkit_core::Result<Value>) {
    let snap = {
        let mut j = job.lock().expect("job");
        match outcome {
            Ok(report) => {
                j.report = Some(report);
                j.advance(JobStatus::Done);
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.advance(JobStatus::Failed);
            }
        }
        j.clone()
    };
    session.hub.publish("job_progress", job_payload(&snap, json!({})));
}

fn run_classifier_job(
    app: &AppState,
    session: &Arc<ApiSession>,
    job: &Arc<Mutex<TrainingJob>>,
    set: &TeachingSet,
    config: &ClsTrainConfig,
) {
    let result = train_classifier(set, config, |epoch, loss, acc| {
        progress(
            session,
            job,
            (epoch + 1) as f64 / config.epochs.max(1) as f64,
            json!({ "epoch": epoch, "loss": loss, "accuracy": acc }),
        );
    });
    let outcome = result.and_then(|(model, report)| {
        let fingerprint = model.fingerprint();
        if let Some(dir) = &app.config.model_dir {
            model.save(&dir.join("sessions").join(&session.id).join("classifier"))?;
        }
        *session.classifier.write().expect("classifier lock") = Some(Arc::new(model));
        let mut st = session.lock();
        st.latest_snapshot = Some(fingerprint.clone());
        session.move_to(&mut st, Phase::Assessing)?;
        let mut value = serde_json::to_value(&report)?;
        value["snapshot"] = json!(fingerprint);
        Ok(value)
    });
    if outcome.is_err() {
        let mut st = session.lock();
        if st.phase() == Phase::Training {
            let _ = session.move_to(&mut st, Phase::Assessing);
        }
    }
    let trained = outcome.is_ok();
    finish(session, job, outcome);
    if trained {
        // new embedding space: the projection has to be refit
        session.schedule_refit();
    }
}

async fn get_job(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<TrainingJob>> {
    app.job(&id).map(Json).ok_or_else(|| ApiError::not_found("job", &id))
}

#[derive(Deserialize)]
struct AssessBody {
    image: String,
    target: Option<CategoryId>,
}

async fn assess_frame(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(body): Json<AssessBody>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let model = session
        .classifier()
        .ok_or_else(|| ApiError::unprocessable("no trained classifier in this session"))?;
    let frame = app.decode_frame(&body.image)?;
    blocking(move || {
        let result = assess(&model, &frame, body.target)?;
        let (w, h) = result.saliency.dims();
        let gray: Vec<u8> = result.saliency.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        let summary = json!({
            "prediction": result.prediction,
            "target": result.target,
            "latency_ms": result.latency_ms,
        });
        session.hub.publish("assessment", summary.clone());
        let mut out = summary;
        out["overlay"] = json!(png_b64(overlay(&frame, &result.saliency)?.to_png())?);
        out["saliency"] = json!(png_b64(Mask::new(w, h, gray)?.to_png())?);
        Ok(out)
    })
    .await
    .map(Json)
}

async fn export(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<ExportBundle>> {
    let set = app.session(&id)?.teaching_set();
    blocking(move || Ok(export_bundle(&set)?)).await.map(Json)
}

#[derive(Deserialize)]
struct StreamQuery {
    last_seq: Option<u64>,
}

async fn events(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let session = app.session(&id)?;
    let header_seq = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse().ok());
    let sub = session.hub.subscribe(q.last_seq.or(header_seq));
    let stream = futures_util::stream::unfold(sub, |sub| async move {
        let env = sub.next().await?;
        let event = Event::default()
            .id(env.seq.to_string())
            .event(env.kind.as_str())
            .data(serde_json::to_string(env.as_ref()).expect("envelope serializes"));
        Some((Ok(event), sub))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Per-category counts implied by a sequence of stream envelopes.
pub fn replay_envelopes<'a>(envs: impl IntoIterator<Item = &'a crate::events::Envelope>) -> BTreeMap<CategoryId, usize> {
    let events: Vec<SessionEvent> = envs
        .into_iter()
        .filter(|e| matches!(e.kind.as_str(), "sample_added" | "sample_removed" | "category_added"))
        .filter_map(|e| serde_json::from_value(e.payload.clone()).ok())
        .collect();
    teachkit_core::session::replay_counts(&events)
}
