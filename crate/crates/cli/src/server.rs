//! Local HTTP service under `/v1`.
//!
//! Sessions hold an uploaded image and its pre-detections. Attack jobs run on
//! a per-session FIFO worker, so one session never runs two attacks at once,
//! while a shared semaphore bounds how many sessions attack concurrently.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{mpsc, Semaphore};
use vanish_core::attack::{run_attack, AttackConfig, AttackMode, SensitiveTarget, TraceRecord};
use vanish_core::detector::{detect, Detection, Detector};
use vanish_core::image::ImageTensor;
use vanish_core::metrics::{db_serde, psnr, ssim, SsimParams};

use crate::request::{resolve, AttackRequest, FieldErrors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Sessions attacking at the same time.
    pub workers: usize,
    /// When false a second job for a busy session is refused with 409.
    pub queueing: bool,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            workers: 1,
            queueing: true,
        }
    }
}

/// Box as shown to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionView {
    pub index: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub category: String,
    pub category_index: usize,
    pub score: f64,
}

pub fn views(detector: &dyn Detector, dets: &[Detection]) -> Vec<DetectionView> {
    dets.iter()
        .enumerate()
        .map(|(index, d)| DetectionView {
            index,
            x_min: d.geometry.x_min,
            y_min: d.geometry.y_min,
            x_max: d.geometry.x_max,
            y_max: d.geometry.y_max,
            category: detector.category_names()[d.category_index].clone(),
            category_index: d.category_index,
            score: d.score,
        })
        .collect()
}

struct Session {
    image: Arc<ImageTensor>,
    detections: Vec<Detection>,
    jobs: Vec<String>,
    queue: mpsc::UnboundedSender<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobResult {
    pub succeeded: bool,
    pub iterations_used: usize,
    pub detections: Vec<DetectionView>,
    #[serde(with = "db_serde")]
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip)]
    pub png: Arc<Vec<u8>>,
}

struct Job {
    session_id: String,
    request: AttackRequest,
    config: AttackConfig,
    target: Option<SensitiveTarget>,
    state: JobState,
    trace: Vec<TraceRecord>,
    error: Option<String>,
    result: Option<JobResult>,
}

struct Inner {
    detector: Arc<dyn Detector>,
    sessions: RwLock<HashMap<String, Session>>,
    jobs: RwLock<HashMap<String, Arc<Mutex<Job>>>>,
    slots: Semaphore,
    options: ServerOptions,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(detector: Arc<dyn Detector>, options: ServerOptions) -> Self {
        AppState(Arc::new(Inner {
            detector,
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            slots: Semaphore::new(options.workers.max(1)),
            options,
            next_id: AtomicU64::new(1),
        }))
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.0.next_id.fetch_add(1, Ordering::Relaxed))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/sessions/{id}/attacks", post(submit_attack))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/result", get(get_result))
        .route("/v1/jobs/{id}/result/image", get(get_result_image))
        .route("/v1/categories", get(categories))
        .with_state(state)
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn not_found(what: &str, id: &str) -> ApiError {
    ApiError(
        StatusCode::NOT_FOUND,
        json!({"error": format!("unknown {what} `{id}`")}),
    )
}

fn unprocessable(fields: FieldErrors) -> ApiError {
    ApiError(
        StatusCode::UNPROCESSABLE_ENTITY,
        json!({"error": "invalid parameters", "fields": fields}),
    )
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

async fn categories(State(state): State<AppState>) -> Json<serde_json::Value> {
    let d = &state.0.detector;
    Json(json!({
        "categories": d.category_names(),
        "background": d.background(),
    }))
}

#[derive(Deserialize)]
struct UploadQuery {
    threshold: Option<f64>,
}

async fn create_session(
    State(state): State<AppState>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let threshold = q.threshold.unwrap_or(AttackConfig::default().threshold);
    let image = ImageTensor::decode(&body)
        .map_err(|e| unprocessable(FieldErrors::from([("image".to_string(), e.to_string())])))?;
    let detector = state.0.detector.clone();
    let image = Arc::new(image);
    let img = image.clone();
    let detections =
        tokio::task::spawn_blocking(move || detect(detector.as_ref(), &img, threshold))
            .await
            .map_err(|e| {
                ApiError(
                    StatusCode::INTERNAL_SERVER_ERROR,
                    json!({"error": e.to_string()}),
                )
            })?
            .map_err(|e| {
                unprocessable(FieldErrors::from([(
                    "threshold".to_string(),
                    e.to_string(),
                )]))
            })?;

    let id = state.fresh_id("s");
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(session_worker(state.clone(), rx));
    let body = json!({
        "session_id": id,
        "width": image.width(),
        "height": image.height(),
        "threshold": threshold,
        "detections": views(state.0.detector.as_ref(), &detections),
    });
    state.0.sessions.write().expect("session table").insert(
        id,
        Session {
            image,
            detections,
            jobs: Vec::new(),
            queue: tx,
        },
    );
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn get_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let sessions = state.0.sessions.read().expect("session table");
    let s = sessions.get(&id).ok_or_else(|| not_found("session", &id))?;
    Ok(Json(json!({
        "session_id": id,
        "width": s.image.width(),
        "height": s.image.height(),
        "detections": views(state.0.detector.as_ref(), &s.detections),
        "jobs": s.jobs,
    })))
}

async fn submit_attack(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let request: AttackRequest = serde_json::from_slice(&body)
        .map_err(|e| unprocessable(FieldErrors::from([("body".to_string(), e.to_string())])))?;
    let mut sessions = state.0.sessions.write().expect("session table");
    let session = sessions
        .get_mut(&id)
        .ok_or_else(|| not_found("session", &id))?;
    let (config, target) =
        resolve(&request, state.0.detector.as_ref(), &session.detections).map_err(unprocessable)?;

    if !state.0.options.queueing {
        let jobs = state.0.jobs.read().expect("job table");
        let busy = session.jobs.iter().any(|j| {
            jobs.get(j)
                .is_some_and(|j| matches!(lock(j).state, JobState::Queued | JobState::Running))
        });
        if busy {
            return Err(ApiError(
                StatusCode::CONFLICT,
                json!({"error": format!("session `{id}` already has an active job")}),
            ));
        }
    }

    let job_id = state.fresh_id("j");
    state.0.jobs.write().expect("job table").insert(
        job_id.clone(),
        Arc::new(Mutex::new(Job {
            session_id: id.clone(),
            request,
            config,
            target,
            state: JobState::Queued,
            trace: Vec::new(),
            error: None,
            result: None,
        })),
    );
    session.jobs.push(job_id.clone());
    if session.queue.send(job_id.clone()).is_err() {
        return Err(ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({"error": "session worker stopped"}),
        ));
    }
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"job_id": job_id, "state": JobState::Queued})),
    )
        .into_response())
}

async fn session_worker(state: AppState, mut rx: mpsc::UnboundedReceiver<String>) {
    while let Some(job_id) = rx.recv().await {
        let Ok(_permit) = state.0.slots.acquire().await else {
            return;
        };
        let st = state.clone();
        let outcome = tokio::task::spawn_blocking(move || execute(&st, &job_id)).await;
        if let Err(e) = outcome {
            log::error!("attack worker panicked: {e}");
        }
    }
}

fn execute(state: &AppState, job_id: &str) {
    let Some(job) = state.0.jobs.read().expect("job table").get(job_id).cloned() else {
        return;
    };
    let (session_id, config, target) = {
        let mut j = lock(&job);
        j.state = JobState::Running;
        (j.session_id.clone(), j.config.clone(), j.target.clone())
    };
    let image = match state
        .0
        .sessions
        .read()
        .expect("session table")
        .get(&session_id)
    {
        Some(s) => s.image.clone(),
        None => {
            let mut j = lock(&job);
            j.state = JobState::Failed;
            j.error = Some("session disappeared".into());
            return;
        }
    };
    let detector = state.0.detector.as_ref();
    let trace_job = job.clone();
    let run = run_attack(detector, &image, &config, target.as_ref(), &mut |rec, _| {
        lock(&trace_job).trace.push(*rec);
    })
    .and_then(|r| {
        let psnr = psnr(&image, &r.adversarial_image, 1.0)?;
        let ssim = ssim(&image, &r.adversarial_image, &SsimParams::default())?;
        Ok(JobResult {
            succeeded: r.succeeded,
            iterations_used: r.iterations_used,
            detections: views(detector, &r.final_detections),
            psnr,
            ssim,
            png: Arc::new(r.adversarial_image.encode_png()),
        })
    });
    let mut j = lock(&job);
    match run {
        Ok(result) => {
            j.result = Some(result);
            j.state = JobState::Done;
        }
        Err(e) => {
            j.error = Some(e.to_string());
            j.state = JobState::Failed;
        }
    }
}

fn find_job(state: &AppState, id: &str) -> Result<Arc<Mutex<Job>>, ApiError> {
    state
        .0
        .jobs
        .read()
        .expect("job table")
        .get(id)
        .cloned()
        .ok_or_else(|| not_found("job", id))
}

async fn get_job(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let job = find_job(&state, &id)?;
    let j = lock(&job);
    Ok(Json(json!({
        "job_id": id,
        "session_id": j.session_id,
        "state": j.state,
        "parameters": j.request,
        "trace": j.trace,
        "error": j.error,
    })))
}

fn finished(state: &AppState, id: &str) -> Result<JobResult, ApiError> {
    let job = find_job(state, id)?;
    let j = lock(&job);
    match (&j.state, &j.result) {
        (JobState::Done, Some(r)) => Ok(r.clone()),
        (JobState::Failed, _) => Err(ApiError(
            StatusCode::CONFLICT,
            json!({"error": "job failed", "reason": j.error, "state": j.state}),
        )),
        _ => Err(ApiError(
            StatusCode::CONFLICT,
            json!({"error": "job has not finished", "state": j.state}),
        )),
    }
}

async fn get_result(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let r = finished(&state, &id)?;
    let mut body = serde_json::to_value(&r).map_err(|e| {
        ApiError(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({"error": e.to_string()}),
        )
    })?;
    body["job_id"] = json!(id);
    body["image_png_base64"] =
        json!(base64::engine::general_purpose::STANDARD.encode(r.png.as_slice()));
    Ok(Json(body))
}

async fn get_result_image(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let r = finished(&state, &id)?;
    Ok((
        [(header::CONTENT_TYPE, "image/png")],
        r.png.as_ref().clone(),
    )
        .into_response())
}

/// Mode of a stored job, for tests and logs.
pub fn job_mode(state: &AppState, id: &str) -> Option<AttackMode> {
    state
        .0
        .jobs
        .read()
        .ok()?
        .get(id)
        .map(|j| lock(j).config.mode)
}
