//! Session API over HTTP: create an episode, fetch the accumulated sketch, send
//! feedback boxes as a person playing the receiver, answer, and read the trace.
//!
//! In human mode no response carries the image, the scene description or the
//! answer before the episode is finalized.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use isqa_core::autodiff::Tensor;
use isqa_core::feedback::{FeedbackBox, FeedbackConfig, FeedbackSketch, BOX_COST};
use isqa_core::protocol::{
    budget_schedule, Episode, EpisodeConfig, EpisodeTrace, ReceiverMode, RoundTrace, SchedulePolicy,
};
use isqa_core::sender::pixel_cap;
use isqa_core::shapeworld::{
    answer_index, answer_word, derive_seed, generate_question, generate_scene, render, Dataset, QAPair,
    SceneConfig, ANSWERS,
};
use isqa_core::sketch::SparseSketch;
use isqa_core::training::Checkpoint;
use isqa_core::Error;

#[derive(Clone, Debug)]
pub struct ServerOptions {
    /// Mode used when a creation request does not name one.
    pub mode: ReceiverMode,
    /// Root of the scene seeds drawn for sessions that name neither a record nor a seed.
    pub seed: u64,
    /// Where finalized traces are written, one JSON file per session.
    pub trace_dir: Option<PathBuf>,
    pub default_budget: f64,
    pub default_rounds: usize,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            mode: ReceiverMode::Human,
            seed: 0,
            trace_dir: None,
            default_budget: 0.1,
            default_rounds: 2,
        }
    }
}

struct Session {
    id: u64,
    image: Tensor,
    qa: QAPair,
    episode: Option<Episode>,
    trace: Option<EpisodeTrace>,
}

impl Session {
    fn mode(&self) -> ReceiverMode {
        match (&self.episode, &self.trace) {
            (Some(e), _) => e.mode(),
            (None, Some(t)) => t.mode,
            (None, None) => unreachable!("a session holds an episode or its trace"),
        }
    }
}

/// Read-only model state plus the open sessions.
pub struct AppState {
    checkpoint: Option<Checkpoint>,
    dataset: Option<Dataset>,
    options: ServerOptions,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<u64, Arc<tokio::sync::Mutex<Session>>>>,
}

impl AppState {
    pub fn new(checkpoint: Option<Checkpoint>, dataset: Option<Dataset>, options: ServerOptions) -> Self {
        Self {
            checkpoint,
            dataset,
            options,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    fn session(&self, id: u64) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session table lock")
            .get(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub mode: Option<ReceiverMode>,
    /// Index into the evaluation split of the loaded dataset.
    pub record: Option<usize>,
    /// Scene seed for a freshly generated scene.
    pub seed: Option<u64>,
    /// Explicit per-round budget fractions; overrides `budget` and `rounds`.
    pub budgets: Option<Vec<f64>>,
    /// Total budget fraction split across `rounds` by `policy`.
    pub budget: Option<f64>,
    pub rounds: Option<usize>,
    pub policy: Option<SchedulePolicy>,
    pub a: Option<f64>,
    pub h_max: Option<usize>,
    pub l: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub id: u64,
    pub mode: ReceiverMode,
    pub question: String,
    pub height: usize,
    pub width: usize,
    pub rounds: usize,
    pub budgets: Vec<f64>,
    /// Most pixels the sender may transmit over the whole episode.
    pub pixel_budget: usize,
    pub h_max: usize,
    pub box_cost: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SketchResponse {
    pub id: u64,
    pub round: usize,
    pub rounds: usize,
    /// Pixels transmitted in the latest round.
    pub pixels: usize,
    pub accumulated: SparseSketch,
    pub latest: SparseSketch,
    /// Ledger total so far, including the latest round.
    pub spent: usize,
    pub pixel_budget_remaining: usize,
    /// The receiver may still send boxes for this round.
    pub feedback_open: bool,
    pub finalized: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub boxes: Vec<FeedbackBox>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub charged: usize,
    pub spent: usize,
    /// Round the sender has just drawn, or none when sketching is over.
    pub next_round: Option<usize>,
    pub closed: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub answer: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnswerResponse {
    pub correct: bool,
    pub answer: String,
    pub ground_truth: String,
    pub ledger_total: usize,
    pub rounds: usize,
    pub digest: String,
}

/// Rounds played so far; the full trace (with the answer) once finalized.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TraceResponse {
    Open {
        id: u64,
        mode: ReceiverMode,
        question: String,
        rounds: Vec<RoundTrace>,
        spent: usize,
    },
    Finalized {
        id: u64,
        trace: EpisodeTrace,
    },
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/answers", get(list_answers))
        .route("/episodes", post(create_episode))
        .route("/episodes/{id}/sketch", get(get_sketch))
        .route("/episodes/{id}/feedback", post(post_feedback))
        .route("/episodes/{id}/answer", post(post_answer))
        .route("/episodes/{id}/trace", get(get_trace))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn list_answers() -> Json<Vec<&'static str>> {
    Json(ANSWERS.to_vec())
}

fn parse<T: for<'de> Deserialize<'de>>(body: &[u8], status: StatusCode) -> ApiResult<T> {
    let body = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ApiError::new(status, format!("bad request body: {e}")))
}

fn bad_request(e: Error) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, e.to_string())
}

async fn create_episode(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let Some(ck) = &state.checkpoint else {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"));
    };
    let req: CreateRequest = parse(&body, StatusCode::BAD_REQUEST)?;
    let opts = &state.options;
    let budgets = match req.budgets {
        Some(b) => b,
        None => budget_schedule(
            req.budget.unwrap_or(opts.default_budget),
            req.rounds.unwrap_or(opts.default_rounds),
            req.policy.unwrap_or(SchedulePolicy::Even),
        )
        .map_err(bad_request)?,
    };
    let defaults = FeedbackConfig::default();
    let config = EpisodeConfig {
        rounds: budgets.len(),
        budgets,
        a: req.a.unwrap_or(ck.a),
        feedback: FeedbackConfig {
            l: req.l.unwrap_or(defaults.l),
            h_max: req.h_max.unwrap_or(defaults.h_max),
        },
    };
    config.validate().map_err(bad_request)?;

    let id = state.next_id.fetch_add(1, Ordering::SeqCst);
    let (image, qa) = match (req.record, req.seed) {
        (Some(_), Some(_)) => {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "give either record or seed, not both"));
        }
        (Some(i), None) => {
            let ds = state
                .dataset
                .as_ref()
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "no dataset loaded; pass a seed instead"))?;
            let r = ds.eval.get(i).ok_or_else(|| {
                ApiError::new(StatusCode::BAD_REQUEST, format!("record {i} outside the {} eval records", ds.eval.len()))
            })?;
            (r.image(), r.qa.clone())
        }
        (None, seed) => {
            let scene_seed = seed.unwrap_or_else(|| derive_seed(opts.seed, id));
            let (_, scene) = generate_scene(scene_seed, &SceneConfig::default()).map_err(ApiError::internal)?;
            let qa = generate_question(&scene, derive_seed(scene_seed, u64::MAX)).map_err(ApiError::internal)?;
            (render(&scene), qa)
        }
    };
    let (h, w) = ck.sender.canvas();
    if image.shape()[..2] != [h, w] {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "scene canvas does not match the checkpoint"));
    }
    let mode = req.mode.unwrap_or(opts.mode);
    let episode = Episode::new(config.clone(), mode, h, w).map_err(bad_request)?;
    let resp = CreateResponse {
        id,
        mode,
        question: qa.text(),
        height: h,
        width: w,
        rounds: config.rounds,
        pixel_budget: config.budgets.iter().map(|&b| pixel_cap(b, h * w)).sum(),
        budgets: config.budgets,
        h_max: config.feedback.h_max,
        box_cost: BOX_COST,
    };
    let session = Session {
        id,
        image,
        qa,
        episode: Some(episode),
        trace: None,
    };
    state
        .sessions
        .lock()
        .expect("session table lock")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(resp)))
}

fn conflict(msg: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, msg)
}

/// Plays the first round on demand; a machine session plays to the end and finalizes.
fn advance(state: &AppState, s: &mut Session) -> ApiResult<()> {
    let ck = state.checkpoint.as_ref().expect("sessions exist only with a checkpoint");
    let Some(ep) = s.episode.as_mut() else { return Ok(()) };
    match ep.mode() {
        ReceiverMode::Human => {
            if ep.rounds_played() == 0 && ep.can_continue() {
                ep.sender_turn(&ck.sender, &s.image).map_err(ApiError::internal)?;
            }
        }
        ReceiverMode::Machine => {
            while ep.can_continue() {
                ep.sender_turn(&ck.sender, &s.image).map_err(ApiError::internal)?;
                let more = ep.rounds_played() < ep.config().rounds;
                let fb = ep.config().feedback;
                let reply = ck
                    .receiver
                    .respond(&ep.state().accumulated, &s.qa.question, more.then_some(&fb))
                    .map_err(ApiError::internal)?;
                ep.receiver_turn(reply).map_err(ApiError::internal)?;
            }
            finalize(state, s, None)?;
        }
    }
    Ok(())
}

fn finalize(state: &AppState, s: &mut Session, answer: Option<usize>) -> ApiResult<()> {
    let ep = s.episode.take().expect("open session");
    let trace = ep.finish(&s.qa, answer).map_err(ApiError::internal)?;
    if let Some(dir) = &state.options.trace_dir {
        let write = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(dir.join(format!("{:06}.json", s.id)), trace.to_json()));
        write.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("writing trace: {e}")))?;
    }
    s.trace = Some(trace);
    Ok(())
}

fn sparse(payload: &str) -> ApiResult<SparseSketch> {
    let bytes = hex::decode(payload).map_err(|e| ApiError::internal(Error::Format(e.to_string())))?;
    SparseSketch::from_bytes(&bytes).map_err(ApiError::internal)
}

async fn get_sketch(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Json<SketchResponse>> {
    let session = state.session(id)?;
    let mut s = session.lock().await;
    advance(&state, &mut s)?;
    let (rounds, played, spent, feedback_open, finalized, budgets): (usize, &[RoundTrace], usize, bool, bool, &[f64]) =
        match (&s.episode, &s.trace) {
            (Some(ep), _) => (
                ep.config().rounds,
                ep.rounds(),
                ep.spent(),
                ep.awaiting_reply() && ep.rounds_played() < ep.config().rounds,
                false,
                &ep.config().budgets,
            ),
            (None, Some(t)) => (t.config.rounds, &t.rounds, t.ledger.total, false, true, &t.config.budgets),
            (None, None) => unreachable!("a session holds an episode or its trace"),
        };
    let last = played.last().ok_or_else(|| conflict("no round has been drawn"))?;
    let n = s.image.shape()[0] * s.image.shape()[1];
    let cap: usize = budgets.iter().map(|&b| pixel_cap(b, n)).sum();
    let sent: usize = played.iter().map(|r| r.pixels).sum();
    Ok(Json(SketchResponse {
        id,
        round: last.round,
        rounds,
        pixels: last.pixels,
        accumulated: sparse(&last.accumulated)?,
        latest: sparse(&last.sketch)?,
        spent,
        pixel_budget_remaining: cap.saturating_sub(sent),
        feedback_open,
        finalized,
    }))
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<FeedbackResponse>> {
    let session = state.session(id)?;
    let mut s = session.lock().await;
    if s.mode() != ReceiverMode::Human {
        return Err(conflict("feedback is only accepted from a human receiver"));
    }
    let (h, w) = (s.image.shape()[0], s.image.shape()[1]);
    let ep = s.episode.as_mut().ok_or_else(|| conflict("episode is finalized"))?;
    if ep.is_closed() {
        return Err(conflict("sketching is over; only an answer is accepted"));
    }
    if !ep.awaiting_reply() {
        return Err(conflict("fetch the sketch before sending feedback"));
    }
    if ep.rounds_played() >= ep.config().rounds {
        return Err(conflict("no rounds remain"));
    }
    let req: FeedbackRequest = parse(&body, StatusCode::UNPROCESSABLE_ENTITY)?;
    let fb = FeedbackSketch {
        height: h,
        width: w,
        boxes: req.boxes,
    };
    let unprocessable = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m);
    if fb.len() > ep.config().feedback.h_max {
        return Err(unprocessable(format!("{} boxes exceed h_max={}", fb.len(), ep.config().feedback.h_max)));
    }
    fb.validate().map_err(|e| unprocessable(e.to_string()))?;
    let charged = fb.cost();
    ep.human_turn(fb).map_err(|e| unprocessable(e.to_string()))?;
    let ck = state.checkpoint.as_ref().expect("sessions exist only with a checkpoint");
    let next_round = if ep.can_continue() {
        let image = s.image.clone();
        let ep = s.episode.as_mut().expect("still open");
        Some(ep.sender_turn(&ck.sender, &image).map_err(ApiError::internal)?.round)
    } else {
        None
    };
    let ep = s.episode.as_ref().expect("still open");
    Ok(Json(FeedbackResponse {
        charged,
        spent: ep.spent(),
        next_round,
        closed: ep.is_closed(),
    }))
}

async fn post_answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    body: Bytes,
) -> ApiResult<Json<AnswerResponse>> {
    let session = state.session(id)?;
    let mut s = session.lock().await;
    if s.mode() != ReceiverMode::Human {
        return Err(conflict("the machine receiver answers for itself"));
    }
    if s.episode.is_none() {
        return Err(conflict("episode is finalized"));
    }
    let req: AnswerRequest = parse(&body, StatusCode::UNPROCESSABLE_ENTITY)?;
    let word = req.answer.trim().to_lowercase();
    let index = answer_index(&word).ok_or_else(|| {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("{:?} is not an answer word", req.answer))
    })?;
    finalize(&state, &mut s, Some(index))?;
    let t = s.trace.as_ref().expect("just finalized");
    Ok(Json(AnswerResponse {
        correct: t.correct,
        answer: word,
        ground_truth: answer_word(t.ground_truth).unwrap_or("?").to_string(),
        ledger_total: t.ledger.total,
        rounds: t.rounds.len(),
        digest: t.digest(),
    }))
}

async fn get_trace(State(state): State<Arc<AppState>>, Path(id): Path<u64>) -> ApiResult<Json<TraceResponse>> {
    let session = state.session(id)?;
    let s = session.lock().await;
    Ok(Json(match (&s.episode, &s.trace) {
        (Some(ep), _) => TraceResponse::Open {
            id,
            mode: ep.mode(),
            question: s.qa.text(),
            rounds: ep.rounds().to_vec(),
            spent: ep.spent(),
        },
        (None, Some(t)) => TraceResponse::Finalized { id, trace: t.clone() },
        (None, None) => unreachable!("a session holds an episode or its trace"),
    }))
}
