//! HTTP annotation API for live single-stimulus studies.
//!
//! ```text
//! POST /api/session                  {subject_id}          -> token, order
//! GET  /api/session/{token}/next                           -> next stimulus
//! POST /api/session/{token}/rating   {sample_id, rating}   -> ack
//! GET  /api/study/progress                                 -> completion counts
//! POST /api/study/close                                    -> stops accepting ratings
//! GET  /api/image/{sample_id}                              -> rendered stimulus
//! ```
//!
//! Ratings are appended to `ratings.jsonl` by whichever request holds the
//! write lock, so the file has a single writer at any time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iqa_troubleshoot::datapool::Sample;
use iqa_troubleshoot::io;
use iqa_troubleshoot::rng;
use iqa_troubleshoot::subjective::{
    presentation_order, study_progress, RatingFlag, RatingRecord, StudyPlan, StudyProgress,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::render::render_sample;

/// Everything the service needs to run one study.
pub struct StudySetup {
    pub plan: StudyPlan,
    /// Samples of the plan, for rendering.
    pub samples: Vec<Sample>,
    pub study_seed: u64,
    pub min_subjects: usize,
    pub ratings_path: PathBuf,
}

struct Session {
    subject_id: String,
    order: Vec<String>,
}

#[derive(Default)]
struct Ledger {
    sessions: HashMap<String, Session>,
    opened: usize,
    records: Vec<RatingRecord>,
    rated: BTreeSet<(String, String)>,
}

pub struct Study {
    plan: StudyPlan,
    in_plan: BTreeSet<String>,
    samples: HashMap<String, Sample>,
    study_seed: u64,
    min_subjects: usize,
    ledger: RwLock<Ledger>,
    writer: std::sync::Mutex<File>,
    closed: AtomicBool,
}

pub type Shared = Arc<Study>;

impl Study {
    /// Opens the study, resuming from ratings already on disk.
    pub fn open(setup: StudySetup) -> Result<Shared> {
        let mut ledger = Ledger::default();
        if setup.ratings_path.exists() {
            let records: Vec<RatingRecord> = io::read_jsonl(&setup.ratings_path)?;
            for r in records {
                ledger.rated.insert((r.subject_id.clone(), r.sample_id.clone()));
                ledger.records.push(r);
            }
        }
        if let Some(dir) = setup.ratings_path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&setup.ratings_path)
            .with_context(|| format!("opening {}", setup.ratings_path.display()))?;
        let in_plan: BTreeSet<String> = setup.plan.samples.iter().cloned().collect();
        Ok(Arc::new(Study {
            samples: setup
                .samples
                .into_iter()
                .filter(|s| in_plan.contains(&s.id))
                .map(|s| (s.id.clone(), s))
                .collect(),
            in_plan,
            plan: setup.plan,
            study_seed: setup.study_seed,
            min_subjects: setup.min_subjects,
            ledger: RwLock::new(ledger),
            writer: std::sync::Mutex::new(writer),
            closed: AtomicBool::new(false),
        }))
    }

    pub fn progress(&self) -> StudyProgress {
        let ledger = self.ledger.read().expect("ledger lock");
        study_progress(&self.plan, &ledger.records, self.min_subjects)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

pub fn router(study: Shared) -> Router {
    Router::new()
        .route("/api/session", post(open_session))
        .route("/api/session/{token}/next", get(next_item))
        .route("/api/session/{token}/rating", post(submit_rating))
        .route("/api/study/progress", get(progress))
        .route("/api/study/close", post(close))
        .route("/api/image/{sample_id}", get(image))
        .with_state(study)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Deserialize)]
pub struct SessionRequest {
    pub subject_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionResponse {
    pub token: String,
    pub subject_id: String,
    pub order: Vec<String>,
}

async fn open_session(State(study): State<Shared>, Json(req): Json<SessionRequest>) -> Response {
    if study.is_closed() {
        return error(StatusCode::CONFLICT, "study closed");
    }
    let subject = req.subject_id.trim();
    if subject.is_empty()
        || subject.len() > 64
        || !subject.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
    {
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "subject_id must be 1-64 characters of [A-Za-z0-9._-]",
        );
    }
    let order = presentation_order(&study.plan.samples, subject, study.study_seed);
    let mut ledger = study.ledger.write().expect("ledger lock");
    ledger.opened += 1;
    let token = rng::digest_hex(
        &[subject, &ledger.opened.to_string(), &study.study_seed.to_string()],
        24,
    );
    ledger.sessions.insert(
        token.clone(),
        Session {
            subject_id: subject.to_string(),
            order: order.clone(),
        },
    );
    Json(SessionResponse {
        token,
        subject_id: subject.to_string(),
        order,
    })
    .into_response()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub done: usize,
    pub total: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NextItem {
    pub sample_id: Option<String>,
    pub display: Option<String>,
    pub progress: Progress,
    pub exhausted: bool,
}

async fn next_item(State(study): State<Shared>, UrlPath(token): UrlPath<String>) -> Response {
    let ledger = study.ledger.read().expect("ledger lock");
    let Some(session) = ledger.sessions.get(&token) else {
        return error(StatusCode::NOT_FOUND, "unknown session token");
    };
    let is_rated = |id: &String| ledger.rated.contains(&(session.subject_id.clone(), id.clone()));
    let done = session.order.iter().filter(|id| is_rated(id)).count();
    let progress = Progress {
        done,
        total: session.order.len(),
    };
    let next = session.order.iter().find(|id| !is_rated(id)).cloned();
    Json(NextItem {
        display: next.as_ref().map(|id| format!("/api/image/{id}")),
        exhausted: next.is_none(),
        sample_id: next,
        progress,
    })
    .into_response()
}

#[derive(Deserialize)]
pub struct RatingRequest {
    pub sample_id: String,
    pub rating: f64,
}

async fn submit_rating(
    State(study): State<Shared>,
    UrlPath(token): UrlPath<String>,
    Json(req): Json<RatingRequest>,
) -> Response {
    let mut ledger = study.ledger.write().expect("ledger lock");
    let Some(session) = ledger.sessions.get(&token) else {
        return error(StatusCode::NOT_FOUND, "unknown session token");
    };
    if study.is_closed() {
        return error(StatusCode::CONFLICT, "study closed");
    }
    if !req.rating.is_finite() || !(0.0..=100.0).contains(&req.rating) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "rating must lie in [0, 100]");
    }
    if !study.in_plan.contains(&req.sample_id) {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "sample is not part of this study");
    }
    let subject_id = session.subject_id.clone();
    let key = (subject_id.clone(), req.sample_id.clone());
    if ledger.rated.contains(&key) {
        return Json(json!({ "status": "duplicate" })).into_response();
    }
    let record = RatingRecord {
        pair_id: study.plan.pair_of(&req.sample_id),
        sample_id: req.sample_id,
        subject_id,
        rating: req.rating,
        flag: RatingFlag::Kept,
    };
    {
        let mut file = study.writer.lock().expect("writer lock");
        if let Err(e) = io::append_jsonl(&mut file, &record) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    ledger.rated.insert(key);
    ledger.records.push(record);
    Json(json!({ "status": "stored" })).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ProgressView {
    pub per_subject: BTreeMap<String, usize>,
    pub rated_samples: usize,
    pub total_samples: usize,
    pub complete: bool,
    pub closed: bool,
}

fn progress_view(study: &Study) -> ProgressView {
    let p = study.progress();
    ProgressView {
        per_subject: p.per_subject,
        rated_samples: p.rated_samples,
        total_samples: p.total_samples,
        complete: p.complete,
        closed: study.is_closed(),
    }
}

async fn progress(State(study): State<Shared>) -> Response {
    Json(progress_view(&study)).into_response()
}

async fn close(State(study): State<Shared>) -> Response {
    study.closed.store(true, Ordering::SeqCst);
    Json(progress_view(&study)).into_response()
}

async fn image(State(study): State<Shared>, UrlPath(sample_id): UrlPath<String>) -> Response {
    let Some(sample) = study.samples.get(&sample_id) else {
        return error(StatusCode::NOT_FOUND, "unknown sample");
    };
    match render_sample(sample) {
        Ok(r) => ([(header::CONTENT_TYPE, r.content_type)], r.bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Serves `study` on `addr` until the study is closed or the process is
/// interrupted.
pub async fn serve(study: Shared, addr: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("annotation service listening on http://{}", listener.local_addr()?);
    let watch = study.clone();
    axum::serve(listener, router(study))
        .with_graceful_shutdown(async move {
            let closed = async {
                while !watch.is_closed() {
                    tokio::time::sleep(std::time::Duration::from_millis(200)).await;
                }
            };
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = closed => {}
            }
        })
        .await?;
    Ok(())
}

pub fn ratings_path(round_dir: &Path) -> PathBuf {
    round_dir.join("ratings.jsonl")
}
