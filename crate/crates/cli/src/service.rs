//! HTTP annotation service over a pre-generated queue.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use advex::data::annotation::{append_annotation, read_annotation_log, ANNOTATION_VERSION};
use advex::data::{AnnotationRecord, Decision};
use advex::tensor::Tensor;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::queue::QueueItem;

pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);
pub const AETN_MIME: &str = "application/x-aetn";
const ANONYMOUS: &str = "anonymous";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub lease: Duration,
    /// Let several annotators decide the same item, once each.
    pub allow_overlap: bool,
    pub log_path: PathBuf,
}

struct Inner {
    items: Vec<QueueItem>,
    index: HashMap<String, usize>,
    /// Decisions per item, keyed by annotator.
    decisions: Vec<BTreeMap<String, Decision>>,
    records: Vec<AnnotationRecord>,
    /// Live leases per item: annotator and expiry.
    leases: Vec<Vec<(String, Instant)>>,
}

pub struct AppState {
    config: ServiceConfig,
    inner: Mutex<Inner>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    /// Items decided by at least two annotators.
    pub shared: usize,
    /// Shared items on which every annotator gave the same decision.
    pub agreeing: usize,
    pub rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub decided: usize,
    pub remaining: usize,
    pub records: usize,
    pub counts: BTreeMap<String, usize>,
    pub annotators: BTreeMap<String, usize>,
    pub agreement: AgreementStats,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Submission {
    id: String,
    decision: Decision,
    #[serde(default)]
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: Option<String>,
}

#[derive(Deserialize)]
struct ImageQuery {
    variant: Option<String>,
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

impl Inner {
    fn decide(&mut self, idx: usize, rec: AnnotationRecord) {
        self.decisions[idx].insert(rec.annotator.clone(), rec.decision);
        self.leases[idx].retain(|(a, _)| *a != rec.annotator);
        self.records.push(rec);
    }

    fn prune(&mut self, now: Instant) {
        for l in &mut self.leases {
            l.retain(|(_, until)| *until > now);
        }
    }

    fn open_for(&self, idx: usize, annotator: &str, overlap: bool) -> bool {
        if overlap {
            !self.decisions[idx].contains_key(annotator)
        } else {
            self.decisions[idx].is_empty()
        }
    }
}

impl AppState {
    /// Build the service state, replaying any existing annotation log.
    pub fn new(items: Vec<QueueItem>, config: ServiceConfig) -> Result<Self> {
        let index = items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        let n = items.len();
        let mut inner = Inner {
            items,
            index,
            decisions: vec![BTreeMap::new(); n],
            records: Vec::new(),
            leases: vec![Vec::new(); n],
        };
        if config.log_path.exists() {
            for rec in read_annotation_log(&config.log_path)? {
                let Some(&idx) = inner.index.get(&rec.id) else {
                    return Err(CliError::Invalid(format!("log refers to unknown item {}", rec.id)));
                };
                if !inner.open_for(idx, &rec.annotator, config.allow_overlap) {
                    return Err(CliError::Invalid(format!("log decides item {} twice", rec.id)));
                }
                inner.decide(idx, rec);
            }
        }
        Ok(Self {
            config,
            inner: Mutex::new(inner),
        })
    }

    pub fn progress(&self) -> Progress {
        let inner = self.inner.lock().unwrap();
        let mut counts: BTreeMap<String, usize> = Decision::ALL.iter().map(|d| (d.name().to_string(), 0)).collect();
        let mut annotators = BTreeMap::new();
        for r in &inner.records {
            *counts.get_mut(r.decision.name()).unwrap() += 1;
            *annotators.entry(r.annotator.clone()).or_insert(0) += 1;
        }
        let decided = inner.decisions.iter().filter(|d| !d.is_empty()).count();
        let shared: Vec<_> = inner.decisions.iter().filter(|d| d.len() >= 2).collect();
        let agreeing = shared
            .iter()
            .filter(|d| {
                let mut v = d.values();
                let first = v.next().unwrap();
                v.all(|x| x == first)
            })
            .count();
        Progress {
            total: inner.items.len(),
            decided,
            remaining: inner.items.len() - decided,
            records: inner.records.len(),
            counts,
            annotators,
            agreement: AgreementStats {
                shared: shared.len(),
                agreeing,
                rate: (!shared.is_empty()).then(|| agreeing as f64 / shared.len() as f64),
            },
        }
    }

    fn next(&self, annotator: &str, now: Instant) -> std::result::Result<serde_json::Value, bool> {
        let overlap = self.config.allow_overlap;
        let mut inner = self.inner.lock().unwrap();
        inner.prune(now);
        let until = now + self.config.lease;
        let held = (0..inner.items.len()).find(|&i| {
            inner.open_for(i, annotator, overlap) && inner.leases[i].iter().any(|(a, _)| a == annotator)
        });
        let pick = held.or_else(|| {
            (0..inner.items.len()).find(|&i| {
                inner.open_for(i, annotator, overlap) && (overlap || inner.leases[i].is_empty())
            })
        });
        let Some(i) = pick else {
            // True when undecided items exist but are all leased to others.
            let waiting = (0..inner.items.len()).any(|i| inner.open_for(i, annotator, overlap));
            return Err(waiting);
        };
        inner.leases[i].retain(|(a, _)| a != annotator);
        inner.leases[i].push((annotator.to_string(), until));
        let it = &inner.items[i];
        let shape = it.adversarial.as_ref().map(|t| t.shape().to_vec()).unwrap_or_default();
        Ok(json!({
            "id": it.id,
            "source_example_id": it.source_example_id,
            "original_label": it.original_label,
            "predicted_adversarial_class": it.predicted_adversarial_class,
            "prediction": it.prediction,
            "shape": shape,
            "original_image": format!("/api/image/{}?variant=original", it.id),
            "adversarial_image": format!("/api/image/{}", it.id),
            "lease_seconds": self.config.lease.as_secs_f64(),
        }))
    }

    fn submit(&self, body: &[u8]) -> Response {
        let sub: Submission = match serde_json::from_slice(body) {
            Ok(s) => s,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed annotation: {e}")),
        };
        let annotator = sub.annotator.filter(|a| !a.trim().is_empty()).unwrap_or_else(|| ANONYMOUS.into());
        let mut inner = self.inner.lock().unwrap();
        let Some(&idx) = inner.index.get(&sub.id) else {
            return error(StatusCode::NOT_FOUND, format!("unknown item {}", sub.id));
        };
        if !inner.open_for(idx, &annotator, self.config.allow_overlap) {
            return error(StatusCode::CONFLICT, format!("item {} already decided", sub.id));
        }
        let it = &inner.items[idx];
        let rec = AnnotationRecord {
            v: ANNOTATION_VERSION,
            id: it.id.clone(),
            source_example_id: it.source_example_id.clone(),
            adversarial_image: it.adversarial_image.clone(),
            original_label: it.original_label,
            predicted_adversarial_class: it.predicted_adversarial_class,
            decision: sub.decision,
            annotator,
            timestamp: now_secs(),
        };
        if let Err(e) = append_annotation(&self.config.log_path, &rec) {
            return error(StatusCode::INTERNAL_SERVER_ERROR, format!("could not persist annotation: {e}"));
        }
        inner.decide(idx, rec.clone());
        (StatusCode::OK, Json(rec)).into_response()
    }

    fn image(&self, id: &str, variant: &str, aetn: bool) -> Response {
        let inner = self.inner.lock().unwrap();
        let Some(&idx) = inner.index.get(id) else {
            return error(StatusCode::NOT_FOUND, format!("unknown item {id}"));
        };
        let it = &inner.items[idx];
        let (orig, adv) = (it.original.as_ref().unwrap(), it.adversarial.as_ref().unwrap());
        let img = match variant {
            "adversarial" => adv.clone(),
            "original" => orig.clone(),
            "difference" => match adv.zip_map(orig, |a, b| a - b) {
                Ok(d) => {
                    let m = d.max_abs().max(1e-12);
                    d.map(|v| 0.5 + 0.5 * v / m)
                }
                Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            },
            other => return error(StatusCode::BAD_REQUEST, format!("unknown image variant {other}")),
        };
        if aetn {
            let mut buf = Vec::new();
            if let Err(e) = img.write_aetn(&mut buf) {
                return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
            }
            return ([(header::CONTENT_TYPE, AETN_MIME)], buf).into_response();
        }
        let (w, h, rgba) = to_rgba(&img);
        (
            [
                (header::CONTENT_TYPE, "application/octet-stream".to_string()),
                (header::HeaderName::from_static("x-image-width"), w.to_string()),
                (header::HeaderName::from_static("x-image-height"), h.to_string()),
            ],
            rgba,
        )
            .into_response()
    }
}

/// 8-bit RGBA pixels of a `[C,H,W]` image with one or three channels; any
/// other shape is shown as a single grey row.
pub fn to_rgba(img: &Tensor) -> (usize, usize, Vec<u8>) {
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let s = img.shape();
    let d = img.data();
    let (c, h, w) = match s {
        [c @ (1 | 3), h, w] => (*c, *h, *w),
        _ => (1, 1, img.numel()),
    };
    let plane = h * w;
    let mut out = Vec::with_capacity(plane * 4);
    for p in 0..plane {
        let (r, g, b) = if c == 3 {
            (d[p], d[plane + p], d[2 * plane + p])
        } else {
            (d[p], d[p], d[p])
        };
        out.extend([byte(r), byte(g), byte(b), 255]);
    }
    (w, h, out)
}

async fn next_item(State(state): State<Arc<AppState>>, Query(q): Query<NextQuery>) -> Response {
    let annotator = q.annotator.filter(|a| !a.trim().is_empty()).unwrap_or_else(|| ANONYMOUS.into());
    match state.next(&annotator, Instant::now()) {
        Ok(item) => Json(item).into_response(),
        Err(true) => (StatusCode::NO_CONTENT, [(header::RETRY_AFTER, "30")]).into_response(),
        Err(false) => StatusCode::NO_CONTENT.into_response(),
    }
}

async fn post_annotation(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    state.submit(&body)
}

async fn get_progress(State(state): State<Arc<AppState>>) -> Json<Progress> {
    Json(state.progress())
}

async fn get_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ImageQuery>,
    headers: HeaderMap,
) -> Response {
    let aetn = headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains(AETN_MIME));
    state.image(&id, q.variant.as_deref().unwrap_or("adversarial"), aetn)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue/next", get(next_item))
        .route("/api/annotations", post(post_annotation))
        .route("/api/progress", get(get_progress))
        .route("/api/image/{id}", get(get_image))
        .with_state(state)
}

pub async fn serve(addr: &str, state: Arc<AppState>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
