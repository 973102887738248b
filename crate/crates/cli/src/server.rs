//! HTTP service behind the labeling UI.
//!
//! Three queues: calibration sets (training slices, one pick `h` each),
//! rulers (one threshold per scan type) and test items (every version of
//! every test slice, one ruler score and pass/fail each). The label store is
//! the only mutable state; writes go through one mutex.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use mriq_core::dataset::{DatasetManifest, SliceRecord, Split};
use mriq_core::io::read_image;
use mriq_core::ruler::{load_registry, select_ruler, ImageRuler, RulerRegistry};
use mriq_core::ScanType;

use crate::render::render;
use crate::store::{Decision, LabelStore};

pub const DEFAULT_RATER: &str = "default";

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Internal(String),
    /// A request body the extractor refused, with its status.
    Rejected(StatusCode, String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, reason) = match self {
            ApiError::NotFound(r) => (StatusCode::NOT_FOUND, r),
            ApiError::Unprocessable(r) => (StatusCode::UNPROCESSABLE_ENTITY, r),
            ApiError::Internal(r) => (StatusCode::INTERNAL_SERVER_ERROR, r),
            ApiError::Rejected(s, r) => (s, r),
        };
        (status, Json(serde_json::json!({ "error": reason }))).into_response()
    }
}

impl From<mriq_core::Error> for ApiError {
    fn from(e: mriq_core::Error) -> Self {
        ApiError::Internal(e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    payload.map(|Json(b)| b).map_err(|r| ApiError::Rejected(r.status(), r.body_text()))
}

pub struct AppState {
    root: PathBuf,
    manifest: DatasetManifest,
    by_id: HashMap<String, usize>,
    rulers: RulerRegistry,
    store: Mutex<LabelStore>,
}

impl AppState {
    /// `rulers` defaults to the rulers listed in the manifest.
    pub fn open(manifest_path: &Path, labels: &Path, rulers: Option<&Path>) -> mriq_core::Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let rulers = match rulers {
            Some(dir) => load_registry(dir)?,
            None => manifest
                .rulers
                .iter()
                .map(|r| Ok((r.scan_type.clone(), mriq_core::ruler::load_ruler(&root.join(&r.dir))?)))
                .collect::<mriq_core::Result<_>>()?,
        };
        Ok(Self::new(root, manifest, rulers, LabelStore::open(labels)?))
    }

    pub fn new(root: PathBuf, manifest: DatasetManifest, rulers: RulerRegistry, store: LabelStore) -> Self {
        let by_id = manifest.slices.iter().enumerate().map(|(i, s)| (s.slice_id.clone(), i)).collect();
        AppState { root, manifest, by_id, rulers, store: Mutex::new(store) }
    }

    fn slice(&self, id: &str) -> Option<&SliceRecord> {
        self.by_id.get(id).map(|&i| &self.manifest.slices[i])
    }

    fn calibration_set(&self, id: &str) -> ApiResult<&SliceRecord> {
        self.slice(id)
            .filter(|s| s.split == Split::Train)
            .ok_or_else(|| ApiError::NotFound(format!("no calibration set {id:?}")))
    }

    /// Test item ids are `<slice>-v<version>`, version 1-based.
    fn test_item(&self, id: &str) -> ApiResult<(&SliceRecord, usize)> {
        let not_found = || ApiError::NotFound(format!("no test item {id:?}"));
        let (slice, v) = split_version(id).ok_or_else(not_found)?;
        let rec = self.slice(slice).filter(|s| s.split == Split::Test).ok_or_else(not_found)?;
        if v == 0 || v > rec.version_files.len() {
            return Err(not_found());
        }
        Ok((rec, v))
    }

    fn ruler(&self, scan_type: &str) -> ApiResult<&ImageRuler> {
        scan_type
            .parse::<ScanType>()
            .ok()
            .and_then(|st| self.rulers.get(&st))
            .ok_or_else(|| ApiError::NotFound(format!("no ruler for scan type {scan_type:?}")))
    }

    fn with_store<T>(&self, f: impl FnOnce(&mut LabelStore) -> T) -> ApiResult<T> {
        let mut guard = self.store.lock().map_err(|_| ApiError::Internal("label store lock poisoned".into()))?;
        Ok(f(&mut guard))
    }
}

fn split_version(id: &str) -> Option<(&str, usize)> {
    let (stem, v) = id.rsplit_once("-v")?;
    Some((stem, v.parse().ok()?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub version: usize,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetView {
    pub id: String,
    pub subject_id: String,
    pub scan_type: String,
    pub m_t: usize,
    /// Versions `1..=m_t`, noisiest first.
    pub versions: Vec<ImageRef>,
    /// The requesting rater's current pick.
    pub h: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThresholdView {
    pub t_a: usize,
    pub t_b: usize,
    /// `store` once someone picked one, `ruler` for the ruler's own default.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RulerView {
    pub scan_type: String,
    pub m_r: usize,
    /// Injected SNR per version; `None` for the noise-free end.
    pub levels_db: Vec<Option<f64>>,
    pub threshold: Option<ThresholdView>,
    /// Versions `0..m_r`, noisiest first.
    pub versions: Vec<ImageRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestLabelView {
    pub rs: usize,
    pub pf: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestView {
    pub id: String,
    pub slice_id: String,
    pub version: usize,
    pub scan_type: String,
    pub image: String,
    /// Scan type of the ruler to compare against.
    pub ruler: String,
    pub m_r: usize,
    pub label: Option<TestLabelView>,
}

#[derive(Debug, Deserialize)]
pub struct RaterQuery {
    pub rater: Option<String>,
}

impl RaterQuery {
    fn rater(&self) -> &str {
        self.rater.as_deref().unwrap_or(DEFAULT_RATER)
    }
}

fn default_rater() -> String {
    DEFAULT_RATER.to_string()
}

#[derive(Debug, Deserialize)]
pub struct PickBody {
    pub h: usize,
    #[serde(default = "default_rater")]
    pub rater: String,
}

#[derive(Debug, Deserialize)]
pub struct ThresholdBody {
    pub t_a: usize,
    pub t_b: usize,
    #[serde(default = "default_rater")]
    pub rater: String,
}

#[derive(Debug, Deserialize)]
pub struct TestLabelBody {
    pub rs: usize,
    pub pf: bool,
    #[serde(default = "default_rater")]
    pub rater: String,
}

fn set_view(state: &AppState, rec: &SliceRecord, rater: &str) -> ApiResult<SetView> {
    let h = state.with_store(|s| s.pick(&rec.slice_id, rater))?;
    Ok(SetView {
        id: rec.slice_id.clone(),
        subject_id: rec.subject_id.clone(),
        scan_type: rec.scan_type.to_string(),
        m_t: rec.version_files.len(),
        versions: (1..=rec.version_files.len())
            .map(|v| ImageRef { version: v, image: format!("/api/images/{}-v{v}", rec.slice_id) })
            .collect(),
        h,
    })
}

fn ruler_view(state: &AppState, r: &ImageRuler) -> ApiResult<RulerView> {
    let st = r.scan_type.to_string();
    let stored = state.with_store(|s| s.threshold(&st))?;
    let threshold = match (stored, r.threshold) {
        (Some((t_a, t_b)), _) => Some(ThresholdView { t_a, t_b, source: "store".into() }),
        (None, Some((t_a, t_b))) => Some(ThresholdView { t_a, t_b, source: "ruler".into() }),
        (None, None) => None,
    };
    Ok(RulerView {
        scan_type: st.clone(),
        m_r: r.m_r(),
        levels_db: r.levels_db.iter().map(|l| l.is_finite().then_some(*l)).collect(),
        threshold,
        versions: (0..r.m_r())
            .map(|v| ImageRef { version: v, image: format!("/api/images/ruler-{st}-v{v}") })
            .collect(),
    })
}

fn test_view(state: &AppState, rec: &SliceRecord, v: usize, rater: &str) -> ApiResult<TestView> {
    let id = format!("{}-v{v}", rec.slice_id);
    let ruler = select_ruler(&state.rulers, &rec.scan_type, false)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    let label = state.with_store(|s| s.test_label(&id, rater).map(|l| TestLabelView { rs: l.rs, pf: l.pf }))?;
    Ok(TestView {
        image: format!("/api/images/{id}"),
        id,
        slice_id: rec.slice_id.clone(),
        version: v,
        scan_type: rec.scan_type.to_string(),
        ruler: ruler.scan_type.to_string(),
        m_r: ruler.m_r(),
        label,
    })
}

async fn next_set(State(state): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> ApiResult<Response> {
    let rater = q.rater();
    let next = state.with_store(|s| {
        state
            .manifest
            .split(Split::Train)
            .find(|r| s.pick(&r.slice_id, rater).is_none())
            .cloned()
    })?;
    match next {
        Some(rec) => Ok(Json(set_view(&state, &rec, rater)?).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn get_set(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RaterQuery>,
) -> ApiResult<Json<SetView>> {
    let rec = state.calibration_set(&id)?;
    Ok(Json(set_view(&state, rec, q.rater())?))
}

async fn post_pick(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<PickBody>, JsonRejection>,
) -> ApiResult<Json<SetView>> {
    let rec = state.calibration_set(&id)?.clone();
    let body = body(payload)?;
    let m_t = rec.version_files.len();
    if body.h > m_t + 1 {
        return Err(ApiError::Unprocessable(format!("h={} is outside 0..={}", body.h, m_t + 1)));
    }
    let d = Decision::Pick { slice_id: id, rater: body.rater.clone(), h: body.h };
    write(&state, d).await?;
    Ok(Json(set_view(&state, &rec, &body.rater)?))
}

async fn list_rulers(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<RulerView>>> {
    let views = state.rulers.values().map(|r| ruler_view(&state, r)).collect::<ApiResult<_>>()?;
    Ok(Json(views))
}

async fn get_ruler(State(state): State<Arc<AppState>>, UrlPath(st): UrlPath<String>) -> ApiResult<Json<RulerView>> {
    Ok(Json(ruler_view(&state, state.ruler(&st)?)?))
}

async fn post_threshold(
    State(state): State<Arc<AppState>>,
    UrlPath(st): UrlPath<String>,
    payload: Result<Json<ThresholdBody>, JsonRejection>,
) -> ApiResult<Json<RulerView>> {
    let m_r = state.ruler(&st)?.m_r();
    let body = body(payload)?;
    if body.t_a > body.t_b || body.t_b >= m_r {
        return Err(ApiError::Unprocessable(format!(
            "threshold ({}, {}) needs t_a <= t_b <= {}",
            body.t_a,
            body.t_b,
            m_r - 1
        )));
    }
    let scan_type = state.ruler(&st)?.scan_type.to_string();
    write(&state, Decision::Threshold { scan_type, rater: body.rater, t_a: body.t_a, t_b: body.t_b }).await?;
    Ok(Json(ruler_view(&state, state.ruler(&st)?)?))
}

async fn next_test(State(state): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> ApiResult<Response> {
    let rater = q.rater();
    let next = state.with_store(|s| {
        state.manifest.split(Split::Test).find_map(|r| {
            (1..=r.version_files.len())
                .find(|v| s.test_label(&format!("{}-v{v}", r.slice_id), rater).is_none())
                .map(|v| (r.clone(), v))
        })
    })?;
    match next {
        Some((rec, v)) => Ok(Json(test_view(&state, &rec, v, rater)?).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn get_test(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RaterQuery>,
) -> ApiResult<Json<TestView>> {
    let (rec, v) = state.test_item(&id)?;
    Ok(Json(test_view(&state, rec, v, q.rater())?))
}

async fn post_test_label(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<TestLabelBody>, JsonRejection>,
) -> ApiResult<Json<TestView>> {
    let (rec, v) = state.test_item(&id)?;
    let rec = rec.clone();
    let body = body(payload)?;
    let view = test_view(&state, &rec, v, &body.rater)?;
    if body.rs >= view.m_r {
        return Err(ApiError::Unprocessable(format!("rs={} is outside 0..{}", body.rs, view.m_r)));
    }
    let d = Decision::TestLabel { item_id: id, rater: body.rater.clone(), rs: body.rs, pf: body.pf };
    write(&state, d).await?;
    Ok(Json(test_view(&state, &rec, v, &body.rater)?))
}

/// Runs the store write off the async workers; the mutex serializes writers.
async fn write(state: &Arc<AppState>, d: Decision) -> ApiResult<()> {
    let state = Arc::clone(state);
    tokio::task::spawn_blocking(move || state.with_store(|s| s.record(d)))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??
        .map_err(ApiError::from)
}

async fn get_image(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let not_found = || ApiError::NotFound(format!("no image {id:?}"));
    let img = if let Some(rest) = id.strip_prefix("ruler-") {
        let (st, v) = split_version(rest).ok_or_else(not_found)?;
        let ruler = state.ruler(st).map_err(|_| not_found())?;
        ruler.versions.get(v).cloned().ok_or_else(not_found)?
    } else {
        let file = if let Some(slice) = id.strip_suffix("-motion") {
            state.slice(slice).map(|r| r.motion_file.clone())
        } else {
            split_version(&id).and_then(|(slice, v)| {
                let rec = state.slice(slice)?;
                rec.version_files.get(v.checked_sub(1)?).cloned()
            })
        }
        .ok_or_else(not_found)?;
        read_image(&state.root.join(file))?.0
    };
    let r = render(&img).map_err(|e| ApiError::Internal(e.to_string()))?;
    let meta = [
        ("x-mriq-offset", r.offset),
        ("x-mriq-scale", r.scale),
        ("x-mriq-window-center", r.window_center),
        ("x-mriq-window-width", r.window_width),
    ];
    let mut resp = r.png.into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    for (k, v) in meta {
        let value = HeaderValue::from_str(&format!("{v:e}")).expect("numbers are valid header values");
        headers.insert(HeaderName::from_static(k), value);
    }
    Ok(resp)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/sets/next", get(next_set))
        .route("/api/sets/{id}", get(get_set))
        .route("/api/sets/{id}/label", post(post_pick))
        .route("/api/rulers", get(list_rulers))
        .route("/api/rulers/{scan_type}", get(get_ruler))
        .route("/api/rulers/{scan_type}/threshold", post(post_threshold))
        .route("/api/test/next", get(next_test))
        .route("/api/test/{id}", get(get_test))
        .route("/api/test/{id}/label", post(post_test_label))
        .route("/api/images/{id}", get(get_image))
        .with_state(state)
}
