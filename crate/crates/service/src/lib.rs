//! HTTP API over the decomposition toolkit.
//!
//! A session holds one uploaded panel and its minimum-norm fit. Every
//! decomposition request is a closed-form shift of that fit, so requests are
//! cheap and all served decompositions reconstruct the same fitted values.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use emv_core::forecast::{forecast, ForecastSource, ForecastSpec};
use emv_core::identify::decompositions_to_json;
use emv_core::semiparametric::{fit_semiparametric, MacroFitReport, MacroPanel};
use emv_core::{apply_constraint, constraint_sweep, fit_linear, ConstraintSpec, EmvDesign, EmvError, FitResult, PanelGrid, ResponseTransform, TransformKind};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

/// Panels with more observed cells than this are fitted in the background.
pub const DEFAULT_ASYNC_THRESHOLD: usize = 20_000;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory for JSON session snapshots; sessions found there are
    /// restored at start-up.
    pub persist_dir: Option<PathBuf>,
    pub async_threshold: usize,
    /// Allowed CORS origin; any origin when absent.
    pub allowed_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            persist_dir: None,
            async_threshold: DEFAULT_ASYNC_THRESHOLD,
            allowed_origin: None,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<EmvError> for ApiError {
    fn from(e: EmvError) -> Self {
        let status = match e {
            EmvError::Parse { .. }
            | EmvError::Csv(_)
            | EmvError::Json(_)
            | EmvError::Io(_)
            | EmvError::DuplicateCell { .. }
            | EmvError::InvalidCell { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub n_cells: usize,
    pub n_params: usize,
    pub rank: usize,
    pub dof: usize,
    pub r_squared: f64,
    pub sigma2: f64,
    pub extra_null_dims: usize,
    pub transform: ResponseTransform,
}

impl Diagnostics {
    fn of(fit: &FitResult) -> Self {
        Diagnostics {
            n_cells: fit.cells.len(),
            n_params: fit.layout.n_params(),
            rank: fit.rank,
            dof: fit.dof,
            r_squared: fit.r_squared,
            sigma2: fit.sigma2,
            extra_null_dims: fit.extra_null_dims,
            transform: fit.transform,
        }
    }
}

struct Fitted {
    design: EmvDesign,
    fit: FitResult,
    /// Serialized decompositions keyed by their constraint spec.
    cache: Mutex<HashMap<String, String>>,
}

enum FitState {
    Pending,
    Ready(Arc<Fitted>),
    Failed(String),
}

struct Session {
    grid: PanelGrid,
    transform: ResponseTransform,
    macros: RwLock<Option<MacroPanel>>,
    state: RwLock<FitState>,
}

impl Session {
    fn fitted(&self) -> ApiResult<Arc<Fitted>> {
        match &*self.state.read().unwrap() {
            FitState::Ready(f) => Ok(f.clone()),
            FitState::Pending => Err(ApiError::new(StatusCode::CONFLICT, "fit pending")),
            FitState::Failed(m) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, m.clone())),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    panel: String,
    transform: ResponseTransform,
    #[serde(default)]
    macros: Option<MacroPanel>,
}

struct Inner {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    config: ServiceConfig,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

fn fit_panel(grid: &PanelGrid, g: &ResponseTransform) -> emv_core::Result<Fitted> {
    let design = EmvDesign::build(grid)?;
    let fit = fit_linear(&design, grid, g)?;
    Ok(Fitted {
        design,
        fit,
        cache: Mutex::new(HashMap::new()),
    })
}

impl AppState {
    /// New state; restores persisted sessions (refitting each).
    pub fn new(config: ServiceConfig) -> std::io::Result<Self> {
        let state = AppState(Arc::new(Inner {
            sessions: RwLock::new(HashMap::new()),
            config,
        }));
        if let Some(dir) = &state.0.config.persist_dir {
            std::fs::create_dir_all(dir)?;
            let mut entries: Vec<_> = std::fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
            entries.sort();
            for path in entries {
                if path.extension().and_then(|e| e.to_str()) != Some("json") {
                    continue;
                }
                let id = path.file_stem().unwrap().to_string_lossy().to_string();
                let restored = std::fs::read_to_string(&path)
                    .ok()
                    .and_then(|s| serde_json::from_str::<Snapshot>(&s).ok())
                    .and_then(|snap| {
                        let grid = PanelGrid::from_json(&snap.panel).ok()?;
                        let fitted = fit_panel(&grid, &snap.transform).ok()?;
                        Some(Session {
                            grid,
                            transform: snap.transform,
                            macros: RwLock::new(snap.macros),
                            state: RwLock::new(FitState::Ready(Arc::new(fitted))),
                        })
                    });
                match restored {
                    Some(s) => {
                        state.0.sessions.write().unwrap().insert(id, Arc::new(s));
                    }
                    None => log::warn!("skipping unreadable session snapshot {}", path.display()),
                }
            }
        }
        Ok(state)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.0
            .sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn persist(&self, id: &str, session: &Session) {
        let Some(dir) = &self.0.config.persist_dir else { return };
        let snap = Snapshot {
            panel: session.grid.to_json().unwrap_or_default(),
            transform: session.transform,
            macros: session.macros.read().unwrap().clone(),
        };
        let path = dir.join(format!("{id}.json"));
        if let Err(e) = serde_json::to_string(&snap).map_err(std::io::Error::other).and_then(|s| std::fs::write(&path, s)) {
            log::warn!("could not persist session {id}: {e}");
        }
    }
}

pub fn router(state: AppState) -> Router {
    let cors = CorsLayer::new().allow_methods([Method::GET, Method::POST]).allow_headers(Any);
    let cors = match &state.0.config.allowed_origin {
        Some(origin) => match HeaderValue::from_str(origin) {
            Ok(v) => cors.allow_origin(v),
            Err(_) => cors.allow_origin(Any),
        },
        None => cors.allow_origin(Any),
    };
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/macro", post(upload_macro))
        .route("/sessions/{id}/decomposition", get(decomposition))
        .route("/sessions/{id}/sweep", get(sweep))
        .route("/sessions/{id}/macro-fit", get(macro_fit))
        .route("/sessions/{id}/forecast", get(forecast_handler))
        .layer(axum::extract::DefaultBodyLimit::max(256 * 1024 * 1024))
        .layer(cors)
        .with_state(state)
}

/// Serve on an already-bound listener.
pub async fn serve_listener(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(listener, state).await
}

#[derive(Debug, Deserialize)]
struct CreateParams {
    transform: Option<String>,
    epsilon: Option<f64>,
}

/// CSV from a raw body, or from the first file field of a multipart form.
async fn csv_body(req: Request) -> ApiResult<Bytes> {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if is_multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))?;
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::bad_request(e.body_text()))? {
            return field.bytes().await.map_err(|e| ApiError::bad_request(e.body_text()));
        }
        Err(ApiError::bad_request("multipart body has no file field"))
    } else {
        Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::bad_request(e.body_text()))
    }
}

async fn create_session(State(state): State<AppState>, Query(params): Query<CreateParams>, req: Request) -> ApiResult<Response> {
    let kind: TransformKind = params
        .transform
        .as_deref()
        .unwrap_or("identity")
        .parse()
        .map_err(|e: EmvError| ApiError::bad_request(e.to_string()))?;
    let mut transform = ResponseTransform::new(kind);
    if let Some(eps) = params.epsilon {
        transform = transform.with_epsilon(eps);
    }
    let body = csv_body(req).await?;
    let grid = PanelGrid::from_csv_reader(&body[..])?;
    grid.transform(&transform)?;
    let id = uuid::Uuid::new_v4().simple().to_string();

    if grid.n_observed() > state.0.config.async_threshold {
        let session = Arc::new(Session {
            grid,
            transform,
            macros: RwLock::new(None),
            state: RwLock::new(FitState::Pending),
        });
        state.0.sessions.write().unwrap().insert(id.clone(), session.clone());
        state.persist(&id, &session);
        tokio::task::spawn_blocking(move || {
            let result = fit_panel(&session.grid, &session.transform);
            *session.state.write().unwrap() = match result {
                Ok(f) => FitState::Ready(Arc::new(f)),
                Err(e) => FitState::Failed(e.to_string()),
            };
        });
        return Ok((StatusCode::ACCEPTED, Json(json!({ "id": id, "status": "pending" }))).into_response());
    }

    let (grid, fitted) = tokio::task::spawn_blocking(move || {
        let f = fit_panel(&grid, &transform);
        (grid, f)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let fitted = fitted?;
    let diagnostics = Diagnostics::of(&fitted.fit);
    let session = Arc::new(Session {
        grid,
        transform,
        macros: RwLock::new(None),
        state: RwLock::new(FitState::Ready(Arc::new(fitted))),
    });
    state.0.sessions.write().unwrap().insert(id.clone(), session.clone());
    state.persist(&id, &session);
    Ok((
        StatusCode::CREATED,
        Json(json!({ "id": id, "status": "ready", "diagnostics": diagnostics })),
    )
        .into_response())
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let has_macro = session.macros.read().unwrap().is_some();
    let body = match &*session.state.read().unwrap() {
        FitState::Pending => json!({ "id": id, "status": "pending", "has_macro": has_macro }),
        FitState::Ready(f) => json!({
            "id": id,
            "status": "ready",
            "has_macro": has_macro,
            "diagnostics": Diagnostics::of(&f.fit),
        }),
        FitState::Failed(m) => json!({ "id": id, "status": "failed", "error": m, "has_macro": has_macro }),
    };
    Ok(Json(body).into_response())
}

async fn upload_macro(State(state): State<AppState>, Path(id): Path<String>, req: Request) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let body = csv_body(req).await?;
    let panel = MacroPanel::from_csv_reader(&body[..])?;
    let summary = json!({
        "names": panel.names(),
        "first_time": panel.times().first(),
        "last_time": panel.times().last(),
    });
    *session.macros.write().unwrap() = Some(panel);
    state.persist(&id, &session);
    Ok(Json(summary).into_response())
}

type Params = HashMap<String, String>;

fn parse<T: std::str::FromStr>(params: &Params, key: &str) -> ApiResult<Option<T>> {
    params
        .get(key)
        .map(|v| v.trim().parse::<T>().map_err(|_| ApiError::bad_request(format!("invalid value for {key}: {v:?}"))))
        .transpose()
}

fn parse_list(params: &Params, key: &str) -> ApiResult<Option<Vec<f64>>> {
    params
        .get(key)
        .map(|v| {
            v.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| ApiError::bad_request(format!("invalid value in {key}: {x:?}"))))
                .collect()
        })
        .transpose()
}

fn constraint_from(params: &Params) -> ApiResult<ConstraintSpec> {
    let kind = params.get("kind").map(String::as_str).unwrap_or("intrinsic");
    ConstraintSpec::from_parts(
        kind,
        parse(params, "k")?,
        parse(params, "a_star")?,
        parse(params, "window")?,
        parse(params, "target_slope")?,
    )
    .map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn decomposition(State(state): State<AppState>, Path(id): Path<String>, Query(params): Query<Params>) -> ApiResult<Response> {
    let fitted = state.session(&id)?.fitted()?;
    let spec = constraint_from(&params)?;
    let key = serde_json::to_string(&spec).unwrap_or_default();
    if let Some(hit) = fitted.cache.lock().unwrap().get(&key) {
        return Ok(json_body(hit.clone()));
    }
    let body = apply_constraint(&fitted.fit, &fitted.design, &spec)?.to_json()?;
    fitted.cache.lock().unwrap().insert(key, body.clone());
    Ok(json_body(body))
}

async fn sweep(State(state): State<AppState>, Path(id): Path<String>, Query(params): Query<Params>) -> ApiResult<Response> {
    let fitted = state.session(&id)?.fitted()?;
    let ks = parse_list(&params, "ks")?.ok_or_else(|| ApiError::bad_request("missing ks"))?;
    let a_star = parse(&params, "a_star")?.unwrap_or(emv_core::identify::DEFAULT_A_STAR);
    let decomps = constraint_sweep(&fitted.fit, &fitted.design, a_star, &ks)?;
    Ok(json_body(decompositions_to_json(&decomps)?))
}

fn macro_panel(session: &Session) -> ApiResult<MacroPanel> {
    session
        .macros
        .read()
        .unwrap()
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no macro panel uploaded for this session"))
}

async fn macro_fit(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let fitted = session.fitted()?;
    let macros = macro_panel(&session)?;
    let body = tokio::task::spawn_blocking(move || -> emv_core::Result<String> {
        let semi = fit_semiparametric(&session.grid, &macros, &session.transform)?;
        MacroFitReport::new(&fitted.fit, &fitted.design, semi)?.to_json()
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(json_body(body))
}

async fn forecast_handler(State(state): State<AppState>, Path(id): Path<String>, Query(params): Query<Params>) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let fitted = session.fitted()?;
    let horizon: u32 = parse(&params, "horizon")?.unwrap_or(12);
    let mut spec = ForecastSpec::from_parts(
        horizon,
        params.get("tail").map(String::as_str).unwrap_or("hold-last"),
        parse(&params, "tail_a_star")?,
        params.get("vintage").map(String::as_str).unwrap_or("recent-level"),
        parse(&params, "cv_window")?,
        parse_list(&params, "values")?,
    )
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    spec.max_age = parse(&params, "max_age")?;
    spec.original_scale = parse(&params, "original_scale")?.unwrap_or(false);
    let source = params.get("source").map(String::as_str).unwrap_or("decomposition");
    let body = match source {
        "decomposition" => {
            let constraint = constraint_from(&params)?;
            let d = apply_constraint(&fitted.fit, &fitted.design, &constraint)?;
            let src = ForecastSource::Decomposition {
                decomposition: &d,
                transform: session.transform,
                cells: &fitted.fit.cells,
            };
            forecast(src, &spec)?.to_json()?
        }
        "macro" => {
            let macros = macro_panel(&session)?;
            let semi = fit_semiparametric(&session.grid, &macros, &session.transform)?;
            spec.macro_future = Some(macros);
            forecast(ForecastSource::Semiparametric(&semi), &spec)?.to_json()?
        }
        other => return Err(ApiError::bad_request(format!("unknown forecast source {other:?}"))),
    };
    Ok(json_body(body))
}
