//! HTTP and WebSocket front end for Pilot negotiation sessions.
//!
//! Live sessions run on a real-time clock, one task each. Simulation and
//! replay are offered as plain request/response endpoints.

mod live;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pilot_core::agent::PolicyConfig;
use pilot_core::api::{
    ApiError, CreateSessionRequest, CreateSessionResponse, ReplayRequest, ReplayResponse, ScenarioRef,
    SimulateRequest, SimulateResponse, SimulatedSession,
};
use pilot_core::catalog;
use pilot_core::engine::{
    results_csv, run_persona_session, summarize, PersonaKind, Session, SessionConfig, WallClock,
};
use pilot_core::model::Scenario;
use pilot_core::protocol::{encode_event, events_to_jsonl, replay_session, EventKind, ReplayError, Transcript};
use rand::Rng;
use serde::Deserialize;
use tokio::sync::{mpsc, oneshot};
use tower_http::services::ServeDir;
use tracing::info;

use live::{Command, SessionHandle};

/// Upper bound on `repeat` for one simulate request.
pub const MAX_REPEAT: u64 = 10_000;

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    /// Scenarios for live sessions created without an explicit list.
    pub scenarios: Vec<Scenario>,
    /// Where scenario names are looked up before the bundled desks.
    pub scenario_dir: Option<PathBuf>,
    pub policy: PolicyConfig,
    /// Browser client assets, served at `/`.
    pub static_dir: Option<PathBuf>,
    /// Finished live transcripts are written here as `<session_id>.jsonl`.
    pub transcript_dir: Option<PathBuf>,
}

struct AppState {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, SessionHandle>>,
}

type Shared = Arc<AppState>;

pub fn router(config: ServerConfig) -> Router {
    let static_dir = config.static_dir.clone();
    let state = Arc::new(AppState {
        config,
        sessions: Mutex::new(HashMap::new()),
    });
    let router = Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/ws", get(connect))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/simulate", post(simulate))
        .route("/replay", post(replay))
        .with_state(state);
    match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, config: ServerConfig) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(config)).await
}

struct AppError(StatusCode, ApiError);

impl AppError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        AppError(
            status,
            ApiError {
                code: code.to_owned(),
                message: message.into(),
                seq: None,
            },
        )
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

async fn healthz() -> &'static str {
    "ok"
}

fn random_hex(bytes: usize) -> String {
    let mut rng = rand::rng();
    (0..bytes).map(|_| format!("{:02x}", rng.random::<u8>())).collect()
}

fn parse_body<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, AppError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| AppError::new(StatusCode::BAD_REQUEST, "BAD_REQUEST", e.to_string()))
}

fn resolve(state: &AppState, refs: &[ScenarioRef]) -> Result<Vec<Scenario>, AppError> {
    let dir = state.config.scenario_dir.clone().or_else(catalog::env_dir);
    refs.iter()
        .map(|r| {
            let scenario = match r {
                ScenarioRef::Name(name) => catalog::resolve(name, dir.as_deref())
                    .map_err(|e| AppError::new(StatusCode::BAD_REQUEST, "SCENARIO_NOT_FOUND", e.to_string()))?,
                ScenarioRef::Inline(s) => (**s).clone(),
            };
            catalog::check(&scenario)
                .map_err(|e| AppError::new(StatusCode::BAD_REQUEST, "SCENARIO_INVALID", e.to_string()))?;
            Ok(scenario)
        })
        .collect()
}

/// One scenario or three; nothing means the server default.
fn session_scenarios(state: &AppState, refs: &[ScenarioRef]) -> Result<Vec<Scenario>, AppError> {
    let resolved = resolve(state, refs)?;
    let resolved = if resolved.is_empty() && !state.config.scenarios.is_empty() {
        state.config.scenarios.clone()
    } else {
        resolved
    };
    catalog::expand(resolved).ok_or_else(|| {
        AppError::new(StatusCode::BAD_REQUEST, "CONFIG_INVALID", "give one scenario or exactly three")
    })
}

async fn create_session(State(state): State<Shared>, body: Bytes) -> Result<Json<CreateSessionResponse>, AppError> {
    let request: CreateSessionRequest = parse_body(&body)?;
    let scenarios = session_scenarios(&state, &request.scenarios)?;
    let session_id = random_hex(8);
    let token = random_hex(16);
    let session = Session::new(session_id.clone(), scenarios, state.config.policy.clone(), WallClock::new());
    let commands = live::spawn(session, state.config.transcript_dir.clone());
    let handle = SessionHandle {
        token: token.clone(),
        commands,
        connected: Default::default(),
    };
    state.sessions.lock().expect("session table").insert(session_id.clone(), handle);
    info!(session = %session_id, "session created");
    Ok(Json(CreateSessionResponse { session_id, token }))
}

fn lookup(state: &AppState, id: &str) -> Result<SessionHandle, AppError> {
    state
        .sessions
        .lock()
        .expect("session table")
        .get(id)
        .cloned()
        .ok_or_else(|| AppError::new(StatusCode::NOT_FOUND, "UNKNOWN_SESSION", format!("no session {id}")))
}

#[derive(Debug, Deserialize)]
struct ConnectParams {
    token: Option<String>,
    #[serde(default)]
    since: u64,
}

async fn connect(
    State(state): State<Shared>,
    Path(id): Path<String>,
    Query(params): Query<ConnectParams>,
    ws: WebSocketUpgrade,
) -> Result<Response, AppError> {
    let handle = lookup(&state, &id)?;
    if params.token.as_deref() != Some(handle.token.as_str()) {
        return Err(AppError::new(StatusCode::UNAUTHORIZED, "BAD_TOKEN", "token does not match"));
    }
    let guard = handle
        .claim()
        .ok_or_else(|| AppError::new(StatusCode::CONFLICT, "ALREADY_CONNECTED", "session already has a connection"))?;
    Ok(ws.on_upgrade(move |socket| async move {
        run_socket(socket, handle.commands, params.since).await;
        drop(guard);
    }))
}

async fn run_socket(mut socket: WebSocket, commands: mpsc::Sender<Command>, since: u64) {
    let (tx, mut events) = mpsc::unbounded_channel();
    if commands.send(Command::Connect { since, events: tx }).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            event = events.recv() => match event {
                Some(e) => {
                    if socket.send(Message::Text(encode_event(&e).into())).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
            frame = socket.recv() => match frame {
                Some(Ok(Message::Text(text))) => {
                    if commands.send(Command::Submit(text.to_string())).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Binary(bytes))) => {
                    let text = String::from_utf8_lossy(&bytes).into_owned();
                    if commands.send(Command::Submit(text)).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
    let _ = commands.send(Command::Disconnect).await;
}

async fn transcript(State(state): State<Shared>, Path(id): Path<String>) -> Result<Response, AppError> {
    let handle = lookup(&state, &id)?;
    let (tx, rx) = oneshot::channel();
    let gone = || AppError::new(StatusCode::GONE, "SESSION_GONE", "session task stopped");
    handle.commands.send(Command::Transcript(tx)).await.map_err(|_| gone())?;
    let events = rx.await.map_err(|_| gone())?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], events_to_jsonl(&events)).into_response())
}

async fn simulate(State(state): State<Shared>, Json(request): Json<SimulateRequest>) -> Result<Json<SimulateResponse>, AppError> {
    let kind = PersonaKind::parse(&request.persona).ok_or_else(|| {
        AppError::new(
            StatusCode::BAD_REQUEST,
            "UNKNOWN_PERSONA",
            format!("unknown persona {:?}; expected prosocial, selfish or neutral", request.persona),
        )
    })?;
    if request.repeat == 0 || request.repeat > MAX_REPEAT {
        return Err(AppError::new(
            StatusCode::BAD_REQUEST,
            "BAD_REQUEST",
            format!("repeat must lie in 1..={MAX_REPEAT}"),
        ));
    }
    let scenarios = session_scenarios(&state, &request.scenarios)?;
    let policy = state.config.policy.clone();
    let reports = tokio::task::spawn_blocking(move || {
        (request.seed..request.seed + request.repeat)
            .map(|seed| {
                let mut config = SessionConfig::new(scenarios.clone(), seed);
                config.policy = policy.clone();
                run_persona_session(&config, kind)
            })
            .collect::<Result<Vec<_>, _>>()
    })
    .await
    .map_err(|e| AppError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?
    .map_err(|e| AppError::new(StatusCode::BAD_REQUEST, "CONFIG_INVALID", e.to_string()))?;
    Ok(Json(SimulateResponse {
        sessions: reports
            .iter()
            .map(|r| SimulatedSession {
                session_id: r.session_id.clone(),
                seed: r.seed,
                agent_points: r.agent_points,
                partner_points: r.partner_points,
                transcript: r.transcript_jsonl(),
            })
            .collect(),
        summary: summarize(&reports),
        results_csv: results_csv(&reports),
    }))
}

async fn replay(State(state): State<Shared>, Json(request): Json<ReplayRequest>) -> Result<Json<ReplayResponse>, AppError> {
    let transcript = Transcript::parse_jsonl(&request.transcript).map_err(|e| {
        AppError::new(StatusCode::UNPROCESSABLE_ENTITY, e.error.code(), e.to_string())
    })?;
    let scenarios = if request.scenarios.is_empty() {
        match transcript.events.first().map(|e| &e.kind) {
            Some(EventKind::SessionStart { scenarios, .. }) => {
                let refs: Vec<ScenarioRef> = scenarios.iter().cloned().map(ScenarioRef::Name).collect();
                resolve(&state, &refs)?
            }
            _ if transcript.events.is_empty() => Vec::new(),
            _ => {
                return Err(AppError::new(
                    StatusCode::BAD_REQUEST,
                    "BAD_REQUEST",
                    "transcript names no scenarios; pass them explicitly",
                ))
            }
        }
    } else {
        resolve(&state, &request.scenarios)?
    };
    let outcomes = replay_session(&transcript.events, &scenarios).map_err(|e| {
        let code = match e {
            ReplayError::Empty => "EMPTY_TRANSCRIPT",
            _ => "ILLEGAL_TRANSCRIPT",
        };
        AppError(
            StatusCode::UNPROCESSABLE_ENTITY,
            ApiError {
                code: code.to_owned(),
                message: e.to_string(),
                seq: e.seq(),
            },
        )
    })?;
    Ok(Json(ReplayResponse {
        agent_points: outcomes.iter().map(|o| o.agent_points).sum(),
        partner_points: outcomes.iter().map(|o| o.partner_points).sum(),
        outcomes,
    }))
}
