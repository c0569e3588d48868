//! Thin async client for the Pilot service: REST calls plus a live
//! WebSocket session.

use futures_util::{SinkExt, StreamExt};
use pilot_core::api::{
    ApiError, CreateSessionRequest, CreateSessionResponse, ReplayRequest, ReplayResponse, SimulateRequest,
    SimulateResponse,
};
use pilot_core::protocol::{decode_event, DecodeError, Event, EventKind};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Http(#[from] reqwest::Error),
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("server replied {status}: {} ({})", .error.message, .error.code)]
    Api { status: u16, error: ApiError },
    #[error("server sent an undecodable event: {0}")]
    Decode(#[from] DecodeError),
}

impl ClientError {
    /// The service error body, when the server produced one.
    pub fn api(&self) -> Option<&ApiError> {
        match self {
            ClientError::Api { error, .. } => Some(error),
            _ => None,
        }
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            ClientError::Ws(tokio_tungstenite::tungstenite::Error::Http(resp)) => Some(resp.status().as_u16()),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct PilotClient {
    base: String,
    http: reqwest::Client,
}

impl PilotClient {
    /// `base` is the server root, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        PilotClient {
            base: base.into().trim_end_matches('/').to_owned(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn check(resp: reqwest::Response) -> Result<reqwest::Response> {
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let text = resp.text().await?;
        let error = serde_json::from_str(&text).unwrap_or(ApiError {
            code: "HTTP".to_owned(),
            message: text,
            seq: None,
        });
        Err(ClientError::Api {
            status: status.as_u16(),
            error,
        })
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let resp = self.http.post(format!("{}{path}", self.base)).json(body).send().await?;
        Ok(Self::check(resp).await?.json().await?)
    }

    pub async fn healthz(&self) -> Result<String> {
        let resp = self.http.get(format!("{}/healthz", self.base)).send().await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn create_session(&self, request: &CreateSessionRequest) -> Result<CreateSessionResponse> {
        self.post("/sessions", request).await
    }

    /// JSON Lines transcript of a live session so far.
    pub async fn transcript(&self, session_id: &str) -> Result<String> {
        let resp = self
            .http
            .get(format!("{}/sessions/{session_id}/transcript", self.base))
            .send()
            .await?;
        Ok(Self::check(resp).await?.text().await?)
    }

    pub async fn simulate(&self, request: &SimulateRequest) -> Result<SimulateResponse> {
        self.post("/simulate", request).await
    }

    pub async fn replay(&self, request: &ReplayRequest) -> Result<ReplayResponse> {
        self.post("/replay", request).await
    }

    /// Opens the human side of a live session. Events with seq at or below
    /// `since` are not resent.
    pub async fn connect(&self, session_id: &str, token: &str, since: u64) -> Result<LiveSession> {
        let ws_base = if let Some(rest) = self.base.strip_prefix("https://") {
            format!("wss://{rest}")
        } else if let Some(rest) = self.base.strip_prefix("http://") {
            format!("ws://{rest}")
        } else {
            self.base.clone()
        };
        let url = format!("{ws_base}/sessions/{session_id}/ws?token={token}&since={since}");
        let (stream, _) = tokio_tungstenite::connect_async(url).await?;
        Ok(LiveSession { stream })
    }
}

pub struct LiveSession {
    stream: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl LiveSession {
    /// Sends one human event. The server assigns seq, time and actor.
    pub async fn send(&mut self, kind: &EventKind) -> Result<()> {
        let text = serde_json::to_string(kind).expect("event kinds serialize");
        self.send_raw(text).await
    }

    /// Sends an arbitrary text frame.
    pub async fn send_raw(&mut self, text: impl Into<String>) -> Result<()> {
        self.stream.send(Message::Text(text.into().into())).await?;
        Ok(())
    }

    /// Next server event, or `None` once the server closes the socket.
    pub async fn next_event(&mut self) -> Result<Option<Event>> {
        while let Some(msg) = self.stream.next().await {
            match msg? {
                Message::Text(text) => return Ok(Some(decode_event(text.as_str())?)),
                Message::Close(_) => return Ok(None),
                _ => {}
            }
        }
        Ok(None)
    }

    pub async fn close(mut self) -> Result<()> {
        self.stream.close(None).await?;
        Ok(())
    }
}
