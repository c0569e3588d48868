//! One task per live session. The task owns the engine session and is the
//! only place its state changes; HTTP and socket handlers talk to it over a
//! command channel.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use pilot_core::engine::{Session, WallClock};
use pilot_core::protocol::{decode_kind, events_to_jsonl, Event};
use serde_json::Value;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;
use tracing::{debug, info, warn};

pub(crate) enum Command {
    Connect {
        since: u64,
        events: mpsc::UnboundedSender<Event>,
    },
    Disconnect,
    Submit(String),
    Transcript(oneshot::Sender<Vec<Event>>),
}

/// What the router keeps per session.
#[derive(Clone)]
pub(crate) struct SessionHandle {
    pub token: String,
    pub commands: mpsc::Sender<Command>,
    pub connected: Arc<AtomicBool>,
}

impl SessionHandle {
    /// Claims the single human connection slot.
    pub fn claim(&self) -> Option<ConnectionGuard> {
        self.connected
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| ConnectionGuard(self.connected.clone()))
    }
}

/// Frees the connection slot when dropped, including when an upgrade never completes.
pub(crate) struct ConnectionGuard(Arc<AtomicBool>);

impl Drop for ConnectionGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub(crate) fn spawn(session: Session<WallClock>, transcript_dir: Option<PathBuf>) -> mpsc::Sender<Command> {
    let (tx, rx) = mpsc::channel(64);
    tokio::spawn(run(session, rx, transcript_dir));
    tx
}

async fn run(mut session: Session<WallClock>, mut commands: mpsc::Receiver<Command>, transcript_dir: Option<PathBuf>) {
    let mut out: Option<mpsc::UnboundedSender<Event>> = None;
    let mut saved = false;
    loop {
        let wake = session
            .wake_at_ms()
            .map(|t| Instant::from_std(session.clock().instant_at(t)));
        let fresh = tokio::select! {
            cmd = commands.recv() => match cmd {
                None => break,
                Some(Command::Connect { since, events }) => {
                    // events from a first start are part of the backlog below
                    session.start();
                    for e in session.events().iter().filter(|e| e.seq > since) {
                        let _ = events.send(e.clone());
                    }
                    out = Some(events);
                    debug!(session = session.session_id(), since, "client connected");
                    Vec::new()
                }
                Some(Command::Disconnect) => {
                    out = None;
                    Vec::new()
                }
                Some(Command::Submit(text)) => submit(&mut session, &text),
                Some(Command::Transcript(reply)) => {
                    let _ = reply.send(session.events().to_vec());
                    Vec::new()
                }
            },
            _ = sleep_until(wake) => session.tick(),
        };
        if let Some(tx) = &out {
            for e in fresh {
                if tx.send(e).is_err() {
                    out = None;
                    break;
                }
            }
        }
        if session.finished() && !saved {
            saved = true;
            info!(session = session.session_id(), "session finished");
            if let Some(dir) = &transcript_dir {
                let path = dir.join(format!("{}.jsonl", session.session_id()));
                if let Err(e) = std::fs::write(&path, events_to_jsonl(session.events())) {
                    warn!(path = %path.display(), error = %e, "cannot save transcript");
                }
            }
        }
    }
}

async fn sleep_until(at: Option<Instant>) {
    match at {
        Some(at) => tokio::time::sleep_until(at).await,
        None => std::future::pending().await,
    }
}

/// Client frames are wire events or bare `{type, payload}` bodies. Any
/// seq, ts_ms or actor they carry is ignored: the server assigns all three.
fn submit(session: &mut Session<WallClock>, text: &str) -> Vec<Event> {
    let mut obj = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(obj)) => obj,
        Ok(_) => return session.reject("PAYLOAD_SCHEMA_VIOLATION", "expected a JSON object"),
        Err(e) => return session.reject("MALFORMED_JSON", e.to_string()),
    };
    for key in ["seq", "ts_ms", "actor"] {
        obj.remove(key);
    }
    let kind = match decode_kind(&mut obj) {
        Ok(kind) => kind,
        Err(e) => return session.reject(e.code(), e.to_string()),
    };
    if let Some(extra) = obj.keys().next() {
        return session.reject("PAYLOAD_SCHEMA_VIOLATION", format!("unknown field {extra:?}"));
    }
    if kind.is_system() {
        return session.reject("WRONG_ACTOR", format!("{} is reserved for the server", kind.type_name()));
    }
    session.submit(kind).events
}
