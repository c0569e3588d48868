//! Request and response bodies of the HTTP service, shared by server and client.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::engine::SummaryRow;
use crate::model::{Points, Scenario};
use crate::protocol::Outcome;

/// A scenario given by name (looked up by the server) or inline.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Name(String),
    Inline(Box<Scenario>),
}

impl<'de> Deserialize<'de> for ScenarioRef {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        match Value::deserialize(deserializer)? {
            Value::String(name) => Ok(ScenarioRef::Name(name)),
            other => Scenario::deserialize(other)
                .map(|s| ScenarioRef::Inline(Box::new(s)))
                .map_err(D::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    /// One scenario for all three negotiations, or exactly three.
    #[serde(default)]
    pub scenarios: Vec<ScenarioRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRequest {
    pub persona: String,
    pub seed: u64,
    #[serde(default = "one")]
    pub repeat: u64,
    #[serde(default)]
    pub scenarios: Vec<ScenarioRef>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSession {
    pub session_id: String,
    pub seed: u64,
    pub agent_points: Points,
    pub partner_points: Points,
    /// JSON Lines transcript.
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub sessions: Vec<SimulatedSession>,
    pub summary: Vec<SummaryRow>,
    pub results_csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRequest {
    /// JSON Lines transcript.
    pub transcript: String,
    #[serde(default)]
    pub scenarios: Vec<ScenarioRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayResponse {
    pub outcomes: Vec<Outcome>,
    pub agent_points: Points,
    pub partner_points: Points,
}

/// Error body for every non-2xx JSON response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}
