//! Negotiation events, the JSON Lines wire format, legality and replay.
//!
//! One event per line: `{"seq":..,"ts_ms":..,"actor":..,"type":..,"payload":{..}}`.
//! The same encoding is used on the live socket and in transcript files.
//! `ts_ms` counts from the start of the current negotiation; `seq` is
//! strictly increasing across a whole transcript.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{is_full, utility, CategoryId, Offer, Points, Scenario, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Agent,
    Partner,
    System,
}

impl Actor {
    pub fn side(self) -> Option<Side> {
        match self {
            Actor::Agent => Some(Side::Agent),
            Actor::Partner => Some(Side::Partner),
            Actor::System => None,
        }
    }
}

impl From<Side> for Actor {
    fn from(side: Side) -> Self {
        match side {
            Side::Agent => Actor::Agent,
            Side::Partner => Actor::Partner,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Neutral,
    Happy,
    Sad,
    Surprised,
    Angry,
}

/// A claim about the speaker's own preferences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum PrefStatement {
    Best { category: CategoryId },
    Prefer { better: CategoryId, worse: CategoryId },
    Worst { category: CategoryId },
}

impl PrefStatement {
    pub fn categories(&self) -> Vec<CategoryId> {
        match *self {
            PrefStatement::Best { category } | PrefStatement::Worst { category } => vec![category],
            PrefStatement::Prefer { better, worse } => vec![better, worse],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE", deny_unknown_fields)]
pub enum PrefQuery {
    AskBest,
    AskPrefer { first: CategoryId, second: CategoryId },
    AskWorst,
}

/// Menu message ids. Display text lives in the template catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    #[serde(rename = "PRIME_1")]
    Prime1,
    #[serde(rename = "PRIME_2")]
    Prime2,
    #[serde(rename = "GUIDE")]
    Guide,
    #[serde(rename = "NUDGE_1")]
    Nudge1,
    #[serde(rename = "NUDGE_2")]
    Nudge2,
    #[serde(rename = "FAVOR_ASK")]
    FavorAsk,
    #[serde(rename = "FAVOR_THANKS")]
    FavorThanks,
    #[serde(rename = "FAVOR_UNDERSTOOD")]
    FavorUnderstood,
    #[serde(rename = "FAVOR_RETURN")]
    FavorReturn,
    #[serde(rename = "PROPOSE")]
    Propose,
    #[serde(rename = "STEER_FULL")]
    SteerFull,
    #[serde(rename = "ELICIT_FIRST")]
    ElicitFirst,
    #[serde(rename = "OFFER_STANDS")]
    OfferStands,
    #[serde(rename = "NOTHING_LEFT")]
    NothingLeft,
    #[serde(rename = "CONTRADICTION")]
    Contradiction,
    #[serde(rename = "HELLO")]
    Hello,
    #[serde(rename = "LETS_DEAL")]
    LetsDeal,
    #[serde(rename = "NEED_MORE")]
    NeedMore,
    #[serde(rename = "THINKING")]
    Thinking,
}

impl Template {
    pub const ALL: [Template; 19] = [
        Template::Prime1,
        Template::Prime2,
        Template::Guide,
        Template::Nudge1,
        Template::Nudge2,
        Template::FavorAsk,
        Template::FavorThanks,
        Template::FavorUnderstood,
        Template::FavorReturn,
        Template::Propose,
        Template::SteerFull,
        Template::ElicitFirst,
        Template::OfferStands,
        Template::NothingLeft,
        Template::Contradiction,
        Template::Hello,
        Template::LetsDeal,
        Template::NeedMore,
        Template::Thinking,
    ];

    pub fn id(self) -> String {
        serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndReason {
    Agreement,
    Deadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TimerKind {
    IdleNudge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    OfferProposed { offer: Offer },
    OfferAccepted { offer_seq: u64 },
    OfferRejected { offer_seq: u64 },
    PrefStatement(PrefStatement),
    PrefQuery(PrefQuery),
    BatnaQuery {},
    BatnaStatement { points: Points },
    FavorRequest {},
    FavorAccept {},
    FavorReject {},
    TextMessage { template: Template },
    Expression { emotion: Emotion },
    NegotiationStart { k: u8 },
    NegotiationEnd {
        reason: EndReason,
        agent_points: Points,
        partner_points: Points,
    },
    SessionStart {
        session_id: String,
        scenarios: Vec<String>,
    },
    SessionEnd {
        agent_points: Points,
        partner_points: Points,
        favors_owed: u32,
    },
    Notice { code: String, detail: String },
    Timer { timer: TimerKind },
}

pub const EVENT_TYPES: [&str; 18] = [
    "OFFER_PROPOSED",
    "OFFER_ACCEPTED",
    "OFFER_REJECTED",
    "PREF_STATEMENT",
    "PREF_QUERY",
    "BATNA_QUERY",
    "BATNA_STATEMENT",
    "FAVOR_REQUEST",
    "FAVOR_ACCEPT",
    "FAVOR_REJECT",
    "TEXT_MESSAGE",
    "EXPRESSION",
    "NEGOTIATION_START",
    "NEGOTIATION_END",
    "SESSION_START",
    "SESSION_END",
    "NOTICE",
    "TIMER",
];

impl EventKind {
    pub fn type_name(&self) -> &'static str {
        match self {
            EventKind::OfferProposed { .. } => "OFFER_PROPOSED",
            EventKind::OfferAccepted { .. } => "OFFER_ACCEPTED",
            EventKind::OfferRejected { .. } => "OFFER_REJECTED",
            EventKind::PrefStatement(_) => "PREF_STATEMENT",
            EventKind::PrefQuery(_) => "PREF_QUERY",
            EventKind::BatnaQuery {} => "BATNA_QUERY",
            EventKind::BatnaStatement { .. } => "BATNA_STATEMENT",
            EventKind::FavorRequest {} => "FAVOR_REQUEST",
            EventKind::FavorAccept {} => "FAVOR_ACCEPT",
            EventKind::FavorReject {} => "FAVOR_REJECT",
            EventKind::TextMessage { .. } => "TEXT_MESSAGE",
            EventKind::Expression { .. } => "EXPRESSION",
            EventKind::NegotiationStart { .. } => "NEGOTIATION_START",
            EventKind::NegotiationEnd { .. } => "NEGOTIATION_END",
            EventKind::SessionStart { .. } => "SESSION_START",
            EventKind::SessionEnd { .. } => "SESSION_END",
            EventKind::Notice { .. } => "NOTICE",
            EventKind::Timer { .. } => "TIMER",
        }
    }

    /// Lifecycle and bookkeeping events only the engine may emit.
    pub fn is_system(&self) -> bool {
        matches!(
            self,
            EventKind::NegotiationStart { .. }
                | EventKind::NegotiationEnd { .. }
                | EventKind::SessionStart { .. }
                | EventKind::SessionEnd { .. }
                | EventKind::Notice { .. }
                | EventKind::Timer { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts_ms: u64,
    pub actor: Actor,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("MALFORMED_JSON: {0}")]
    MalformedJson(String),
    #[error("UNKNOWN_EVENT_TYPE: {0:?}")]
    UnknownEventType(String),
    #[error("PAYLOAD_SCHEMA_VIOLATION at `{field}`: {detail}")]
    PayloadSchemaViolation { field: String, detail: String },
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::MalformedJson(_) => "MALFORMED_JSON",
            DecodeError::UnknownEventType(_) => "UNKNOWN_EVENT_TYPE",
            DecodeError::PayloadSchemaViolation { .. } => "PAYLOAD_SCHEMA_VIOLATION",
        }
    }

    fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        DecodeError::PayloadSchemaViolation {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

/// Serializes one event as a single JSON line (no trailing newline).
pub fn encode_event(event: &Event) -> String {
    serde_json::to_string(event).expect("events always serialize")
}

pub fn decode_event(line: &str) -> Result<Event, DecodeError> {
    let value: Value =
        serde_json::from_str(line).map_err(|e| DecodeError::MalformedJson(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(DecodeError::schema("<event>", "expected a JSON object"));
    };
    let seq = take_u64(&mut obj, "seq")?;
    let ts_ms = take_u64(&mut obj, "ts_ms")?;
    let actor = obj
        .remove("actor")
        .ok_or_else(|| DecodeError::schema("actor", "missing"))?;
    let actor: Actor =
        serde_json::from_value(actor).map_err(|e| DecodeError::schema("actor", e.to_string()))?;
    let kind = decode_kind(&mut obj)?;
    if let Some(extra) = obj.keys().next() {
        return Err(DecodeError::schema(extra.clone(), "unknown field"));
    }
    Ok(Event {
        seq,
        ts_ms,
        actor,
        kind,
    })
}

/// Decodes a `{"type":..,"payload":..}` body, consuming both keys from `obj`.
pub fn decode_kind(obj: &mut serde_json::Map<String, Value>) -> Result<EventKind, DecodeError> {
    let type_name = match obj.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(DecodeError::schema("type", "expected a string")),
        None => return Err(DecodeError::schema("type", "missing")),
    };
    if !EVENT_TYPES.contains(&type_name.as_str()) {
        return Err(DecodeError::UnknownEventType(type_name));
    }
    let payload = obj
        .remove("payload")
        .ok_or_else(|| DecodeError::schema("payload", "missing"))?;
    // Tag first, so the payload is deserialized in place and paths survive.
    let body = format!(
        r#"{{"type":{},"payload":{}}}"#,
        Value::String(type_name),
        payload
    );
    let mut de = serde_json::Deserializer::from_str(&body);
    serde_path_to_error::deserialize::<_, EventKind>(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path.is_empty() {
            "payload".to_owned()
        } else if path.starts_with("payload") {
            path
        } else {
            format!("payload.{path}")
        };
        DecodeError::schema(field, e.into_inner().to_string())
    })
}

/// Decoding plus cross-checks against a scenario: offers must fit the item
/// pool and every referenced category must exist.
pub fn decode_event_for(line: &str, scenario: &Scenario) -> Result<Event, DecodeError> {
    let event = decode_event(line)?;
    check_payload(&event.kind, scenario)?;
    Ok(event)
}

pub fn check_payload(kind: &EventKind, scenario: &Scenario) -> Result<(), DecodeError> {
    let known = |c: &CategoryId| scenario.quantity(*c).is_some();
    match kind {
        EventKind::OfferProposed { offer } => offer
            .check(&scenario.categories)
            .map_err(|e| DecodeError::schema("payload.offer", e.to_string())),
        EventKind::PrefStatement(stmt) => match stmt.categories().iter().find(|c| !known(c)) {
            Some(c) => Err(DecodeError::schema("payload.category", format!("unknown category {}", c.0))),
            None => Ok(()),
        },
        EventKind::PrefQuery(PrefQuery::AskPrefer { first, second }) => {
            match [first, second].into_iter().find(|c| !known(c)) {
                Some(c) => Err(DecodeError::schema("payload.category", format!("unknown category {}", c.0))),
                None => Ok(()),
            }
        }
        _ => Ok(()),
    }
}

fn take_u64(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<u64, DecodeError> {
    match obj.remove(key) {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| DecodeError::schema(key, "expected a non-negative integer")),
        None => Err(DecodeError::schema(key, "missing")),
    }
}

/// Legality violations. These are values, never panics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LegalityViolation {
    SeqNotIncreasing { seq: u64, last: u64 },
    TimeReversed { ts_ms: u64, last: u64 },
    PastDeadline { ts_ms: u64, deadline_ms: u64 },
    WrongActor { actor: Actor, kind: &'static str },
    NotInNegotiation,
    AfterEnd,
    NegotiationOpen,
    BadNegotiationIndex { k: u8 },
    SessionStartNotFirst,
    SessionEnded,
    DanglingReference { offer_seq: u64 },
    NoSuchOpenOffer { offer_seq: u64 },
    OwnOffer { offer_seq: u64 },
    PartialAcceptance { offer_seq: u64 },
    AgreementReached,
    InvalidOffer(String),
    UnknownCategory { category: CategoryId },
    SelfComparison { category: CategoryId },
    FavorAlreadyPending,
    NoPendingFavor,
    ScoreMismatch { expected: (Points, Points), found: (Points, Points) },
}

impl LegalityViolation {
    pub fn code(&self) -> &'static str {
        use LegalityViolation::*;
        match self {
            SeqNotIncreasing { .. } => "SEQ_NOT_INCREASING",
            TimeReversed { .. } => "TIME_REVERSED",
            PastDeadline { .. } => "PAST_DEADLINE",
            WrongActor { .. } => "WRONG_ACTOR",
            NotInNegotiation => "NOT_IN_NEGOTIATION",
            AfterEnd => "AFTER_END",
            NegotiationOpen => "NEGOTIATION_OPEN",
            BadNegotiationIndex { .. } => "BAD_NEGOTIATION_INDEX",
            SessionStartNotFirst => "SESSION_START_NOT_FIRST",
            SessionEnded => "SESSION_ENDED",
            DanglingReference { .. } => "DANGLING_REFERENCE",
            NoSuchOpenOffer { .. } => "NO_SUCH_OPEN_OFFER",
            OwnOffer { .. } => "OWN_OFFER",
            PartialAcceptance { .. } => "PARTIAL_ACCEPTANCE",
            AgreementReached => "AGREEMENT_REACHED",
            InvalidOffer(_) => "INVALID_OFFER",
            UnknownCategory { .. } => "UNKNOWN_CATEGORY",
            SelfComparison { .. } => "SELF_COMPARISON",
            FavorAlreadyPending => "FAVOR_ALREADY_PENDING",
            NoPendingFavor => "NO_PENDING_FAVOR",
            ScoreMismatch { .. } => "SCORE_MISMATCH",
        }
    }
}

impl fmt::Display for LegalityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use LegalityViolation::*;
        let code = self.code();
        match self {
            SeqNotIncreasing { seq, last } => write!(f, "{code}: seq {seq} after {last}"),
            TimeReversed { ts_ms, last } => write!(f, "{code}: ts_ms {ts_ms} after {last}"),
            PastDeadline { ts_ms, deadline_ms } => {
                write!(f, "{code}: ts_ms {ts_ms} beyond deadline {deadline_ms}")
            }
            WrongActor { actor, kind } => write!(f, "{code}: {actor:?} may not send {kind}"),
            BadNegotiationIndex { k } => write!(f, "{code}: k = {k}"),
            DanglingReference { offer_seq }
            | NoSuchOpenOffer { offer_seq }
            | OwnOffer { offer_seq }
            | PartialAcceptance { offer_seq } => write!(f, "{code}: offer seq {offer_seq}"),
            InvalidOffer(detail) => write!(f, "{code}: {detail}"),
            UnknownCategory { category } | SelfComparison { category } => {
                write!(f, "{code}: category {}", category.0)
            }
            ScoreMismatch { expected, found } => {
                write!(f, "{code}: expected {expected:?}, found {found:?}")
            }
            _ => f.write_str(code),
        }
    }
}

/// Result of folding one negotiation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outcome {
    pub k: u8,
    pub agreement: Option<Offer>,
    pub agent_points: Points,
    pub partner_points: Points,
    pub end_ts_ms: u64,
}

#[derive(Debug, Clone)]
struct OpenNegotiation {
    k: u8,
    scenario: usize,
    proposals: HashMap<u64, (Actor, Offer)>,
    open_agent: Option<u64>,
    open_partner: Option<u64>,
    pending_favor: Option<Actor>,
    agreement: Option<Offer>,
    last_ts: u64,
}

impl OpenNegotiation {
    fn open_slot(&mut self, actor: Actor) -> &mut Option<u64> {
        match actor {
            Actor::Partner => &mut self.open_partner,
            _ => &mut self.open_agent,
        }
    }

    fn expected_scores(&self, s: &Scenario) -> (EndReason, Points, Points) {
        match &self.agreement {
            Some(offer) => (
                EndReason::Agreement,
                utility(offer, Side::Agent, &s.agent, &s.categories).unwrap_or(0),
                utility(offer, Side::Partner, &s.partner, &s.categories).unwrap_or(0),
            ),
            None => (EndReason::Deadline, s.agent.batna, s.partner.batna),
        }
    }
}

/// Incremental legality fold over a transcript.
///
/// Negotiation `k` is checked against `scenarios[(k - 1) % len]`, so a single
/// scenario covers every negotiation of a session.
#[derive(Debug, Clone)]
pub struct Legality {
    scenarios: Vec<Scenario>,
    last_seq: Option<u64>,
    last_k: u8,
    session_ended: bool,
    current: Option<OpenNegotiation>,
    outcomes: Vec<Outcome>,
}

impl Legality {
    pub fn new(scenarios: &[Scenario]) -> Self {
        assert!(!scenarios.is_empty(), "legality needs at least one scenario");
        Legality {
            scenarios: scenarios.to_vec(),
            last_seq: None,
            last_k: 0,
            session_ended: false,
            current: None,
            outcomes: Vec::new(),
        }
    }

    pub fn outcomes(&self) -> &[Outcome] {
        &self.outcomes
    }

    pub fn in_negotiation(&self) -> bool {
        self.current.is_some()
    }

    pub fn agreement(&self) -> Option<&Offer> {
        self.current.as_ref().and_then(|n| n.agreement.as_ref())
    }

    pub fn pending_favor(&self) -> Option<Actor> {
        self.current.as_ref().and_then(|n| n.pending_favor)
    }

    /// Latest open offer of `actor` in the current negotiation.
    pub fn open_offer(&self, actor: Actor) -> Option<(u64, &Offer)> {
        let neg = self.current.as_ref()?;
        let seq = match actor {
            Actor::Partner => neg.open_partner,
            _ => neg.open_agent,
        }?;
        neg.proposals.get(&seq).map(|(_, o)| (seq, o))
    }

    /// Scores the END event of the current negotiation must carry.
    pub fn expected_end(&self) -> Option<(EndReason, Points, Points)> {
        self.current
            .as_ref()
            .map(|n| n.expected_scores(&self.scenarios[n.scenario]))
    }

    fn scenario_index(&self, k: u8) -> usize {
        (k.max(1) as usize - 1) % self.scenarios.len()
    }

    /// Scenario of the negotiation currently open, if any.
    pub fn current_scenario(&self) -> Option<&Scenario> {
        self.current.as_ref().map(|n| &self.scenarios[n.scenario])
    }

    pub fn check(&self, event: &Event) -> Result<(), LegalityViolation> {
        use LegalityViolation as V;
        if let Some(last) = self.last_seq {
            if event.seq <= last {
                return Err(V::SeqNotIncreasing { seq: event.seq, last });
            }
        }
        let kind = &event.kind;
        if kind.is_system() != (event.actor == Actor::System) {
            return Err(V::WrongActor {
                actor: event.actor,
                kind: kind.type_name(),
            });
        }
        if self.session_ended && !matches!(kind, EventKind::Notice { .. }) {
            return Err(V::SessionEnded);
        }
        match kind {
            EventKind::SessionStart { .. } => {
                return if self.last_seq.is_none() {
                    Ok(())
                } else {
                    Err(V::SessionStartNotFirst)
                };
            }
            EventKind::SessionEnd {
                agent_points,
                partner_points,
                ..
            } => {
                if self.current.is_some() {
                    return Err(V::NegotiationOpen);
                }
                let expected = self.outcomes.iter().fold((0, 0), |acc, o| {
                    (acc.0 + o.agent_points, acc.1 + o.partner_points)
                });
                return if expected == (*agent_points, *partner_points) {
                    Ok(())
                } else {
                    Err(V::ScoreMismatch {
                        expected,
                        found: (*agent_points, *partner_points),
                    })
                };
            }
            EventKind::NegotiationStart { k } => {
                if self.current.is_some() {
                    return Err(V::NegotiationOpen);
                }
                return if (1..=3).contains(k) && *k > self.last_k {
                    Ok(())
                } else {
                    Err(V::BadNegotiationIndex { k: *k })
                };
            }
            EventKind::Notice { .. } => {
                return match &self.current {
                    Some(neg) if event.ts_ms < neg.last_ts => Err(V::TimeReversed {
                        ts_ms: event.ts_ms,
                        last: neg.last_ts,
                    }),
                    _ => Ok(()),
                };
            }
            _ => {}
        }

        let Some(neg) = &self.current else {
            return Err(if self.last_k == 0 {
                V::NotInNegotiation
            } else {
                V::AfterEnd
            });
        };
        if event.ts_ms < neg.last_ts {
            return Err(V::TimeReversed {
                ts_ms: event.ts_ms,
                last: neg.last_ts,
            });
        }
        let scenario = &self.scenarios[neg.scenario];
        let deadline_ms = scenario.deadline_ms();
        if event.actor != Actor::System && event.ts_ms > deadline_ms {
            return Err(V::PastDeadline {
                ts_ms: event.ts_ms,
                deadline_ms,
            });
        }
        if neg.agreement.is_some()
            && !matches!(
                kind,
                EventKind::Expression { .. }
                    | EventKind::TextMessage { .. }
                    | EventKind::NegotiationEnd { .. }
            )
        {
            return Err(V::AgreementReached);
        }
        let categories = &scenario.categories;
        let known = |c: CategoryId| {
            if categories.get(c.0).map(|cat| cat.id) == Some(c) {
                Ok(())
            } else {
                Err(V::UnknownCategory { category: c })
            }
        };

        match kind {
            EventKind::OfferProposed { offer } => {
                offer.check(categories).map_err(|e| V::InvalidOffer(e.to_string()))
            }
            EventKind::OfferAccepted { offer_seq } | EventKind::OfferRejected { offer_seq } => {
                let offer_seq = *offer_seq;
                let Some((proposer, offer)) = neg.proposals.get(&offer_seq) else {
                    return Err(V::DanglingReference { offer_seq });
                };
                if *proposer == event.actor {
                    return Err(V::OwnOffer { offer_seq });
                }
                let open = match proposer {
                    Actor::Partner => neg.open_partner,
                    _ => neg.open_agent,
                };
                if open != Some(offer_seq) {
                    return Err(V::NoSuchOpenOffer { offer_seq });
                }
                if matches!(kind, EventKind::OfferAccepted { .. })
                    && !is_full(offer, categories).unwrap_or(false)
                {
                    return Err(V::PartialAcceptance { offer_seq });
                }
                Ok(())
            }
            EventKind::PrefStatement(stmt) => {
                for c in stmt.categories() {
                    known(c)?;
                }
                match *stmt {
                    PrefStatement::Prefer { better, worse } if better == worse => {
                        Err(V::SelfComparison { category: better })
                    }
                    _ => Ok(()),
                }
            }
            EventKind::PrefQuery(PrefQuery::AskPrefer { first, second }) => {
                known(*first)?;
                known(*second)?;
                if first == second {
                    Err(V::SelfComparison { category: *first })
                } else {
                    Ok(())
                }
            }
            EventKind::FavorRequest {} => {
                if neg.pending_favor.is_some() {
                    Err(V::FavorAlreadyPending)
                } else {
                    Ok(())
                }
            }
            EventKind::FavorAccept {} | EventKind::FavorReject {} => {
                match neg.pending_favor {
                    Some(requester) if requester != event.actor => Ok(()),
                    _ => Err(V::NoPendingFavor),
                }
            }
            EventKind::NegotiationEnd {
                agent_points,
                partner_points,
                reason,
            } => {
                let (exp_reason, a, p) = neg.expected_scores(scenario);
                if exp_reason == *reason && (a, p) == (*agent_points, *partner_points) {
                    Ok(())
                } else {
                    Err(V::ScoreMismatch {
                        expected: (a, p),
                        found: (*agent_points, *partner_points),
                    })
                }
            }
            _ => Ok(()),
        }
    }

    /// Applies an event already accepted by [`Legality::check`].
    pub fn apply(&mut self, event: &Event) {
        self.last_seq = Some(event.seq);
        match &event.kind {
            EventKind::SessionEnd { .. } => self.session_ended = true,
            EventKind::NegotiationStart { k } => {
                self.last_k = *k;
                self.current = Some(OpenNegotiation {
                    k: *k,
                    scenario: self.scenario_index(*k),
                    proposals: HashMap::new(),
                    open_agent: None,
                    open_partner: None,
                    pending_favor: None,
                    agreement: None,
                    last_ts: event.ts_ms,
                });
                return;
            }
            _ => {}
        }
        let Some(neg) = self.current.as_mut() else {
            return;
        };
        let scenario = &self.scenarios[neg.scenario];
        neg.last_ts = neg.last_ts.max(event.ts_ms);
        match &event.kind {
            EventKind::OfferProposed { offer } => {
                neg.proposals.insert(event.seq, (event.actor, offer.clone()));
                *neg.open_slot(event.actor) = Some(event.seq);
            }
            EventKind::OfferAccepted { offer_seq } | EventKind::OfferRejected { offer_seq } => {
                let (proposer, offer) = neg.proposals[offer_seq].clone();
                *neg.open_slot(proposer) = None;
                if matches!(event.kind, EventKind::OfferAccepted { .. }) {
                    neg.agreement = Some(offer);
                }
            }
            EventKind::FavorRequest {} => neg.pending_favor = Some(event.actor),
            EventKind::FavorAccept {} | EventKind::FavorReject {} => neg.pending_favor = None,
            EventKind::NegotiationEnd { .. } => {
                let (_, agent_points, partner_points) = neg.expected_scores(scenario);
                self.outcomes.push(Outcome {
                    k: neg.k,
                    agreement: neg.agreement.clone(),
                    agent_points,
                    partner_points,
                    end_ts_ms: event.ts_ms,
                });
                self.current = None;
            }
            _ => {}
        }
    }

    pub fn step(&mut self, event: &Event) -> Result<(), LegalityViolation> {
        self.check(event)?;
        self.apply(event);
        Ok(())
    }
}

/// Checks `event` against a legal `history` of events on `scenario`.
pub fn check_legal(
    event: &Event,
    history: &[Event],
    scenario: &Scenario,
) -> Result<(), LegalityViolation> {
    let mut legality = Legality::new(std::slice::from_ref(scenario));
    for e in history {
        legality.apply(e);
    }
    legality.check(event)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("empty transcript")]
    Empty,
    #[error("ILLEGAL_TRANSCRIPT at seq {seq}: {violation}")]
    Illegal { seq: u64, violation: LegalityViolation },
    #[error("ILLEGAL_TRANSCRIPT: negotiation {k} never ended")]
    Unterminated { k: u8 },
    #[error("ILLEGAL_TRANSCRIPT: expected exactly one negotiation, found {0}")]
    NegotiationCount(usize),
}

impl ReplayError {
    /// Seq of the first offending event, when one exists.
    pub fn seq(&self) -> Option<u64> {
        match self {
            ReplayError::Illegal { seq, .. } => Some(*seq),
            _ => None,
        }
    }
}

/// Replays a whole session transcript (any number of negotiations).
pub fn replay_session(events: &[Event], scenarios: &[Scenario]) -> Result<Vec<Outcome>, ReplayError> {
    if events.is_empty() {
        return Err(ReplayError::Empty);
    }
    let mut legality = Legality::new(scenarios);
    for event in events {
        legality
            .step(event)
            .map_err(|violation| ReplayError::Illegal {
                seq: event.seq,
                violation,
            })?;
    }
    if let Some(neg) = &legality.current {
        return Err(ReplayError::Unterminated { k: neg.k });
    }
    Ok(legality.outcomes)
}

/// Replays a transcript holding exactly one negotiation.
pub fn replay(transcript: &Transcript, scenario: &Scenario) -> Result<Outcome, ReplayError> {
    let mut outcomes = replay_session(&transcript.events, std::slice::from_ref(scenario))?;
    if outcomes.len() != 1 {
        return Err(ReplayError::NegotiationCount(outcomes.len()));
    }
    Ok(outcomes.remove(0))
}

/// An ordered event log plus the identifiers it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Transcript {
    pub session_id: String,
    pub scenario: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {error}")]
pub struct TranscriptError {
    pub line: usize,
    pub error: DecodeError,
}

impl Transcript {
    pub fn new(session_id: impl Into<String>, scenario: impl Into<String>, events: Vec<Event>) -> Self {
        Transcript {
            session_id: session_id.into(),
            scenario: scenario.into(),
            events,
        }
    }

    pub fn to_jsonl(&self) -> String {
        events_to_jsonl(&self.events)
    }

    /// Parses JSON Lines; blank lines are skipped. Identifiers come from a
    /// leading SESSION_START event when present.
    pub fn parse_jsonl(text: &str) -> Result<Transcript, TranscriptError> {
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            events.push(decode_event(line).map_err(|error| TranscriptError { line: i + 1, error })?);
        }
        let (session_id, scenario) = match events.first().map(|e| &e.kind) {
            Some(EventKind::SessionStart { session_id, scenarios }) => {
                (session_id.clone(), scenarios.join(","))
            }
            _ => (String::new(), String::new()),
        };
        Ok(Transcript {
            session_id,
            scenario,
            events,
        })
    }
}

pub fn events_to_jsonl(events: &[Event]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&encode_event(e));
        out.push('\n');
    }
    out
}
