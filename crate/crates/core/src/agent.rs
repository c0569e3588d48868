//! The Pilot negotiating agent.
//!
//! Pilot leads: it primes the partner, asks for their preferences before any
//! offer, asks for a favor once it has heard something, and then walks a
//! concession ladder one least-wanted unit at a time. It answers preference
//! questions truthfully, overstates its BATNA, and only deals in full offers.
//!
//! The agent is a sequential reactor: one event in, a batch of event bodies
//! out. Sequencing and timestamps belong to the engine.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{concede_units, is_full, CategoryId, Offer, Points, ScenarioView, Side};
use crate::opponent::OpponentModel;
use crate::protocol::{
    Actor, Emotion, Event, EventKind, PrefQuery, PrefStatement, Template,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Factor applied to the true BATNA when asked about it.
    pub batna_inflation: f64,
    /// Extra units conceded when returning a favor.
    pub favor_return_units: u32,
    /// Units reclaimed in the initial offer of negotiation k (index k - 1).
    pub greed: Vec<u32>,
    pub accept_slack: Points,
    /// Partner silence (seconds) tolerated during elicitation before nudging.
    pub idle_nudge_s: f64,
    /// Trailing fraction of the deadline in which only the BATNA test applies.
    pub endgame_fraction: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            batna_inflation: 1.5,
            favor_return_units: 3,
            greed: vec![0, 1, 2],
            accept_slack: 0,
            idle_nudge_s: 20.0,
            endgame_fraction: 0.10,
        }
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl PolicyConfig {
    pub fn from_json(text: &str) -> Result<PolicyConfig, PolicyError> {
        let cfg: PolicyConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Invalid(m.to_owned()));
        if self.batna_inflation.is_nan() || self.batna_inflation < 1.0 {
            return bad("batna_inflation must be >= 1");
        }
        if self.greed.windows(2).any(|w| w[0] > w[1]) {
            return bad("greed must be non-decreasing in k");
        }
        if self.idle_nudge_s.is_nan() || self.idle_nudge_s <= 0.0 {
            return bad("idle_nudge_s must be positive");
        }
        if !(0.0..=1.0).contains(&self.endgame_fraction) {
            return bad("endgame_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Units reclaimed at negotiation `k`. Past the end of the schedule the
    /// last entry repeats; an empty schedule means `k - 1`.
    pub fn greed(&self, k: u8) -> u32 {
        let i = k.max(1) as usize - 1;
        match self.greed.get(i).or(self.greed.last()) {
            Some(g) => *g,
            None => i as u32,
        }
    }

    fn idle_nudge_ms(&self) -> u64 {
        (self.idle_nudge_s * 1000.0).round() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Elicit,
    Bargain,
    Endgame,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OfferMode {
    Normal,
    FavorExploit,
    FavorReturn,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FavorLedger {
    pub owed_to_partner: u32,
    pub requested_this_negotiation: bool,
    pub pending_request: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FavorAction {
    Request,
    IssueExploit,
    IssueReturn,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("ILLEGAL_INPUT: {0}")]
    IllegalInput(String),
    #[error("LADDER_EXHAUSTED")]
    LadderExhausted,
    #[error("PARTIAL_OFFER")]
    PartialOffer,
    #[error("NO_PENDING_FAVOR")]
    NoPendingFavor,
}

/// Favor bookkeeping for one trigger.
///
/// A request is only made once the partner has shared at least one
/// preference, at most once per negotiation, and never while a favor is
/// still owed.
pub fn favor_transition(
    ledger: &FavorLedger,
    trigger: &EventKind,
    statement_count: u32,
) -> Result<(FavorLedger, Option<FavorAction>), AgentError> {
    let mut next = ledger.clone();
    let action = match trigger {
        EventKind::NegotiationStart { .. } => {
            next.requested_this_negotiation = false;
            next.pending_request = false;
            (next.owed_to_partner >= 1).then_some(FavorAction::IssueReturn)
        }
        EventKind::PrefStatement(_) => {
            if statement_count >= 1
                && !next.requested_this_negotiation
                && !next.pending_request
                && next.owed_to_partner == 0
            {
                next.requested_this_negotiation = true;
                next.pending_request = true;
                Some(FavorAction::Request)
            } else {
                None
            }
        }
        EventKind::FavorAccept {} => {
            if !next.pending_request {
                return Err(AgentError::NoPendingFavor);
            }
            next.pending_request = false;
            next.owed_to_partner += 1;
            Some(FavorAction::IssueExploit)
        }
        EventKind::FavorReject {} => {
            if !next.pending_request {
                return Err(AgentError::NoPendingFavor);
            }
            next.pending_request = false;
            None
        }
        _ => None,
    };
    Ok((next, action))
}

/// Emotion shown in response to a partner action in negotiation `k`.
pub fn select_expression(trigger: &EventKind, k: u8) -> Emotion {
    let last = k >= 3;
    match trigger {
        EventKind::OfferRejected { .. } if last => Emotion::Angry,
        EventKind::OfferRejected { .. } => Emotion::Sad,
        EventKind::OfferAccepted { .. } | EventKind::FavorAccept {} => Emotion::Happy,
        EventKind::FavorReject {} if last => Emotion::Sad,
        _ => Emotion::Neutral,
    }
}

/// Inflated BATNA, rounded half up to whole points.
pub fn reported_batna(true_batna: Points, cfg: &PolicyConfig) -> Points {
    (cfg.batna_inflation * true_batna as f64 + 0.5).floor() as Points
}

/// Priming, guidance and a preference question. Never an offer.
pub fn opening_sequence(_k: u8) -> Vec<EventKind> {
    vec![
        EventKind::TextMessage { template: Template::Prime1 },
        EventKind::TextMessage { template: Template::Prime2 },
        EventKind::TextMessage { template: Template::Guide },
        EventKind::PrefQuery(PrefQuery::AskBest),
    ]
}

/// Truthful answers from the agent's own profile; BATNA answers are inflated.
pub fn answer_query(query: &EventKind, view: &ScenarioView, cfg: &PolicyConfig) -> Option<EventKind> {
    let value = |c: CategoryId| view.own.value(c);
    let ids = || view.categories.iter().map(|c| c.id);
    let stmt = match query {
        EventKind::BatnaQuery {} => {
            return Some(EventKind::BatnaStatement {
                points: reported_batna(view.own.batna, cfg),
            })
        }
        EventKind::PrefQuery(PrefQuery::AskBest) => PrefStatement::Best {
            // max_by_key keeps the last maximum; reverse to prefer the lowest id
            category: ids().rev().max_by_key(|c| value(*c))?,
        },
        EventKind::PrefQuery(PrefQuery::AskWorst) => PrefStatement::Worst {
            category: ids().min_by_key(|c| value(*c))?,
        },
        EventKind::PrefQuery(PrefQuery::AskPrefer { first, second }) => {
            if value(*first) >= value(*second) {
                PrefStatement::Prefer { better: *first, worse: *second }
            } else {
                PrefStatement::Prefer { better: *second, worse: *first }
            }
        }
        _ => return None,
    };
    Some(EventKind::PrefStatement(stmt))
}

/// The agent's first offer of a negotiation.
pub fn initial_offer(
    model: &OpponentModel,
    view: &ScenarioView,
    k: u8,
    mode: OfferMode,
    cfg: &PolicyConfig,
) -> Offer {
    let cats = &view.categories;
    let own = &view.own;
    match mode {
        OfferMode::Normal => {
            let estimates = model.estimated_values(cats);
            let est_sum: u64 = estimates.values().map(|w| *w as u64).sum();
            let own_sum: u64 = cats.iter().map(|c| own.value(c.id) as u64).sum();
            let mut offer = Offer::default();
            for c in cats {
                let est = estimates.get(&c.id).copied().unwrap_or(0) as u64;
                let mine = own.value(c.id) as u64;
                // Compare value shares without division; ties stay with the agent.
                let to_agent = model.is_empty() || own_sum == 0 || mine * est_sum >= est * own_sum;
                let side = if to_agent { Side::Agent } else { Side::Partner };
                offer.set(side, c.id, c.quantity);
            }
            let mut reclaim: Vec<CategoryId> = cats
                .iter()
                .map(|c| c.id)
                .filter(|c| offer.units(Side::Partner, *c) > 0)
                .collect();
            reclaim.sort_by(|a, b| own.value(*b).cmp(&own.value(*a)).then(a.cmp(b)));
            let mut remaining = cfg.greed(k);
            for c in reclaim {
                while remaining > 0 && offer.units(Side::Partner, c) > 0 {
                    offer.set(Side::Partner, c, offer.units(Side::Partner, c) - 1);
                    offer.set(Side::Agent, c, offer.units(Side::Agent, c) + 1);
                    remaining -= 1;
                }
            }
            offer
        }
        OfferMode::FavorExploit => {
            let mut offer = Offer::all_to(Side::Agent, cats);
            let order = own.concession_order(cats);
            let gift = model.top_category(cats).or_else(|| order.first().copied());
            if let Some(c) = gift {
                offer.set(Side::Agent, c, offer.units(Side::Agent, c) - 1);
                offer.set(Side::Partner, c, 1);
            }
            offer
        }
        OfferMode::FavorReturn => {
            let normal = initial_offer(model, view, k, OfferMode::Normal, cfg);
            let order = own.concession_order(cats);
            let n = cfg.favor_return_units.min(normal.held(Side::Agent));
            concede_units(&normal, Side::Agent, n, &order, cats).expect("normal offers are full")
        }
    }
}

/// The agent's current position: its latest own offer and the order in which
/// it gives units away.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ladder {
    pub current: Offer,
    pub order: Vec<CategoryId>,
}

impl Ladder {
    fn next(&self, view: &ScenarioView) -> Result<Offer, AgentError> {
        if self.current.held(Side::Agent) == 0 {
            return Err(AgentError::LadderExhausted);
        }
        concede_units(&self.current, Side::Agent, 1, &self.order, &view.categories)
            .map_err(|_| AgentError::LadderExhausted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub k: u8,
    pub phase: Phase,
    pub model: OpponentModel,
    pub ladder: Option<Ladder>,
    pub ledger: FavorLedger,
    pub last_own_offer_seq: Option<u64>,
    /// Whether the latest own offer is still awaiting a partner response.
    pub own_offer_open: bool,
    nudges: u32,
    idle_from_ms: u64,
}

impl Default for AgentState {
    fn default() -> Self {
        AgentState {
            k: 0,
            phase: Phase::Done,
            model: OpponentModel::new(),
            ladder: None,
            ledger: FavorLedger::default(),
            last_own_offer_seq: None,
            own_offer_open: false,
            nudges: 0,
            idle_from_ms: 0,
        }
    }
}

impl AgentState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Resets per-negotiation state and returns the opening batch. Only the
    /// favor ledger carries over between negotiations.
    pub fn start_negotiation(&mut self, k: u8) -> Vec<EventKind> {
        let (ledger, _) = favor_transition(&self.ledger, &EventKind::NegotiationStart { k }, 0)
            .expect("start never fails");
        *self = AgentState {
            k,
            phase: Phase::Elicit,
            ledger,
            ..AgentState::default()
        };
        opening_sequence(k)
    }

    /// When the agent wants to be woken if nothing else happens.
    pub fn wake_at_ms(&self, cfg: &PolicyConfig) -> Option<u64> {
        (self.phase == Phase::Elicit).then(|| self.idle_from_ms + cfg.idle_nudge_ms())
    }

    /// Concedes the cheapest held unit and moves the ladder.
    pub fn concede_step(&mut self, view: &ScenarioView) -> Result<Offer, AgentError> {
        let ladder = self.ladder.as_mut().ok_or(AgentError::LadderExhausted)?;
        let next = ladder.next(view)?;
        ladder.current = next.clone();
        Ok(next)
    }

    /// Accept iff the offer beats the true BATNA and either matches the next
    /// concession candidate or the endgame has begun.
    pub fn should_accept(
        &self,
        offer: &Offer,
        clock_ms: u64,
        view: &ScenarioView,
        cfg: &PolicyConfig,
    ) -> Result<bool, AgentError> {
        if !is_full(offer, &view.categories).unwrap_or(false) {
            return Err(AgentError::PartialOffer);
        }
        let value = view
            .own_utility(offer)
            .map_err(|e| AgentError::IllegalInput(e.to_string()))?;
        if value < view.own.batna {
            return Ok(false);
        }
        let endgame = clock_ms as f64 >= (1.0 - cfg.endgame_fraction) * view.deadline_ms() as f64;
        let ladder = match &self.ladder {
            Some(l) => l.clone(),
            None => Ladder {
                current: self.prospective_offer(view, cfg),
                order: view.own.concession_order(&view.categories),
            },
        };
        let candidate = match ladder.next(view) {
            Ok(next) => next,
            Err(_) => ladder.current,
        };
        let candidate_value = view.own_utility(&candidate).unwrap_or(0);
        Ok(value + cfg.accept_slack >= candidate_value || endgame)
    }

    fn prospective_mode(&self) -> OfferMode {
        if self.ledger.owed_to_partner >= 1 {
            OfferMode::FavorReturn
        } else {
            OfferMode::Normal
        }
    }

    fn prospective_offer(&self, view: &ScenarioView, cfg: &PolicyConfig) -> Offer {
        initial_offer(&self.model, view, self.k, self.prospective_mode(), cfg)
    }

    fn issue(&mut self, offer: Offer, view: &ScenarioView) -> EventKind {
        self.ladder = Some(Ladder {
            current: offer.clone(),
            order: view.own.concession_order(&view.categories),
        });
        if self.phase == Phase::Elicit {
            self.phase = Phase::Bargain;
        }
        EventKind::OfferProposed { offer }
    }

    fn open_bargaining(&mut self, view: &ScenarioView, cfg: &PolicyConfig) -> Vec<EventKind> {
        let mode = self.prospective_mode();
        let offer = initial_offer(&self.model, view, self.k, mode, cfg);
        let template = if mode == OfferMode::FavorReturn {
            self.ledger.owed_to_partner -= 1;
            Template::FavorReturn
        } else {
            Template::Propose
        };
        vec![EventKind::TextMessage { template }, self.issue(offer, view)]
    }

    /// Handles one committed event and returns the agent's reply batch.
    ///
    /// Replies to partner actions always lead with exactly one EXPRESSION.
    /// The agent's own events are only recorded; timers drive elicitation.
    pub fn on_event(
        &mut self,
        event: &Event,
        clock_ms: u64,
        view: &ScenarioView,
        cfg: &PolicyConfig,
    ) -> Result<Vec<EventKind>, AgentError> {
        match event.actor {
            Actor::Agent => {
                if let EventKind::OfferProposed { .. } = event.kind {
                    self.last_own_offer_seq = Some(event.seq);
                    self.own_offer_open = true;
                }
                // partner silence is measured from the agent's last word
                if self.phase == Phase::Elicit {
                    self.idle_from_ms = self.idle_from_ms.max(event.ts_ms);
                }
                return Ok(Vec::new());
            }
            Actor::System => return Ok(self.on_system(event, clock_ms, view, cfg)),
            Actor::Partner => {}
        }
        if self.phase == Phase::Bargain
            && clock_ms as f64 >= (1.0 - cfg.endgame_fraction) * view.deadline_ms() as f64
        {
            self.phase = Phase::Endgame;
        }
        let mut out = vec![EventKind::Expression {
            emotion: select_expression(&event.kind, self.k),
        }];
        if self.phase == Phase::Done {
            return Ok(out);
        }
        match &event.kind {
            EventKind::PrefStatement(stmt) => match self.model.ingest(stmt, &view.categories) {
                Ok(model) => {
                    self.model = model;
                    if self.phase == Phase::Elicit {
                        let (ledger, action) =
                            favor_transition(&self.ledger, &event.kind, self.model.statement_count())?;
                        self.ledger = ledger;
                        if action == Some(FavorAction::Request) {
                            self.idle_from_ms = clock_ms;
                            out.push(EventKind::TextMessage { template: Template::FavorAsk });
                            out.push(EventKind::FavorRequest {});
                        } else if !self.ledger.pending_request {
                            out.extend(self.open_bargaining(view, cfg));
                        }
                    }
                }
                Err(_) => out.push(EventKind::TextMessage { template: Template::Contradiction }),
            },
            EventKind::PrefQuery(_) | EventKind::BatnaQuery {} => {
                out.extend(answer_query(&event.kind, view, cfg));
            }
            EventKind::FavorAccept {} => {
                let (ledger, _) =
                    favor_transition(&self.ledger, &event.kind, self.model.statement_count())?;
                self.ledger = ledger;
                let offer = initial_offer(&self.model, view, self.k, OfferMode::FavorExploit, cfg);
                out.push(EventKind::TextMessage { template: Template::FavorThanks });
                out.push(self.issue(offer, view));
            }
            EventKind::FavorReject {} => {
                let (ledger, _) =
                    favor_transition(&self.ledger, &event.kind, self.model.statement_count())?;
                self.ledger = ledger;
                out.push(EventKind::TextMessage { template: Template::FavorUnderstood });
                if self.phase == Phase::Elicit {
                    out.extend(self.open_bargaining(view, cfg));
                }
            }
            EventKind::FavorRequest {} => out.push(EventKind::FavorReject {}),
            EventKind::OfferAccepted { offer_seq } => {
                if Some(*offer_seq) != self.last_own_offer_seq || !self.own_offer_open {
                    return Err(AgentError::IllegalInput(format!(
                        "acceptance of unknown offer {offer_seq}"
                    )));
                }
                self.own_offer_open = false;
                self.phase = Phase::Done;
            }
            EventKind::OfferRejected { offer_seq } => {
                if Some(*offer_seq) != self.last_own_offer_seq || !self.own_offer_open {
                    return Err(AgentError::IllegalInput(format!(
                        "rejection of unknown offer {offer_seq}"
                    )));
                }
                self.own_offer_open = false;
                out.extend(self.next_rung(view));
            }
            EventKind::OfferProposed { offer } => {
                let seq = event.seq;
                match self.should_accept(offer, clock_ms, view, cfg) {
                    Err(AgentError::PartialOffer) => {
                        out.push(EventKind::OfferRejected { offer_seq: seq });
                        out.push(EventKind::TextMessage { template: Template::SteerFull });
                    }
                    Err(e) => return Err(e),
                    Ok(true) => {
                        out.push(EventKind::OfferAccepted { offer_seq: seq });
                        self.phase = Phase::Done;
                    }
                    Ok(false) => {
                        out.push(EventKind::OfferRejected { offer_seq: seq });
                        if self.phase == Phase::Elicit {
                            out.push(EventKind::TextMessage { template: Template::ElicitFirst });
                        } else if self.own_offer_open {
                            out.push(EventKind::TextMessage { template: Template::OfferStands });
                        } else {
                            out.extend(self.next_rung(view));
                        }
                    }
                }
            }
            _ => {}
        }
        Ok(out)
    }

    fn next_rung(&mut self, view: &ScenarioView) -> Vec<EventKind> {
        match self.concede_step(view) {
            Ok(offer) => vec![EventKind::OfferProposed { offer }],
            Err(_) => vec![EventKind::TextMessage { template: Template::NothingLeft }],
        }
    }

    fn on_system(
        &mut self,
        event: &Event,
        clock_ms: u64,
        view: &ScenarioView,
        cfg: &PolicyConfig,
    ) -> Vec<EventKind> {
        if !matches!(event.kind, EventKind::Timer { .. }) || self.phase != Phase::Elicit {
            return Vec::new();
        }
        if self.ledger.pending_request {
            return self.open_bargaining(view, cfg);
        }
        self.nudges += 1;
        self.idle_from_ms = clock_ms;
        match self.nudges {
            1 => vec![EventKind::TextMessage { template: Template::Nudge1 }],
            2 => vec![EventKind::TextMessage { template: Template::Nudge2 }],
            _ => self.open_bargaining(view, cfg),
        }
    }
}

/// Display text for every menu template.
pub fn template_catalog() -> &'static BTreeMap<Template, String> {
    static CATALOG: OnceLock<BTreeMap<Template, String>> = OnceLock::new();
    CATALOG.get_or_init(|| {
        serde_json::from_str(include_str!("../data/templates.json")).expect("bundled catalog parses")
    })
}

pub fn template_text(template: Template) -> &'static str {
    template_catalog()
        .get(&template)
        .map(String::as_str)
        .unwrap_or("")
}
