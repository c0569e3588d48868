//! Session orchestration: sequencing, clocks, deadlines, scoring, and the
//! scripted partners used for simulation.
//!
//! A [`Session`] is the single writer of a transcript. Partner events go in
//! through [`Session::submit`]; the agent's replies, lifecycle events and
//! notices for refused input come back out already sequenced.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentState, PolicyConfig};
use crate::model::{utility, validate_scenario, CategoryId, Offer, Points, Scenario, ScenarioView, Side};
use crate::protocol::{
    Actor, EndReason, Event, EventKind, Legality, LegalityViolation, PrefQuery, PrefStatement,
    TimerKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("CONFIG_INVALID: {0}")]
    ConfigInvalid(String),
}

/// Simulated time charged per event, in milliseconds.
///
/// Offer actions (propose, accept, reject) cost `offer_ms`; every other
/// party event except expressions costs `message_ms`. System events are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostTable {
    pub offer_ms: u64,
    pub message_ms: u64,
    pub expression_ms: u64,
}

impl Default for CostTable {
    fn default() -> Self {
        CostTable {
            offer_ms: 10_000,
            message_ms: 5_000,
            expression_ms: 0,
        }
    }
}

impl CostTable {
    pub fn cost(&self, kind: &EventKind) -> u64 {
        match kind {
            _ if kind.is_system() => 0,
            EventKind::OfferProposed { .. }
            | EventKind::OfferAccepted { .. }
            | EventKind::OfferRejected { .. } => self.offer_ms,
            EventKind::Expression { .. } => self.expression_ms,
            _ => self.message_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Simulated,
    Realtime,
}

/// Time source for one session. Readings are milliseconds since the current
/// negotiation started.
pub trait Clock {
    fn now_ms(&self) -> u64;
    /// Timestamp an event of this kind would carry if committed now.
    fn stamp(&self, kind: &EventKind) -> u64;
    /// Records that an event stamped `ts_ms` was committed.
    fn commit(&mut self, ts_ms: u64);
    /// Starts counting from zero for a new negotiation.
    fn restart(&mut self);
    /// Moves simulated time forward to `ts_ms`; real clocks ignore this.
    fn jump_to(&mut self, ts_ms: u64);
}

#[derive(Debug, Clone, Default)]
pub struct SimClock {
    now: u64,
    costs: CostTable,
}

impl SimClock {
    pub fn new(costs: CostTable) -> Self {
        SimClock { now: 0, costs }
    }
}

impl Clock for SimClock {
    fn now_ms(&self) -> u64 {
        self.now
    }

    fn stamp(&self, kind: &EventKind) -> u64 {
        self.now + self.costs.cost(kind)
    }

    fn commit(&mut self, ts_ms: u64) {
        self.now = self.now.max(ts_ms);
    }

    fn restart(&mut self) {
        self.now = 0;
    }

    fn jump_to(&mut self, ts_ms: u64) {
        self.now = self.now.max(ts_ms);
    }
}

#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
    floor: u64,
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock {
            origin: Instant::now(),
            floor: 0,
        }
    }
}

impl WallClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Instant at which this clock will read `ts_ms`.
    pub fn instant_at(&self, ts_ms: u64) -> Instant {
        self.origin + Duration::from_millis(ts_ms)
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        (self.origin.elapsed().as_millis() as u64).max(self.floor)
    }

    fn stamp(&self, _kind: &EventKind) -> u64 {
        self.now_ms()
    }

    fn commit(&mut self, ts_ms: u64) {
        self.floor = self.floor.max(ts_ms);
    }

    fn restart(&mut self) {
        self.origin = Instant::now();
        self.floor = 0;
    }

    fn jump_to(&mut self, _ts_ms: u64) {}
}

/// Result of one partner submission: everything committed as a consequence,
/// in seq order, and the reason the input was refused, if it was.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Submission {
    pub events: Vec<Event>,
    pub rejected: Option<LegalityViolation>,
}

/// One session: negotiations run back to back, each on its own scenario.
pub struct Session<C: Clock> {
    session_id: String,
    scenarios: Vec<Scenario>,
    policy: PolicyConfig,
    clock: C,
    plan: VecDeque<u8>,
    session_events: bool,
    agent: AgentState,
    legality: Legality,
    events: Vec<Event>,
    next_seq: u64,
    last_ts: u64,
    started: bool,
    finished: bool,
}

impl<C: Clock> Session<C> {
    /// A full session over negotiations `1..=scenarios.len()` (at most 3).
    pub fn new(session_id: impl Into<String>, scenarios: Vec<Scenario>, policy: PolicyConfig, clock: C) -> Self {
        let plan = (1..=scenarios.len().min(3) as u8).collect();
        Self::build(session_id.into(), scenarios, policy, clock, plan, true, AgentState::new())
    }

    /// A single negotiation `k` with a given agent state and no session framing.
    pub fn single(scenario: Scenario, k: u8, policy: PolicyConfig, clock: C, agent: AgentState) -> Self {
        Self::build(String::new(), vec![scenario], policy, clock, VecDeque::from([k]), false, agent)
    }

    fn build(
        session_id: String,
        scenarios: Vec<Scenario>,
        policy: PolicyConfig,
        clock: C,
        plan: VecDeque<u8>,
        session_events: bool,
        agent: AgentState,
    ) -> Self {
        Session {
            session_id,
            legality: Legality::new(&scenarios),
            scenarios,
            policy,
            clock,
            plan,
            session_events,
            agent,
            events: Vec::new(),
            next_seq: 1,
            last_ts: 0,
            started: false,
            finished: false,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn legality(&self) -> &Legality {
        &self.legality
    }

    pub fn clock(&self) -> &C {
        &self.clock
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Scenario of the open negotiation.
    pub fn scenario(&self) -> Option<&Scenario> {
        self.legality.current_scenario()
    }

    /// What the partner is allowed to see of the open negotiation.
    pub fn partner_view(&self) -> Option<ScenarioView> {
        self.scenario().map(|s| s.view_for(Side::Partner))
    }

    /// Emits the session header and opens the first negotiation.
    pub fn start(&mut self) -> Vec<Event> {
        if self.started {
            return Vec::new();
        }
        self.started = true;
        let from = self.events.len();
        if self.session_events {
            let names = self.scenarios.iter().map(|s| s.name.clone()).collect();
            self.commit_system(EventKind::SessionStart {
                session_id: self.session_id.clone(),
                scenarios: names,
            });
        }
        self.open_next();
        self.events[from..].to_vec()
    }

    /// Submits one partner action. Illegal input is answered with a NOTICE.
    pub fn submit(&mut self, kind: EventKind) -> Submission {
        let from = self.events.len();
        let mut rejected = None;
        if self.finished || !self.legality.in_negotiation() {
            rejected = Some(if self.finished {
                LegalityViolation::SessionEnded
            } else {
                LegalityViolation::NotInNegotiation
            });
        } else if self.expire_if_due() {
            rejected = Some(LegalityViolation::PastDeadline {
                ts_ms: self.clock.now_ms(),
                deadline_ms: self.deadline_ms(),
            });
        } else {
            let ts = self.clock.stamp(&kind).max(self.last_ts);
            if ts > self.deadline_ms() {
                rejected = Some(LegalityViolation::PastDeadline {
                    ts_ms: ts,
                    deadline_ms: self.deadline_ms(),
                });
                self.expire();
            } else {
                let event = self.event(Actor::Partner, ts, kind);
                match self.legality.check(&event) {
                    Ok(()) => {
                        self.record(event.clone());
                        self.feed_agent(&event);
                        self.settle();
                    }
                    Err(violation) => {
                        self.notice(violation.code(), violation.to_string());
                        rejected = Some(violation);
                    }
                }
            }
        }
        if let Some(v) = rejected.as_ref().filter(|_| from == self.events.len() && !self.finished) {
            let (code, detail) = (v.code(), v.to_string());
            self.notice(code, detail);
        }
        Submission {
            events: self.events[from..].to_vec(),
            rejected,
        }
    }

    /// Records a NOTICE for input refused before it could become an event.
    pub fn reject(&mut self, code: &str, detail: impl Into<String>) -> Vec<Event> {
        let from = self.events.len();
        self.notice(code, detail.into());
        self.events[from..].to_vec()
    }

    /// Next time (negotiation clock) at which [`Session::tick`] has work to do.
    pub fn wake_at_ms(&self) -> Option<u64> {
        if self.finished || !self.legality.in_negotiation() {
            return None;
        }
        let deadline = self.deadline_ms();
        Some(match self.agent.wake_at_ms(&self.policy) {
            Some(t) => t.min(deadline),
            None => deadline,
        })
    }

    /// Fires whatever is due at the current time: the deadline or an idle timer.
    pub fn tick(&mut self) -> Vec<Event> {
        let from = self.events.len();
        if !self.finished && self.legality.in_negotiation() && !self.expire_if_due() {
            let now = self.clock.now_ms();
            if matches!(self.agent.wake_at_ms(&self.policy), Some(t) if t <= now) {
                let event = self.commit_system(EventKind::Timer {
                    timer: TimerKind::IdleNudge,
                });
                self.feed_agent(&event);
                self.settle();
            }
        }
        self.events[from..].to_vec()
    }

    /// Simulated only: moves the clock to the next wake time and fires it.
    pub fn advance(&mut self) -> Vec<Event> {
        match self.wake_at_ms() {
            Some(t) => {
                self.clock.jump_to(t);
                self.tick()
            }
            None => Vec::new(),
        }
    }

    pub fn into_parts(self) -> (Vec<Event>, AgentState) {
        (self.events, self.agent)
    }

    fn deadline_ms(&self) -> u64 {
        self.scenario().map(|s| s.deadline_ms()).unwrap_or(0)
    }

    fn event(&self, actor: Actor, ts_ms: u64, kind: EventKind) -> Event {
        let seq = self.next_seq;
        Event {
            seq,
            ts_ms,
            actor,
            kind,
        }
    }

    fn record(&mut self, event: Event) {
        self.legality.apply(&event);
        self.clock.commit(event.ts_ms);
        self.last_ts = self.last_ts.max(event.ts_ms);
        self.next_seq = event.seq + 1;
        self.events.push(event);
    }

    fn commit_system(&mut self, kind: EventKind) -> Event {
        let ts = self.clock.now_ms().max(self.last_ts);
        self.commit_system_at(kind, ts)
    }

    fn commit_system_at(&mut self, kind: EventKind, ts: u64) -> Event {
        let event = self.event(Actor::System, ts, kind);
        if let Err(v) = self.legality.check(&event) {
            debug_assert!(false, "engine produced an illegal system event: {v}");
        }
        self.record(event.clone());
        event
    }

    fn notice(&mut self, code: &str, detail: String) {
        self.commit_system(EventKind::Notice {
            code: code.to_owned(),
            detail,
        });
    }

    /// Runs the agent on a committed event and commits its reply batch.
    fn feed_agent(&mut self, event: &Event) {
        let Some(view) = self.scenario().map(|s| s.view_for(Side::Agent)) else {
            return;
        };
        let reply = match self.agent.on_event(event, event.ts_ms, &view, &self.policy) {
            Ok(reply) => reply,
            Err(e) => {
                debug_assert!(false, "agent refused a legal event: {e}");
                self.notice("AGENT_ERROR", e.to_string());
                return;
            }
        };
        self.commit_agent_batch(reply, &view);
    }

    fn commit_agent_batch(&mut self, batch: Vec<EventKind>, view: &ScenarioView) {
        for kind in batch {
            let ts = self.clock.stamp(&kind).max(self.last_ts);
            if ts > self.deadline_ms() {
                self.expire();
                return;
            }
            let event = self.event(Actor::Agent, ts, kind);
            if let Err(v) = self.legality.check(&event) {
                debug_assert!(false, "agent produced an illegal event: {v}");
                self.notice("AGENT_ILLEGAL", v.to_string());
                continue;
            }
            self.record(event.clone());
            // own events only update bookkeeping and never produce replies
            let _ = self.agent.on_event(&event, ts, view, &self.policy);
        }
    }

    /// Closes the negotiation once an agreement has been committed.
    fn settle(&mut self) {
        if self.legality.in_negotiation() && self.legality.agreement().is_some() {
            self.end(EndReason::Agreement);
        }
    }

    fn expire_if_due(&mut self) -> bool {
        if self.legality.in_negotiation() && self.clock.now_ms() >= self.deadline_ms() {
            self.expire();
            true
        } else {
            false
        }
    }

    fn expire(&mut self) {
        let deadline = self.deadline_ms();
        self.clock.jump_to(deadline);
        self.last_ts = self.last_ts.max(deadline);
        self.end(EndReason::Deadline);
    }

    fn end(&mut self, reason: EndReason) {
        let Some((expected, agent_points, partner_points)) = self.legality.expected_end() else {
            return;
        };
        debug_assert!(reason == expected || reason == EndReason::Deadline);
        // a late wake-up still ends the negotiation on its deadline
        let ts = match expected {
            EndReason::Deadline => self.deadline_ms().max(self.last_ts),
            EndReason::Agreement => self.clock.now_ms().max(self.last_ts),
        };
        self.commit_system_at(
            EventKind::NegotiationEnd {
                reason: expected,
                agent_points,
                partner_points,
            },
            ts,
        );
        self.open_next();
    }

    fn open_next(&mut self) {
        match self.plan.pop_front() {
            Some(k) => {
                self.clock.restart();
                self.last_ts = 0;
                self.commit_system(EventKind::NegotiationStart { k });
                let opening = self.agent.start_negotiation(k);
                let view = self
                    .scenario()
                    .map(|s| s.view_for(Side::Agent))
                    .expect("negotiation just opened");
                if self.deadline_ms() == 0 {
                    self.expire();
                } else {
                    self.commit_agent_batch(opening, &view);
                }
            }
            None => {
                if self.session_events {
                    let (a, p) = self
                        .legality
                        .outcomes()
                        .iter()
                        .fold((0, 0), |acc, o| (acc.0 + o.agent_points, acc.1 + o.partner_points));
                    self.commit_system(EventKind::SessionEnd {
                        agent_points: a,
                        partner_points: p,
                        favors_owed: self.agent.ledger.owed_to_partner,
                    });
                }
                self.finished = true;
            }
        }
    }
}

/// A counterpart that reacts to committed events.
pub trait Partner {
    fn name(&self) -> &str;
    /// Reaction to one committed event, as partner event bodies.
    fn react(&mut self, view: &ScenarioView, event: &Event) -> Vec<EventKind>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PersonaKind {
    Prosocial,
    Selfish,
    Neutral,
}

impl PersonaKind {
    pub const ALL: [PersonaKind; 3] = [PersonaKind::Prosocial, PersonaKind::Selfish, PersonaKind::Neutral];

    pub fn name(self) -> &'static str {
        match self {
            PersonaKind::Prosocial => "prosocial",
            PersonaKind::Selfish => "selfish",
            PersonaKind::Neutral => "neutral",
        }
    }

    pub fn parse(name: &str) -> Option<PersonaKind> {
        PersonaKind::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaParams {
    pub favor_accept: f64,
    /// Inclusive range of preference statements shared per negotiation.
    pub statement_share: (u32, u32),
    /// Drop in demanded share of the maximum per counter-offer.
    pub concession_rate: f64,
    /// Share of the maximum that makes an offer acceptable.
    pub accept_fraction: f64,
    pub counter_probability: f64,
    pub batna_query_probability: f64,
}

impl PersonaParams {
    pub fn for_kind(kind: PersonaKind) -> Self {
        let (favor_accept, statement_share, concession_rate, accept_fraction) = match kind {
            PersonaKind::Prosocial => (0.9, (2, 2), 0.10, 0.40),
            PersonaKind::Selfish => (0.0, (0, 1), 0.02, 0.80),
            PersonaKind::Neutral => (0.45, (1, 1), 0.06, 0.60),
        };
        PersonaParams {
            favor_accept,
            statement_share,
            concession_rate,
            accept_fraction,
            counter_probability: 0.3,
            batna_query_probability: 0.2,
        }
    }
}

/// One seeded random draw, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub seq: u64,
    pub purpose: String,
    pub value: f64,
}

/// A scripted partner. All randomness comes from one seeded stream, so a
/// kind and seed fix its behaviour completely.
#[derive(Debug, Clone)]
pub struct Persona {
    kind: PersonaKind,
    params: PersonaParams,
    rng: ChaCha8Rng,
    draws: Vec<Draw>,
    budget: u32,
    counters: u32,
    honoring: bool,
    granted: bool,
}

impl Persona {
    pub fn new(kind: PersonaKind, seed: u64) -> Self {
        Self::with_params(kind, PersonaParams::for_kind(kind), seed)
    }

    pub fn with_params(kind: PersonaKind, params: PersonaParams, seed: u64) -> Self {
        Persona {
            kind,
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: Vec::new(),
            budget: 0,
            counters: 0,
            honoring: false,
            granted: false,
        }
    }

    pub fn kind(&self) -> PersonaKind {
        self.kind
    }

    pub fn params(&self) -> &PersonaParams {
        &self.params
    }

    pub fn draws(&self) -> &[Draw] {
        &self.draws
    }

    fn draw(&mut self, seq: u64, purpose: &str) -> f64 {
        let value: f64 = self.rng.random();
        self.draws.push(Draw {
            seq,
            purpose: purpose.to_owned(),
            value,
        });
        value
    }

    fn accepts(&self, offer: &Offer, view: &ScenarioView) -> bool {
        let Ok(points) = view.own_utility(offer) else {
            return false;
        };
        let max = view.own.max_points(&view.categories) as f64;
        points >= view.own.batna && points as f64 >= self.params.accept_fraction * max
    }

    /// A full offer giving this persona its current demand, most valued units first.
    fn counter_offer(&self, view: &ScenarioView) -> Offer {
        let max = view.own.max_points(&view.categories);
        let share = (1.0 - self.params.concession_rate * self.counters as f64).max(self.params.accept_fraction);
        let target = ((share * max as f64).ceil() as Points).max(view.own.batna).min(max);
        let mut order: Vec<CategoryId> = view.categories.iter().map(|c| c.id).collect();
        order.sort_by(|a, b| view.own.value(*b).cmp(&view.own.value(*a)).then(a.cmp(b)));
        let mut offer = Offer::all_to(Side::Agent, &view.categories);
        let mut points = 0;
        for c in order {
            while points < target && offer.units(Side::Agent, c) > 0 {
                offer.set(Side::Agent, c, offer.units(Side::Agent, c) - 1);
                offer.set(Side::Partner, c, offer.units(Side::Partner, c) + 1);
                points += view.own.value(c);
            }
        }
        offer
    }
}

impl Partner for Persona {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn react(&mut self, view: &ScenarioView, event: &Event) -> Vec<EventKind> {
        if event.actor == Actor::Partner {
            return Vec::new();
        }
        let mut out = Vec::new();
        match &event.kind {
            EventKind::NegotiationStart { .. } => {
                let (lo, hi) = self.params.statement_share;
                self.budget = if lo == hi {
                    lo
                } else {
                    lo + (self.draw(event.seq, "statement_share") * (hi - lo + 1) as f64) as u32
                };
                self.counters = 0;
                self.honoring = false;
                self.granted = false;
                if self.draw(event.seq, "batna_query") < self.params.batna_query_probability {
                    out.push(EventKind::BatnaQuery {});
                }
            }
            EventKind::PrefQuery(query) => {
                if self.budget > 0 {
                    if let Some(stmt) = truthful_answer(query, view) {
                        self.budget -= 1;
                        out.push(EventKind::PrefStatement(stmt));
                    }
                }
                let said: Vec<PrefStatement> = out
                    .iter()
                    .filter_map(|k| match k {
                        EventKind::PrefStatement(s) => Some(*s),
                        _ => None,
                    })
                    .collect();
                for stmt in truthful_statements(view) {
                    if self.budget == 0 {
                        break;
                    }
                    if !said.contains(&stmt) {
                        self.budget -= 1;
                        out.push(EventKind::PrefStatement(stmt));
                    }
                }
            }
            EventKind::FavorRequest {} => {
                let accept = self.params.favor_accept > 0.0
                    && self.draw(event.seq, "favor_accept") < self.params.favor_accept;
                if accept {
                    self.honoring = true;
                    self.granted = true;
                    out.push(EventKind::FavorAccept {});
                } else {
                    out.push(EventKind::FavorReject {});
                }
            }
            EventKind::OfferProposed { offer } if event.actor == Actor::Agent => {
                if self.honoring || self.accepts(offer, view) {
                    self.honoring = false;
                    out.push(EventKind::OfferAccepted { offer_seq: event.seq });
                } else {
                    out.push(EventKind::OfferRejected { offer_seq: event.seq });
                    if self.draw(event.seq, "counter") < self.params.counter_probability {
                        out.push(EventKind::OfferProposed {
                            offer: self.counter_offer(view),
                        });
                        self.counters += 1;
                    }
                }
            }
            _ => {}
        }
        out
    }
}

/// The partner's true answer to a query, if a strict one exists.
fn truthful_answer(query: &PrefQuery, view: &ScenarioView) -> Option<PrefStatement> {
    let value = |c: CategoryId| view.own.value(c);
    let ids: Vec<CategoryId> = view.categories.iter().map(|c| c.id).collect();
    let unique = |target: Points| ids.iter().filter(|c| value(**c) == target).count() == 1;
    match *query {
        PrefQuery::AskBest => {
            let top = ids.iter().map(|c| value(*c)).max()?;
            let c = *ids.iter().find(|c| value(**c) == top)?;
            unique(top).then_some(PrefStatement::Best { category: c })
        }
        PrefQuery::AskWorst => {
            let bottom = ids.iter().map(|c| value(*c)).min()?;
            let c = *ids.iter().find(|c| value(**c) == bottom)?;
            unique(bottom).then_some(PrefStatement::Worst { category: c })
        }
        PrefQuery::AskPrefer { first, second } => match value(first).cmp(&value(second)) {
            std::cmp::Ordering::Greater => Some(PrefStatement::Prefer { better: first, worse: second }),
            std::cmp::Ordering::Less => Some(PrefStatement::Prefer { better: second, worse: first }),
            std::cmp::Ordering::Equal => None,
        },
    }
}

/// True statements in the order a persona volunteers them: best, worst,
/// then adjacent strict preferences from the top down.
fn truthful_statements(view: &ScenarioView) -> Vec<PrefStatement> {
    let mut out: Vec<PrefStatement> = [PrefQuery::AskBest, PrefQuery::AskWorst]
        .iter()
        .filter_map(|q| truthful_answer(q, view))
        .collect();
    let mut ids: Vec<CategoryId> = view.categories.iter().map(|c| c.id).collect();
    ids.sort_by(|a, b| view.own.value(*b).cmp(&view.own.value(*a)).then(a.cmp(b)));
    for pair in ids.windows(2) {
        if view.own.value(pair[0]) > view.own.value(pair[1]) {
            out.push(PrefStatement::Prefer {
                better: pair[0],
                worse: pair[1],
            });
        }
    }
    out
}

/// Rejects every offer and never says anything.
#[derive(Debug, Clone, Default)]
pub struct Stonewall;

impl Partner for Stonewall {
    fn name(&self) -> &str {
        "stonewall"
    }

    fn react(&mut self, _view: &ScenarioView, event: &Event) -> Vec<EventKind> {
        match event.kind {
            EventKind::OfferProposed { .. } if event.actor == Actor::Agent => {
                vec![EventKind::OfferRejected { offer_seq: event.seq }]
            }
            _ => Vec::new(),
        }
    }
}

/// Drives a simulated session to completion against `partner`.
///
/// Each partner reaction is submitted in order; a reaction still queued when
/// its negotiation ends is dropped.
pub fn drive<C: Clock>(session: &mut Session<C>, partner: &mut dyn Partner) {
    let mut queue: VecDeque<EventKind> = VecDeque::new();
    let mut fresh = session.start();
    loop {
        for event in &fresh {
            if matches!(event.kind, EventKind::NegotiationEnd { .. }) {
                queue.clear();
                continue;
            }
            if let Some(view) = session.partner_view() {
                queue.extend(partner.react(&view, event));
            }
        }
        if session.finished() {
            return;
        }
        fresh = match queue.pop_front() {
            Some(kind) => session.submit(kind).events,
            None => session.advance(),
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationOutcome {
    pub k: u8,
    pub agreement: Option<Offer>,
    pub agent_points: Points,
    pub partner_points: Points,
    /// Negotiation clock at the END event.
    pub wall_time_ms: u64,
    pub favor_requested: bool,
    pub favor_granted: bool,
    pub transcript: Vec<Event>,
}

impl NegotiationOutcome {
    fn from_events(events: &[Event]) -> Option<NegotiationOutcome> {
        let k = events.iter().find_map(|e| match e.kind {
            EventKind::NegotiationStart { k } => Some(k),
            _ => None,
        })?;
        let end = events.iter().rev().find(|e| matches!(e.kind, EventKind::NegotiationEnd { .. }))?;
        let EventKind::NegotiationEnd {
            reason,
            agent_points,
            partner_points,
        } = end.kind
        else {
            return None;
        };
        let agreement = (reason == EndReason::Agreement)
            .then(|| {
                let accepted = events.iter().rev().find_map(|e| match e.kind {
                    EventKind::OfferAccepted { offer_seq } => Some(offer_seq),
                    _ => None,
                })?;
                events.iter().find_map(|e| match &e.kind {
                    EventKind::OfferProposed { offer } if e.seq == accepted => Some(offer.clone()),
                    _ => None,
                })
            })
            .flatten();
        Some(NegotiationOutcome {
            k,
            agreement,
            agent_points,
            partner_points,
            wall_time_ms: end.ts_ms,
            favor_requested: events.iter().any(|e| matches!(e.kind, EventKind::FavorRequest {}) && e.actor == Actor::Agent),
            favor_granted: events.iter().any(|e| matches!(e.kind, EventKind::FavorAccept {}) && e.actor == Actor::Partner),
            transcript: events.to_vec(),
        })
    }
}

/// Splits a transcript at NEGOTIATION_START/END boundaries.
pub fn negotiation_outcomes(events: &[Event]) -> Vec<NegotiationOutcome> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, e) in events.iter().enumerate() {
        match e.kind {
            EventKind::NegotiationStart { .. } => start = Some(i),
            EventKind::NegotiationEnd { .. } => {
                if let Some(s) = start.take() {
                    out.extend(NegotiationOutcome::from_events(&events[s..=i]));
                }
            }
            _ => {}
        }
    }
    out
}

/// Runs one negotiation against `partner` and returns its outcome.
pub fn run_negotiation(
    agent: &mut AgentState,
    partner: &mut dyn Partner,
    scenario: &Scenario,
    k: u8,
    policy: &PolicyConfig,
    costs: CostTable,
    clock_mode: ClockMode,
) -> Result<NegotiationOutcome, EngineError> {
    if !validate_scenario(scenario).is_empty() && scenario.deadline_s != 0 {
        let codes: Vec<String> = validate_scenario(scenario).iter().map(|v| v.to_string()).collect();
        return Err(EngineError::ConfigInvalid(codes.join("; ")));
    }
    if !(1..=3).contains(&k) {
        return Err(EngineError::ConfigInvalid(format!("negotiation index {k} outside 1..=3")));
    }
    policy
        .validate()
        .map_err(|e| EngineError::ConfigInvalid(e.to_string()))?;
    let events = match clock_mode {
        ClockMode::Simulated => {
            let mut session = Session::single(scenario.clone(), k, policy.clone(), SimClock::new(costs), agent.clone());
            drive(&mut session, partner);
            let (events, state) = session.into_parts();
            *agent = state;
            events
        }
        ClockMode::Realtime => {
            let mut session = Session::single(scenario.clone(), k, policy.clone(), WallClock::new(), agent.clone());
            drive_realtime(&mut session, partner);
            let (events, state) = session.into_parts();
            *agent = state;
            events
        }
    };
    Ok(NegotiationOutcome::from_events(&events).expect("a driven negotiation always ends"))
}

fn drive_realtime(session: &mut Session<WallClock>, partner: &mut dyn Partner) {
    let mut queue: VecDeque<EventKind> = VecDeque::new();
    let mut fresh = session.start();
    loop {
        for event in &fresh {
            if matches!(event.kind, EventKind::NegotiationEnd { .. }) {
                queue.clear();
                continue;
            }
            if let Some(view) = session.partner_view() {
                queue.extend(partner.react(&view, event));
            }
        }
        if session.finished() {
            return;
        }
        fresh = match queue.pop_front() {
            Some(kind) => session.submit(kind).events,
            None => {
                if let Some(t) = session.wake_at_ms() {
                    let at = session.clock().instant_at(t);
                    std::thread::sleep(at.saturating_duration_since(Instant::now()));
                }
                session.tick()
            }
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub scenarios: Vec<Scenario>,
    pub seed: u64,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub costs: CostTable,
}

impl SessionConfig {
    pub fn new(scenarios: Vec<Scenario>, seed: u64) -> Self {
        SessionConfig {
            scenarios,
            seed,
            policy: PolicyConfig::default(),
            costs: CostTable::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.scenarios.len() != 3 {
            return Err(EngineError::ConfigInvalid(format!(
                "a session needs exactly 3 scenarios, got {}",
                self.scenarios.len()
            )));
        }
        for s in &self.scenarios {
            let violations: Vec<String> = validate_scenario(s)
                .into_iter()
                .filter(|v| v.code() != "DEADLINE_NONPOSITIVE")
                .map(|v| v.to_string())
                .collect();
            if !violations.is_empty() {
                return Err(EngineError::ConfigInvalid(format!("{}: {}", s.name, violations.join("; "))));
            }
        }
        self.policy
            .validate()
            .map_err(|e| EngineError::ConfigInvalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub persona: String,
    pub seed: u64,
    pub negotiations: Vec<NegotiationOutcome>,
    pub agent_points: Points,
    pub partner_points: Points,
    pub favors_owed: u32,
    pub events: Vec<Event>,
    pub draws: Vec<Draw>,
}

impl SessionReport {
    pub fn transcript_jsonl(&self) -> String {
        crate::protocol::events_to_jsonl(&self.events)
    }
}

/// Runs a full three-negotiation session against `partner` on a simulated clock.
pub fn run_session(config: &SessionConfig, partner: &mut dyn Partner) -> Result<SessionReport, EngineError> {
    config.validate()?;
    let session_id = format!("sim-{}-{}", partner.name(), config.seed);
    let mut session = Session::new(
        session_id.clone(),
        config.scenarios.clone(),
        config.policy.clone(),
        SimClock::new(config.costs),
    );
    drive(&mut session, partner);
    let (events, agent) = session.into_parts();
    let negotiations = negotiation_outcomes(&events);
    Ok(SessionReport {
        session_id,
        persona: partner.name().to_owned(),
        seed: config.seed,
        agent_points: negotiations.iter().map(|n| n.agent_points).sum(),
        partner_points: negotiations.iter().map(|n| n.partner_points).sum(),
        favors_owed: agent.ledger.owed_to_partner,
        negotiations,
        events,
        draws: Vec::new(),
    })
}

/// [`run_session`] against a fresh persona seeded with the config seed.
pub fn run_persona_session(config: &SessionConfig, kind: PersonaKind) -> Result<SessionReport, EngineError> {
    let mut persona = Persona::new(kind, config.seed);
    let mut report = run_session(config, &mut persona)?;
    report.draws = persona.draws().to_vec();
    Ok(report)
}

/// Agent and partner utility of `offer` on `scenario`.
pub fn score(offer: &Offer, scenario: &Scenario) -> Option<(Points, Points)> {
    let a = utility(offer, Side::Agent, &scenario.agent, &scenario.categories).ok()?;
    let p = utility(offer, Side::Partner, &scenario.partner, &scenario.categories).ok()?;
    Some((a, p))
}

/// Per-persona aggregate over session reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub persona: String,
    pub sessions: usize,
    pub mean_agent_points: f64,
    pub mean_partner_points: f64,
    pub agreement_rate: f64,
    /// `None` when no favor was ever requested.
    pub favor_accept_rate: Option<f64>,
}

pub fn summarize(reports: &[SessionReport]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<&str, Vec<&SessionReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.persona.as_str()).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(persona, rs)| {
            let n = rs.len() as f64;
            let negotiations: Vec<&NegotiationOutcome> = rs.iter().flat_map(|r| &r.negotiations).collect();
            let agreements = negotiations.iter().filter(|o| o.agreement.is_some()).count();
            let requested = negotiations.iter().filter(|o| o.favor_requested).count();
            let granted = negotiations.iter().filter(|o| o.favor_granted).count();
            SummaryRow {
                persona: persona.to_owned(),
                sessions: rs.len(),
                mean_agent_points: rs.iter().map(|r| r.agent_points as f64).sum::<f64>() / n,
                mean_partner_points: rs.iter().map(|r| r.partner_points as f64).sum::<f64>() / n,
                agreement_rate: if negotiations.is_empty() {
                    0.0
                } else {
                    agreements as f64 / negotiations.len() as f64
                },
                favor_accept_rate: (requested > 0).then(|| granted as f64 / requested as f64),
            }
        })
        .collect()
}

pub fn summary_text(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:>8} {:>10} {:>12} {:>10} {:>12}\n",
        "persona", "sessions", "agent_avg", "partner_avg", "agreement", "favor_accept"
    );
    for r in rows {
        let favor = r
            .favor_accept_rate
            .map(|f| format!("{f:.3}"))
            .unwrap_or_else(|| "-".to_owned());
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>10.2} {:>12.2} {:>10.3} {:>12}",
            r.persona, r.sessions, r.mean_agent_points, r.mean_partner_points, r.agreement_rate, favor
        );
    }
    out
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("persona,sessions,mean_agent_points,mean_partner_points,agreement_rate,favor_accept_rate\n");
    for r in rows {
        let favor = r.favor_accept_rate.map(|f| format!("{f:.4}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{}",
            r.persona, r.sessions, r.mean_agent_points, r.mean_partner_points, r.agreement_rate, favor
        );
    }
    out
}

/// One row per negotiation.
pub fn results_csv(reports: &[SessionReport]) -> String {
    let mut out = String::from("persona,seed,k,agent_points,partner_points,agreement,favor_granted\n");
    for r in reports {
        for n in &r.negotiations {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.persona,
                r.seed,
                n.k,
                n.agent_points,
                n.partner_points,
                n.agreement.is_some(),
                n.favor_granted
            );
        }
    }
    out
}
