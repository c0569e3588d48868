#![allow(dead_code)]

use std::path::PathBuf;

use pilot_core::model::{CategoryId, ItemCategory, Offer, PreferenceProfile, Scenario, Side};
use pilot_core::protocol::{
    Actor, Emotion, EndReason, Event, EventKind, PrefQuery, PrefStatement, Template, TimerKind,
};
use proptest::prelude::*;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"))
}

pub fn load(name: &str) -> Scenario {
    Scenario::from_json(&std::fs::read_to_string(scenario_path(name)).unwrap()).unwrap()
}

pub fn desk1() -> Scenario {
    load("desk-1")
}

pub fn bundled() -> Vec<Scenario> {
    ["desk-1", "desk-2", "desk-3"].into_iter().map(load).collect()
}

pub fn c(i: usize) -> CategoryId {
    CategoryId(i)
}

/// Valid scenarios with up to five categories and positive values.
pub fn scenario() -> impl Strategy<Value = Scenario> {
    (1usize..=5)
        .prop_flat_map(|m| {
            (
                prop::collection::vec(1u32..=4, m),
                prop::collection::vec(1u32..=10, m),
                prop::collection::vec(1u32..=10, m),
                0u32..=100,
                0u32..=100,
            )
        })
        .prop_map(|(qty, av, pv, ab, pb)| {
            let categories: Vec<ItemCategory> = qty
                .iter()
                .enumerate()
                .map(|(i, q)| ItemCategory { id: c(i), name: format!("C{}", i + 1), quantity: *q })
                .collect();
            let profile = |vals: &[u32], b: u32| {
                let values = vals.iter().enumerate().map(|(i, v)| (c(i), *v)).collect();
                let max: u32 = vals.iter().zip(&qty).map(|(v, q)| v * q).sum();
                // BATNA strictly below the best achievable score
                PreferenceProfile { values, batna: b % max }
            };
            Scenario {
                name: "gen".into(),
                deadline_s: 300,
                agent: profile(&av, ab),
                partner: profile(&pv, pb),
                categories,
            }
        })
}

/// Any offer within the pool, possibly leaving units undecided.
pub fn offer_in(categories: &[ItemCategory]) -> impl Strategy<Value = Offer> {
    let parts: Vec<_> = categories
        .iter()
        .map(|cat| {
            let (id, q) = (cat.id, cat.quantity);
            (0..=q).prop_flat_map(move |a| (Just(id), Just(a), 0..=q - a))
        })
        .collect();
    parts.prop_map(|v| {
        let mut o = Offer::default();
        for (id, a, p) in v {
            o.set(Side::Agent, id, a);
            o.set(Side::Partner, id, p);
        }
        o
    })
}

/// Any full offer within the pool.
pub fn full_offer_in(categories: &[ItemCategory]) -> impl Strategy<Value = Offer> {
    let parts: Vec<_> = categories.iter().map(|cat| (Just(cat.id), 0..=cat.quantity, Just(cat.quantity))).collect();
    parts.prop_map(|v| {
        let mut o = Offer::default();
        for (id, a, q) in v {
            o.set(Side::Agent, id, a);
            o.set(Side::Partner, id, q - a);
        }
        o
    })
}

fn cat_id() -> impl Strategy<Value = CategoryId> {
    (0usize..6).prop_map(CategoryId)
}

fn raw_offer() -> impl Strategy<Value = Offer> {
    (prop::collection::btree_map(cat_id(), 0u32..5, 0..4), prop::collection::btree_map(cat_id(), 0u32..5, 0..4))
        .prop_map(|(a, p)| Offer::new(a, p))
}

fn statement() -> impl Strategy<Value = PrefStatement> {
    prop_oneof![
        cat_id().prop_map(|category| PrefStatement::Best { category }),
        cat_id().prop_map(|category| PrefStatement::Worst { category }),
        (cat_id(), cat_id()).prop_map(|(better, worse)| PrefStatement::Prefer { better, worse }),
    ]
}

fn query() -> impl Strategy<Value = PrefQuery> {
    prop_oneof![
        Just(PrefQuery::AskBest),
        Just(PrefQuery::AskWorst),
        (cat_id(), cat_id()).prop_map(|(first, second)| PrefQuery::AskPrefer { first, second }),
    ]
}

fn emotion() -> impl Strategy<Value = Emotion> {
    prop_oneof![
        Just(Emotion::Neutral),
        Just(Emotion::Happy),
        Just(Emotion::Sad),
        Just(Emotion::Surprised),
        Just(Emotion::Angry),
    ]
}

fn text() -> impl Strategy<Value = String> {
    "[ -~\u{e9}\u{4e2d}\"\\\\]{0,12}"
}

/// Every event body the protocol knows.
pub fn event_kind() -> impl Strategy<Value = EventKind> {
    prop_oneof![
        raw_offer().prop_map(|offer| EventKind::OfferProposed { offer }),
        any::<u64>().prop_map(|offer_seq| EventKind::OfferAccepted { offer_seq }),
        any::<u64>().prop_map(|offer_seq| EventKind::OfferRejected { offer_seq }),
        statement().prop_map(EventKind::PrefStatement),
        query().prop_map(EventKind::PrefQuery),
        Just(EventKind::BatnaQuery {}),
        any::<u32>().prop_map(|points| EventKind::BatnaStatement { points }),
        Just(EventKind::FavorRequest {}),
        Just(EventKind::FavorAccept {}),
        Just(EventKind::FavorReject {}),
        prop::sample::select(Template::ALL.to_vec()).prop_map(|template| EventKind::TextMessage { template }),
        emotion().prop_map(|emotion| EventKind::Expression { emotion }),
        any::<u8>().prop_map(|k| EventKind::NegotiationStart { k }),
        (prop_oneof![Just(EndReason::Agreement), Just(EndReason::Deadline)], any::<u32>(), any::<u32>())
            .prop_map(|(reason, agent_points, partner_points)| EventKind::NegotiationEnd {
                reason,
                agent_points,
                partner_points
            }),
        (text(), prop::collection::vec(text(), 0..4))
            .prop_map(|(session_id, scenarios)| EventKind::SessionStart { session_id, scenarios }),
        (any::<u32>(), any::<u32>(), any::<u32>()).prop_map(|(agent_points, partner_points, favors_owed)| {
            EventKind::SessionEnd { agent_points, partner_points, favors_owed }
        }),
        (text(), text()).prop_map(|(code, detail)| EventKind::Notice { code, detail }),
        Just(EventKind::Timer { timer: TimerKind::IdleNudge }),
    ]
}

pub fn event() -> impl Strategy<Value = Event> {
    (
        any::<u64>(),
        any::<u64>(),
        prop_oneof![Just(Actor::Agent), Just(Actor::Partner), Just(Actor::System)],
        event_kind(),
    )
        .prop_map(|(seq, ts_ms, actor, kind)| Event { seq, ts_ms, actor, kind })
}
