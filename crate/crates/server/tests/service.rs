use std::time::Duration;

use pilot_client::{LiveSession, PilotClient};
use pilot_core::api::{CreateSessionRequest, ReplayRequest, ScenarioRef, SimulateRequest};
use pilot_core::catalog;
use pilot_core::model::{CategoryId, Scenario};
use pilot_core::protocol::{
    replay_session, Actor, EndReason, Event, EventKind, PrefQuery, PrefStatement, Template, Transcript,
};
use pilot_server::{serve, ServerConfig};

async fn start(config: ServerConfig) -> PilotClient {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, config));
    PilotClient::new(format!("http://{addr}"))
}

fn desk1() -> Scenario {
    catalog::bundled_named("desk-1").unwrap()
}

fn quick_desk(deadline_s: u64) -> Scenario {
    let mut s = desk1();
    s.deadline_s = deadline_s;
    s
}

async fn next(live: &mut LiveSession) -> Event {
    tokio::time::timeout(Duration::from_secs(10), live.next_event())
        .await
        .expect("event within 10 s")
        .unwrap()
        .expect("socket open")
}

/// Reads events until one satisfies `pred`, returning everything read.
async fn until(live: &mut LiveSession, pred: impl Fn(&Event) -> bool) -> Vec<Event> {
    let mut seen = Vec::new();
    loop {
        let e = next(live).await;
        let done = pred(&e);
        seen.push(e);
        if done {
            return seen;
        }
    }
}

fn is_query(e: &Event) -> bool {
    matches!(e.kind, EventKind::PrefQuery(PrefQuery::AskBest))
}

async fn open(client: &PilotClient, scenarios: Vec<ScenarioRef>) -> (String, String, LiveSession) {
    let created = client.create_session(&CreateSessionRequest { scenarios }).await.unwrap();
    let live = client.connect(&created.session_id, &created.token, 0).await.unwrap();
    (created.session_id, created.token, live)
}

#[tokio::test]
async fn healthz_answers() {
    let client = start(ServerConfig::default()).await;
    assert_eq!(client.healthz().await.unwrap(), "ok");
}

#[tokio::test]
async fn best_statement_draws_a_favor_request() {
    let client = start(ServerConfig::default()).await;
    let (_, _, mut live) = open(&client, vec![]).await;
    let opening = until(&mut live, is_query).await;
    assert!(matches!(opening[0].kind, EventKind::SessionStart { .. }));
    assert!(opening.iter().any(|e| e.kind == EventKind::TextMessage { template: Template::Prime1 }));

    live.send(&EventKind::PrefStatement(PrefStatement::Best { category: CategoryId(3) }))
        .await
        .unwrap();
    let reply = until(&mut live, |e| e.kind == EventKind::FavorRequest {}).await;
    assert!(matches!(reply[0].kind, EventKind::PrefStatement(_)));
    assert_eq!(reply[0].actor, Actor::Partner);
    assert!(matches!(reply[1].kind, EventKind::Expression { .. }));
    assert_eq!(reply[2].kind, EventKind::TextMessage { template: Template::FavorAsk });
}

#[tokio::test]
async fn stale_accept_is_a_notice_and_the_session_goes_on() {
    let client = start(ServerConfig::default()).await;
    let (id, _, mut live) = open(&client, vec![]).await;
    until(&mut live, is_query).await;

    live.send(&EventKind::PrefStatement(PrefStatement::Best { category: CategoryId(3) }))
        .await
        .unwrap();
    until(&mut live, |e| e.kind == EventKind::FavorRequest {}).await;
    live.send(&EventKind::FavorReject {}).await.unwrap();
    let counter = until(&mut live, |e| {
        e.actor == Actor::Agent && matches!(e.kind, EventKind::OfferProposed { .. })
    })
    .await;
    let stale = counter.last().unwrap().seq;
    live.send(&EventKind::OfferRejected { offer_seq: stale }).await.unwrap();
    live.send(&EventKind::OfferAccepted { offer_seq: stale }).await.unwrap();
    let seen = until(&mut live, |e| matches!(e.kind, EventKind::Notice { .. })).await;
    match &seen.last().unwrap().kind {
        EventKind::Notice { code, .. } => assert_eq!(code, "NO_SUCH_OPEN_OFFER"),
        _ => unreachable!(),
    }
    assert!(!seen.iter().any(|e| matches!(e.kind, EventKind::NegotiationEnd { .. })));

    live.send_raw("{not json").await.unwrap();
    let e = next(&mut live).await;
    assert!(matches!(&e.kind, EventKind::Notice { code, .. } if code == "MALFORMED_JSON"));

    live.send_raw(r#"{"type":"NEGOTIATION_END","payload":{"reason":"deadline","agent_points":0,"partner_points":0}}"#)
        .await
        .unwrap();
    let e = next(&mut live).await;
    assert!(matches!(&e.kind, EventKind::Notice { code, .. } if code == "WRONG_ACTOR"));

    live.send(&EventKind::BatnaQuery {}).await.unwrap();
    until(&mut live, |e| matches!(e.kind, EventKind::BatnaStatement { .. })).await;

    let text = client.transcript(&id).await.unwrap();
    let events = Transcript::parse_jsonl(&text).unwrap().events;
    assert!(events.iter().filter(|e| matches!(e.kind, EventKind::Notice { .. })).count() >= 3);
}

#[tokio::test]
async fn short_deadline_ends_each_negotiation_at_the_batnas() {
    let client = start(ServerConfig::default()).await;
    let scenario = quick_desk(1);
    let (id, _, mut live) = open(&client, vec![ScenarioRef::Inline(Box::new(scenario.clone()))]).await;
    let events = until(&mut live, |e| matches!(e.kind, EventKind::SessionEnd { .. })).await;
    let ends: Vec<_> = events
        .iter()
        .filter_map(|e| match e.kind {
            EventKind::NegotiationEnd { reason, agent_points, partner_points } => {
                Some((reason, agent_points, partner_points, e.ts_ms))
            }
            _ => None,
        })
        .collect();
    assert_eq!(ends.len(), 3);
    for (reason, a, p, ts) in ends {
        assert_eq!((reason, a, p), (EndReason::Deadline, 8, 8));
        assert_eq!(ts, 1000);
    }
    assert!(matches!(events.last().unwrap().kind, EventKind::SessionEnd { agent_points: 24, partner_points: 24, .. }));

    let text = client.transcript(&id).await.unwrap();
    let transcript = Transcript::parse_jsonl(&text).unwrap();
    let scenarios = vec![scenario.clone(), scenario.clone(), scenario];
    let outcomes = replay_session(&transcript.events, &scenarios).unwrap();
    assert_eq!(outcomes.len(), 3);

    let replayed = client
        .replay(&ReplayRequest {
            transcript: text,
            scenarios: scenarios.into_iter().map(|s| ScenarioRef::Inline(Box::new(s))).collect(),
        })
        .await
        .unwrap();
    assert_eq!((replayed.agent_points, replayed.partner_points), (24, 24));
}

#[tokio::test]
async fn finished_transcripts_are_saved() {
    let dir = std::env::temp_dir().join(format!("pilot-transcripts-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let client = start(ServerConfig {
        transcript_dir: Some(dir.clone()),
        ..Default::default()
    })
    .await;
    let (id, _, mut live) = open(&client, vec![ScenarioRef::Inline(Box::new(quick_desk(1)))]).await;
    until(&mut live, |e| matches!(e.kind, EventKind::SessionEnd { .. })).await;
    let path = dir.join(format!("{id}.jsonl"));
    for _ in 0..50 {
        if path.exists() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let saved = std::fs::read_to_string(&path).unwrap();
    assert_eq!(saved, client.transcript(&id).await.unwrap());
    std::fs::remove_dir_all(&dir).unwrap();
}

#[tokio::test]
async fn connection_errors_map_to_status_codes() {
    let client = start(ServerConfig::default()).await;
    let created = client.create_session(&CreateSessionRequest::default()).await.unwrap();

    let err = client.connect("nope", &created.token, 0).await.err().unwrap();
    assert_eq!(err.status(), Some(404));
    let err = client.connect(&created.session_id, "wrong", 0).await.err().unwrap();
    assert_eq!(err.status(), Some(401));

    let live = client.connect(&created.session_id, &created.token, 0).await.unwrap();
    let err = client.connect(&created.session_id, &created.token, 0).await.err().unwrap();
    assert_eq!(err.status(), Some(409));
    live.close().await.unwrap();

    let err = client.transcript("nope").await.err().unwrap();
    assert_eq!(err.status(), Some(404));
    assert_eq!(err.api().unwrap().code, "UNKNOWN_SESSION");
}

#[tokio::test]
async fn reconnect_resumes_after_since() {
    let client = start(ServerConfig::default()).await;
    let (id, token, mut live) = open(&client, vec![]).await;
    let first = until(&mut live, is_query).await;
    let last_seen = first[first.len() - 2].seq;
    live.close().await.unwrap();

    // the slot frees once the server notices the close
    let mut again = None;
    for _ in 0..50 {
        match client.connect(&id, &token, last_seen).await {
            Ok(l) => {
                again = Some(l);
                break;
            }
            Err(e) if e.status() == Some(409) => tokio::time::sleep(Duration::from_millis(20)).await,
            Err(e) => panic!("{e}"),
        }
    }
    let mut live = again.expect("reconnected");
    let e = next(&mut live).await;
    assert_eq!(e.seq, first.last().unwrap().seq);
    assert!(is_query(&e));
}

#[tokio::test]
async fn concurrent_sessions_do_not_interfere() {
    let client = start(ServerConfig::default()).await;
    let (a_id, _, mut a) = open(&client, vec![]).await;
    let (b_id, _, mut b) = open(&client, vec![]).await;
    assert_ne!(a_id, b_id);
    until(&mut a, is_query).await;
    until(&mut b, is_query).await;

    a.send(&EventKind::OfferAccepted { offer_seq: 99 }).await.unwrap();
    next(&mut a).await;
    b.send(&EventKind::PrefStatement(PrefStatement::Best { category: CategoryId(3) }))
        .await
        .unwrap();
    until(&mut b, |e| e.kind == EventKind::FavorRequest {}).await;

    let a_events = Transcript::parse_jsonl(&client.transcript(&a_id).await.unwrap()).unwrap().events;
    let b_events = Transcript::parse_jsonl(&client.transcript(&b_id).await.unwrap()).unwrap().events;
    assert!(a_events.iter().any(|e| matches!(e.kind, EventKind::Notice { .. })));
    assert!(!a_events.iter().any(|e| e.kind == EventKind::FavorRequest {}));
    assert!(!b_events.iter().any(|e| matches!(e.kind, EventKind::Notice { .. })));
    assert!(b_events.iter().any(|e| e.kind == EventKind::FavorRequest {}));
}

#[tokio::test]
async fn bad_session_requests_are_rejected() {
    let client = start(ServerConfig::default()).await;
    let two = vec![ScenarioRef::Name("desk-1".into()), ScenarioRef::Name("desk-2".into())];
    let err = client.create_session(&CreateSessionRequest { scenarios: two }).await.err().unwrap();
    assert_eq!(err.status(), Some(400));
    assert_eq!(err.api().unwrap().code, "CONFIG_INVALID");

    let err = client
        .create_session(&CreateSessionRequest { scenarios: vec![ScenarioRef::Name("no-such-desk".into())] })
        .await
        .err()
        .unwrap();
    assert_eq!(err.api().unwrap().code, "SCENARIO_NOT_FOUND");

    let mut bad = desk1();
    bad.agent.batna = 1000;
    let err = client
        .create_session(&CreateSessionRequest { scenarios: vec![ScenarioRef::Inline(Box::new(bad))] })
        .await
        .err()
        .unwrap();
    assert_eq!(err.api().unwrap().code, "SCENARIO_INVALID");
}

#[tokio::test]
async fn simulate_matches_the_local_engine() {
    let client = start(ServerConfig::default()).await;
    let request = SimulateRequest {
        persona: "prosocial".into(),
        seed: 42,
        repeat: 2,
        scenarios: vec![],
    };
    let remote = client.simulate(&request).await.unwrap();
    assert_eq!(remote.sessions.len(), 2);
    let config = pilot_core::engine::SessionConfig::new(catalog::bundled(), 42);
    let local = pilot_core::engine::run_persona_session(&config, pilot_core::engine::PersonaKind::Prosocial).unwrap();
    assert_eq!(remote.sessions[0].transcript, local.transcript_jsonl());
    assert_eq!(remote.sessions[0].session_id, "sim-prosocial-42");
    assert_eq!(remote.sessions[1].seed, 43);
    assert_eq!(remote.summary.len(), 1);
    assert_eq!(remote.summary[0].sessions, 2);
    assert!(remote.results_csv.starts_with("persona,seed,k,"));

    let replayed = client
        .replay(&ReplayRequest {
            transcript: remote.sessions[0].transcript.clone(),
            scenarios: vec![],
        })
        .await
        .unwrap();
    assert_eq!(replayed.agent_points, remote.sessions[0].agent_points);
    assert_eq!(replayed.partner_points, remote.sessions[0].partner_points);

    let err = client
        .simulate(&SimulateRequest { persona: "grumpy".into(), ..request })
        .await
        .err()
        .unwrap();
    assert_eq!(err.status(), Some(400));
    assert_eq!(err.api().unwrap().code, "UNKNOWN_PERSONA");
}

#[tokio::test]
async fn replay_reports_the_first_illegal_seq() {
    let client = start(ServerConfig::default()).await;
    let sim = client
        .simulate(&SimulateRequest { persona: "neutral".into(), seed: 7, repeat: 1, scenarios: vec![] })
        .await
        .unwrap();
    let mut events = Transcript::parse_jsonl(&sim.sessions[0].transcript).unwrap().events;
    let victim = events
        .iter()
        .position(|e| matches!(e.kind, EventKind::OfferProposed { .. }))
        .unwrap();
    let seq = events[victim].seq;
    events[victim].kind = EventKind::OfferAccepted { offer_seq: 10_000 };
    let text = pilot_core::protocol::events_to_jsonl(&events);

    let err = client
        .replay(&ReplayRequest { transcript: text, scenarios: vec![] })
        .await
        .err()
        .unwrap();
    assert_eq!(err.status(), Some(422));
    assert_eq!(err.api().unwrap().code, "ILLEGAL_TRANSCRIPT");
    assert_eq!(err.api().unwrap().seq, Some(seq));

    let err = client
        .replay(&ReplayRequest { transcript: String::new(), scenarios: vec![] })
        .await
        .err()
        .unwrap();
    assert_eq!(err.api().unwrap().code, "EMPTY_TRANSCRIPT");
    assert!(err.api().unwrap().message.contains("empty transcript"));
}
