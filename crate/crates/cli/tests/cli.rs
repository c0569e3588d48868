use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use pilot_core::catalog;
use pilot_core::protocol::{events_to_jsonl, EventKind, Transcript};

fn pilot() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pilot"));
    cmd.env_remove(catalog::SCENARIO_DIR_ENV);
    cmd
}

fn run(cmd: &mut Command) -> (i32, String, String) {
    let Output { status, stdout, stderr } = cmd.output().unwrap();
    (
        status.code().unwrap_or(-1),
        String::from_utf8(stdout).unwrap(),
        String::from_utf8(stderr).unwrap(),
    )
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/prosocial-42.jsonl")
}

fn write_scenario(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut json = serde_json::to_value(catalog::bundled_named("desk-1").unwrap()).unwrap();
    json["name"] = name.into();
    edit(&mut json);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap()).unwrap();
    path
}

/// Sums agent and partner points over the results.csv rows.
fn csv_totals(csv: &str) -> (u32, u32) {
    csv.lines().skip(1).fold((0, 0), |(a, p), line| {
        let cols: Vec<&str> = line.split(',').collect();
        (a + cols[3].parse::<u32>().unwrap(), p + cols[4].parse::<u32>().unwrap())
    })
}

#[test]
fn sim_smoke_run_reproduces_the_golden_transcript() {
    let out = tempfile::tempdir().unwrap();
    let (code, stdout, stderr) = run(pilot().args(["sim", "--persona", "prosocial", "--seed", "42"]).args([
        "--scenarios",
        "desk-1.json",
        "--repeat",
        "1",
        "--out",
    ]).arg(out.path()));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains("prosocial"));

    let transcript = std::fs::read_to_string(out.path().join("sim-prosocial-42.jsonl")).unwrap();
    assert_eq!(transcript, std::fs::read_to_string(golden()).unwrap());
    let jsonl: Vec<_> = std::fs::read_dir(out.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "jsonl"))
        .collect();
    assert_eq!(jsonl.len(), 1);

    let summary = std::fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 2);
    let results = std::fs::read_to_string(out.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().next().unwrap(), "persona,seed,k,agent_points,partner_points,agreement,favor_granted");
    assert_eq!(results.lines().count(), 4);
}

#[test]
fn sim_repeat_uses_consecutive_seeds() {
    let out = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run(pilot()
        .args(["sim", "--persona", "neutral", "--seed", "7", "--repeat", "3", "--out"])
        .arg(out.path()));
    assert_eq!(code, 0, "{stderr}");
    for seed in 7..10 {
        assert!(out.path().join(format!("sim-neutral-{seed}.jsonl")).is_file());
        assert!(out.path().join(format!("sim-neutral-{seed}.draws.json")).is_file());
    }
    let results = std::fs::read_to_string(out.path().join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 9);
}

#[test]
fn unknown_persona_is_a_usage_error() {
    let (code, _, stderr) = run(pilot().args(["sim", "--persona", "grumpy", "--seed", "1"]));
    assert_eq!(code, 2);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert!(stderr.contains("prosocial"), "{stderr}");
}

#[test]
fn missing_seed_and_zero_repeat_are_usage_errors() {
    assert_eq!(run(pilot().args(["sim", "--persona", "selfish"])).0, 2);
    assert_eq!(run(pilot().args(["sim", "--persona", "selfish", "--seed", "1", "--repeat", "0"])).0, 2);
    assert_eq!(run(pilot().args(["sim", "--persona", "selfish", "--seed", "1", "--scenarios", "desk-1,desk-2"])).0, 2);
}

#[test]
fn invalid_scenario_exits_3_naming_the_violation() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_scenario(dir.path(), "greedy", |j| j["agent"]["batna"] = 1000.into());
    let (code, _, stderr) = run(pilot().args(["sim", "--persona", "prosocial", "--seed", "1", "--scenarios"]).arg(&bad));
    assert_eq!(code, 3);
    assert!(stderr.contains("BATNA_UNREACHABLE"), "{stderr}");

    let (code, stdout, _) = run(pilot().arg("validate").arg(&bad).arg("desk-2"));
    assert_eq!(code, 3);
    assert!(stdout.contains("BATNA_UNREACHABLE"));
    assert!(stdout.contains("desk-2: ok"));

    let (code, _, stderr) = run(pilot().args(["sim", "--persona", "prosocial", "--seed", "1", "--scenarios", "no-such-desk"]));
    assert_eq!(code, 3);
    assert!(stderr.contains("not found"), "{stderr}");
}

#[test]
fn scenario_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    write_scenario(dir.path(), "quick", |j| j["deadline_s"] = 60.into());
    let out = tempfile::tempdir().unwrap();
    let (code, _, stderr) = run(pilot()
        .env(catalog::SCENARIO_DIR_ENV, dir.path())
        .args(["sim", "--persona", "selfish", "--seed", "3", "--scenarios", "quick", "--out"])
        .arg(out.path()));
    assert_eq!(code, 0, "{stderr}");
    let text = std::fs::read_to_string(out.path().join("sim-selfish-3.jsonl")).unwrap();
    let start = &Transcript::parse_jsonl(&text).unwrap().events[0];
    assert!(matches!(&start.kind, EventKind::SessionStart { scenarios, .. } if scenarios == &["quick", "quick", "quick"]));

    let (code, _, _) = run(pilot().env(catalog::SCENARIO_DIR_ENV, dir.path()).args(["validate", "quick"]));
    assert_eq!(code, 0);
}

#[test]
fn replay_of_the_golden_transcript_matches_its_results() {
    let out = tempfile::tempdir().unwrap();
    run(pilot()
        .args(["sim", "--persona", "prosocial", "--seed", "42", "--scenarios", "desk-1", "--out"])
        .arg(out.path()));
    let (a, p) = csv_totals(&std::fs::read_to_string(out.path().join("results.csv")).unwrap());

    let (code, stdout, stderr) = run(pilot().arg("replay").arg("--transcript").arg(golden()).args(["--scenario", "desk-1"]));
    assert_eq!(code, 0, "{stderr}");
    assert!(stdout.contains(&format!("total agent={a} partner={p}")), "{stdout}");
    assert_eq!(stdout.lines().filter(|l| l.starts_with("negotiation ")).count(), 3);

    let (code, stdout2, _) = run(pilot().arg("replay").arg("--transcript").arg(golden()));
    assert_eq!(code, 0);
    assert_eq!(stdout, stdout2);
}

#[test]
fn dangling_accept_exits_4_with_its_seq() {
    let text = std::fs::read_to_string(golden()).unwrap();
    let mut events = Transcript::parse_jsonl(&text).unwrap().events;
    let victim = events
        .iter()
        .position(|e| matches!(e.kind, EventKind::OfferAccepted { .. }))
        .unwrap();
    let seq = events[victim].seq;
    events[victim].kind = EventKind::OfferAccepted { offer_seq: 9_999 };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corrupt.jsonl");
    std::fs::write(&path, events_to_jsonl(&events)).unwrap();

    let (code, _, stderr) = run(pilot().arg("replay").arg("--transcript").arg(&path));
    assert_eq!(code, 4);
    assert!(stderr.contains("ILLEGAL_TRANSCRIPT"), "{stderr}");
    assert!(stderr.contains(&format!("seq {seq}")), "{stderr}");
}

#[test]
fn empty_and_garbled_transcripts_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let (code, _, stderr) = run(pilot().arg("replay").arg("--transcript").arg(&empty).args(["--scenario", "desk-1"]));
    assert_eq!(code, 4);
    assert!(stderr.contains("empty transcript"), "{stderr}");

    let garbled = dir.path().join("garbled.jsonl");
    std::fs::write(&garbled, "{\"seq\":1,").unwrap();
    let (code, _, stderr) = run(pilot().arg("replay").arg("--transcript").arg(&garbled));
    assert_eq!(code, 4);
    assert!(stderr.contains("line 1"), "{stderr}");
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server() -> Server {
    let mut child = pilot()
        .args(["serve", "--port", "0"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let url = loop {
        let line = lines.next().expect("server announces its address").unwrap();
        if let Some(url) = line.strip_prefix("listening on ") {
            break url.to_owned();
        }
    };
    std::thread::spawn(move || lines.for_each(drop));
    Server(child, url)
}

#[test]
fn sim_and_replay_through_the_service_match_local_runs() {
    let server = spawn_server();
    let local = tempfile::tempdir().unwrap();
    let remote = tempfile::tempdir().unwrap();
    for (dir, via) in [(&local, None), (&remote, Some(server.1.as_str()))] {
        let mut cmd = pilot();
        cmd.args(["sim", "--persona", "selfish", "--seed", "5", "--repeat", "2", "--out"]).arg(dir.path());
        if let Some(url) = via {
            cmd.args(["--server", url]);
        }
        let (code, _, stderr) = run(&mut cmd);
        assert_eq!(code, 0, "{stderr}");
    }
    for file in ["sim-selfish-5.jsonl", "sim-selfish-6.jsonl", "results.csv", "summary.csv"] {
        assert_eq!(
            std::fs::read_to_string(local.path().join(file)).unwrap(),
            std::fs::read_to_string(remote.path().join(file)).unwrap(),
            "{file}"
        );
    }

    let (code, local_out, _) = run(pilot().arg("replay").arg("--transcript").arg(local.path().join("sim-selfish-5.jsonl")));
    assert_eq!(code, 0);
    let (code, remote_out, stderr) = run(pilot()
        .arg("replay")
        .arg("--transcript")
        .arg(local.path().join("sim-selfish-5.jsonl"))
        .args(["--server", &server.1]));
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(local_out, remote_out);

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let (code, _, stderr) = run(pilot().arg("replay").arg("--transcript").arg(&empty).args(["--server", &server.1]));
    assert_eq!(code, 4);
    assert!(stderr.contains("empty transcript"), "{stderr}");
}
