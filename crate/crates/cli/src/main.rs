use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use pilot_client::PilotClient;
use pilot_core::api::{ReplayRequest, ScenarioRef, SimulateRequest};
use pilot_core::catalog;
use pilot_core::engine::{
    results_csv, run_persona_session, summarize, summary_csv, summary_text, PersonaKind, SessionConfig,
};
use pilot_core::model::Scenario;
use pilot_core::protocol::{replay_session, EventKind, Outcome, Transcript};
use pilot_server::ServerConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_SCENARIO: u8 = 3;
const EXIT_TRANSCRIPT: u8 = 4;

#[derive(Parser)]
#[command(name = "pilot", version, about = "Simulate, replay and serve Pilot negotiations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scripted-persona sessions against the agent.
    Sim(SimArgs),
    /// Re-check a transcript and print its outcome.
    Replay(ReplayArgs),
    /// Check scenario files.
    Validate {
        #[arg(required = true)]
        scenarios: Vec<String>,
    },
    /// Host live sessions over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Persona {
    Prosocial,
    Selfish,
    Neutral,
}

impl From<Persona> for PersonaKind {
    fn from(p: Persona) -> Self {
        match p {
            Persona::Prosocial => PersonaKind::Prosocial,
            Persona::Selfish => PersonaKind::Selfish,
            Persona::Neutral => PersonaKind::Neutral,
        }
    }
}

#[derive(clap::Args)]
struct SimArgs {
    #[arg(long, value_enum)]
    persona: Persona,
    #[arg(long)]
    seed: u64,
    /// One scenario for all three negotiations, or three. Defaults to the bundled desks.
    #[arg(long, value_delimiter = ',')]
    scenarios: Vec<String>,
    /// Directory for transcripts and CSV files.
    #[arg(long, default_value = "pilot-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=10_000))]
    repeat: u64,
    /// Run on a server at this URL instead of in process.
    #[arg(long)]
    server: Option<String>,
}

#[derive(clap::Args)]
struct ReplayArgs {
    #[arg(long)]
    transcript: PathBuf,
    /// Scenario(s) the transcript was played on. Defaults to the names it records.
    #[arg(long, alias = "scenarios", value_delimiter = ',')]
    scenario: Vec<String>,
    #[arg(long)]
    server: Option<String>,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, value_delimiter = ',')]
    scenarios: Vec<String>,
    /// Browser client assets.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Where finished live transcripts are written.
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

/// An error carrying the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", usage_for(std::env::args().nth(1).as_deref()));
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

/// Usage of the named subcommand, or of the whole tool.
fn usage_for(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match subcommand.and_then(|name| cmd.find_subcommand_mut(name)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Sim(args) => sim(args),
        Command::Replay(args) => replay(args),
        Command::Validate { scenarios } => validate(&scenarios),
        Command::Serve(args) => serve(args),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    Ok(tokio::runtime::Runtime::new().context("cannot start async runtime")?)
}

fn load_scenarios(names: &[String]) -> Result<Vec<Scenario>, Failure> {
    let dir = catalog::env_dir();
    names
        .iter()
        .map(|name| {
            let scenario = catalog::resolve(name, dir.as_deref()).map_err(|e| Failure::new(EXIT_SCENARIO, e))?;
            catalog::check(&scenario).map_err(|e| Failure::new(EXIT_SCENARIO, e))?;
            Ok(scenario)
        })
        .collect()
}

fn session_scenarios(names: &[String]) -> Result<Vec<Scenario>, Failure> {
    let loaded = load_scenarios(names)?;
    catalog::expand(loaded).ok_or_else(|| {
        Failure::new(
            EXIT_USAGE,
            anyhow!("--scenarios takes one scenario or exactly three, got {}", names.len()),
        )
    })
}

struct SimRun {
    session_id: String,
    transcript: String,
    draws: Option<String>,
}

fn sim(args: SimArgs) -> CliResult {
    let scenarios = session_scenarios(&args.scenarios)?;
    let kind = PersonaKind::from(args.persona);
    let seeds = args.seed..args.seed + args.repeat;
    let (runs, summary, results) = match &args.server {
        None => {
            let reports = seeds
                .map(|seed| run_persona_session(&SessionConfig::new(scenarios.clone(), seed), kind))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Failure::new(EXIT_SCENARIO, e))?;
            let runs = reports
                .iter()
                .map(|r| SimRun {
                    session_id: r.session_id.clone(),
                    transcript: r.transcript_jsonl(),
                    draws: Some(serde_json::to_string_pretty(&r.draws).expect("draws serialize")),
                })
                .collect::<Vec<_>>();
            (runs, summarize(&reports), results_csv(&reports))
        }
        Some(url) => {
            let request = SimulateRequest {
                persona: kind.name().to_owned(),
                seed: args.seed,
                repeat: args.repeat,
                scenarios: scenarios.into_iter().map(|s| ScenarioRef::Inline(Box::new(s))).collect(),
            };
            let client = PilotClient::new(url.clone());
            let response = runtime()?
                .block_on(client.simulate(&request))
                .with_context(|| format!("simulation on {url} failed"))?;
            let runs = response
                .sessions
                .into_iter()
                .map(|s| SimRun {
                    session_id: s.session_id,
                    transcript: s.transcript,
                    draws: None,
                })
                .collect();
            (runs, response.summary, response.results_csv)
        }
    };

    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;
    for run in &runs {
        write(&args.out.join(format!("{}.jsonl", run.session_id)), &run.transcript)?;
        if let Some(draws) = &run.draws {
            write(&args.out.join(format!("{}.draws.json", run.session_id)), draws)?;
        }
    }
    write(&args.out.join("results.csv"), &results)?;
    write(&args.out.join("summary.csv"), &summary_csv(&summary))?;
    print!("{}", summary_text(&summary));
    println!("wrote {} transcript(s) to {}", runs.len(), args.out.display());
    Ok(())
}

fn write(path: &Path, contents: &str) -> CliResult {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn replay(args: ReplayArgs) -> CliResult {
    let text = std::fs::read_to_string(&args.transcript)
        .with_context(|| format!("cannot read {}", args.transcript.display()))?;
    let transcript = Transcript::parse_jsonl(&text).map_err(|e| {
        Failure::new(EXIT_TRANSCRIPT, anyhow!("ILLEGAL_TRANSCRIPT: line {}: {}", e.line, e.error))
    })?;
    let names = if args.scenario.is_empty() {
        match transcript.events.first().map(|e| &e.kind) {
            Some(EventKind::SessionStart { scenarios, .. }) => scenarios.clone(),
            _ => Vec::new(),
        }
    } else {
        args.scenario.clone()
    };
    if !transcript.events.is_empty() && names.is_empty() {
        return Err(Failure::new(
            EXIT_USAGE,
            anyhow!("the transcript names no scenarios; pass --scenario"),
        ));
    }
    let mut scenarios = load_scenarios(&names)?;
    let negotiations = transcript
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::NegotiationStart { .. }))
        .count();
    if scenarios.len() == 1 && negotiations > 1 {
        scenarios = vec![scenarios[0].clone(); negotiations];
    }

    let (outcomes, agent_total, partner_total) = match &args.server {
        None => {
            let outcomes = replay_session(&transcript.events, &scenarios).map_err(|e| Failure::new(EXIT_TRANSCRIPT, e))?;
            let a = outcomes.iter().map(|o| o.agent_points).sum();
            let p = outcomes.iter().map(|o| o.partner_points).sum();
            (outcomes, a, p)
        }
        Some(url) => {
            let request = ReplayRequest {
                transcript: text,
                scenarios: scenarios.into_iter().map(|s| ScenarioRef::Inline(Box::new(s))).collect(),
            };
            let client = PilotClient::new(url.clone());
            match runtime()?.block_on(client.replay(&request)) {
                Ok(r) => (r.outcomes, r.agent_points, r.partner_points),
                Err(e) if e.status() == Some(422) => {
                    let message = e.api().map(|a| a.message.clone()).unwrap_or_else(|| e.to_string());
                    return Err(Failure::new(EXIT_TRANSCRIPT, anyhow!(message)));
                }
                Err(e) => return Err(anyhow::Error::new(e).context(format!("replay on {url} failed")).into()),
            }
        }
    };
    for o in &outcomes {
        println!("{}", outcome_line(o));
    }
    println!("total agent={agent_total} partner={partner_total}");
    Ok(())
}

fn outcome_line(o: &Outcome) -> String {
    let result = match &o.agreement {
        Some(offer) => format!("agreement {}", serde_json::to_string(offer).expect("offers serialize")),
        None => "no agreement".to_owned(),
    };
    format!(
        "negotiation {}: agent={} partner={} end_ts_ms={} {result}",
        o.k, o.agent_points, o.partner_points, o.end_ts_ms
    )
}

fn validate(names: &[String]) -> CliResult {
    let dir = catalog::env_dir();
    let mut bad = 0;
    for name in names {
        match catalog::resolve(name, dir.as_deref()).and_then(|s| catalog::check(&s)) {
            Ok(()) => println!("{name}: ok"),
            Err(e) => {
                bad += 1;
                println!("{name}: {e}");
            }
        }
    }
    if bad > 0 {
        return Err(Failure::new(EXIT_SCENARIO, anyhow!("{bad} of {} scenario(s) invalid", names.len())));
    }
    Ok(())
}

fn serve(args: ServeArgs) -> CliResult {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let scenarios = if args.scenarios.is_empty() {
        Vec::new()
    } else {
        session_scenarios(&args.scenarios)?
    };
    if let Some(dir) = &args.transcripts {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let config = ServerConfig {
        scenarios,
        scenario_dir: catalog::env_dir(),
        static_dir: args.static_dir,
        transcript_dir: args.transcripts,
        ..Default::default()
    };
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("cannot bind {}:{}", args.host, args.port))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        pilot_server::serve(listener, config).await.context("server stopped")?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
