use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use bimtwin_core::bim::{BimRepository, ScenarioDocument, ScenarioError};
use bimtwin_core::experiment::{run_experiment, ExperimentConfig, ExperimentError};
use bimtwin_core::par::ExecutionMode;
use bimtwin_core::perception::NoiseModel;
use bimtwin_core::scenarios::{self, BlockOptions};
use bimtwin_core::workflow::{parse_log, replay, AutoRules, Policy, Session, WorkflowError, WorkflowState};

use crate::server::{router, ServeOptions, Service};

#[derive(Debug, Parser)]
#[command(name = "bimtwin", version, about = "BIM-driven digital twin for supervised robotic construction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve an interactive session to supervisor clients.
    Run(RunArgs),
    /// Run a session with the auto-approving supervisor and print the outcome.
    Headless(HeadlessArgs),
    /// Run the block pick-and-place experiment.
    Experiment(ExperimentArgs),
    /// Check a scenario document.
    Validate(ScenarioArgs),
    /// Write the checkpoint of a recorded session log.
    Export(LogArgs),
    /// Re-derive a session from its log and verify it.
    Replay(LogArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Auto,
    Interactive,
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario file, or the name of a bundled scenario (drywall, blocks).
    #[arg(long)]
    pub scenario: String,
    /// Builds the block scenario with this stud gap (m).
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long)]
    pub noise_sigma_t: Option<f64>,
    #[arg(long)]
    pub noise_sigma_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, value_enum, default_value_t = PolicyArg::Interactive)]
    pub policy: PolicyArg,
    /// Pause between execution ticks (ms).
    #[arg(long, default_value_t = 20)]
    pub tick_delay_ms: u64,
    /// Writes the session log here on shutdown.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeadlessArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PolicyArg::Auto)]
    pub policy: PolicyArg,
    /// Writes the session log here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Stud gap (m); repeat for several gaps. Defaults to 10, 5, 3 and 1 mm.
    #[arg(long)]
    pub gap: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub trials: u32,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma_t: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise_sigma_r: f64,
    /// Fraction of trials with the stud intruding into the first slot.
    #[arg(long, default_value_t = 0.5)]
    pub intruding_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub sequential: bool,
    /// Writes the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LogArgs {
    /// Session log (NDJSON).
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("{0}")]
    Usage(String),
    #[error("run did not complete: ended in state {0:?}")]
    Incomplete(WorkflowState),
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

/// Resolves `--scenario` and the optional overrides into a document.
pub fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioDocument, CliError> {
    let path = Path::new(&args.scenario);
    let mut doc = if path.exists() {
        ScenarioDocument::parse(&read(path)?)?
    } else if args.scenario == "blocks" {
        scenarios::blocks(&BlockOptions::new(args.gap.unwrap_or(0.010)))
    } else {
        scenarios::builtin(&args.scenario)
            .ok_or_else(|| CliError::Usage(format!("no scenario file or bundled scenario named '{}'", args.scenario)))?
    };
    if args.gap.is_some() && doc.name != "blocks" {
        return Err(CliError::Usage("--gap applies to the blocks scenario only".into()));
    }
    if let Some(t) = args.noise_sigma_t {
        doc.noise_model.sigma_translation = t;
    }
    if let Some(r) = args.noise_sigma_r {
        doc.noise_model.sigma_rotation = r;
    }
    BimRepository::from_document(&doc)?;
    Ok(doc)
}

fn headless(args: &HeadlessArgs) -> Result<String, CliError> {
    if args.policy != PolicyArg::Auto {
        return Err(CliError::Usage("headless runs need --policy auto".into()));
    }
    let doc = load_scenario(&args.scenario)?;
    let rules = AutoRules::default();
    let mut session = Session::new(doc, args.seed, Policy::AutoApprove(rules.clone()))?;
    session.run_auto(&rules, 1_000_000);
    if let Some(out) = &args.out {
        write(out, &session.log_ndjson())?;
    }
    let mut report = String::new();
    let _ = writeln!(report, "scenario: {}", session.repo().name);
    let _ = writeln!(report, "seed: {}", args.seed);
    let _ = writeln!(report, "final state: {:?}", session.state());
    for o in session.outcomes() {
        let how = match (&o.failure, o.placed, o.manual) {
            (Some(c), _, _) => format!("failed: {}", c.tag()),
            (None, true, true) => "resolved manually".to_string(),
            (None, true, false) => "placed".to_string(),
            (None, false, _) => "not placed".to_string(),
        };
        let _ = writeln!(report, "  {}: {how} (replans: {})", o.target_id, o.replans);
    }
    let _ = writeln!(report, "placed: {}/{}", session.outcomes().iter().filter(|o| o.placed).count(), session.repo().target_count());
    let _ = writeln!(report, "robot time: {:.3} s", session.robot_seconds());
    let _ = writeln!(report, "human decisions: {}", session.human_decisions());
    if session.state() != WorkflowState::TaskComplete {
        print!("{report}");
        return Err(CliError::Incomplete(session.state()));
    }
    Ok(report)
}

fn experiment(args: &ExperimentArgs) -> Result<String, CliError> {
    let noise = NoiseModel { sigma_translation: args.noise_sigma_t, sigma_rotation: args.noise_sigma_r, seed: 0 };
    let mut config = ExperimentConfig::standard(noise, args.seed);
    if !args.gap.is_empty() {
        config.gaps = args.gap.clone();
    }
    config.trials = args.trials;
    config.intruding_fraction = args.intruding_fraction;
    config.mode = if args.sequential { ExecutionMode::Sequential } else { ExecutionMode::Parallel };
    let report = run_experiment(&config)?;
    if let Some(out) = &args.out {
        write(out, &report.to_json())?;
    }
    Ok(report.table())
}

fn replay_log(args: &LogArgs) -> Result<Session, CliError> {
    let records = parse_log(&read(&args.log)?)?;
    Ok(replay(&records, true)?)
}

async fn serve(args: &RunArgs) -> Result<(), CliError> {
    let doc = load_scenario(&args.scenario)?;
    let policy = match args.policy {
        PolicyArg::Interactive => Policy::Interactive,
        PolicyArg::Auto => {
            return Err(CliError::Usage("`run` serves a human supervisor; use `headless` for --policy auto".into()))
        }
    };
    let session = Session::new(doc, args.seed, policy)?;
    let opts = ServeOptions {
        session_id: format!("session-{:016x}", args.seed),
        tick_delay: Duration::from_millis(args.tick_delay_ms),
    };
    let service = Service::spawn(session, opts);
    let addr = format!("0.0.0.0:{}", args.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| CliError::Io { path: addr.clone(), source })?;
    println!("serving session {} on http://{addr}", service.session_id());
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| CliError::Io { path: addr, source })?;
    if let Some(out) = &args.out {
        write(out, &service.log_ndjson().await)?;
    }
    Ok(())
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> ExitCode {
    let result = match &cli.command {
        Command::Run(args) => tokio::runtime::Runtime::new()
            .map_err(|source| CliError::Io { path: "runtime".into(), source })
            .and_then(|rt| rt.block_on(serve(args)))
            .map(|_| String::new()),
        Command::Headless(args) => headless(args),
        Command::Experiment(args) => experiment(args),
        Command::Validate(args) => {
            load_scenario(args).map(|doc| format!("{}: ok ({} objects, {} stacks)\n", doc.name, doc.objects.len(), doc.stacks.len()))
        }
        Command::Export(args) => replay_log(args).and_then(|s| {
            let text = s.repo().export_checkpoint();
            match &args.out {
                Some(out) => write(out, &text).map(|_| String::new()),
                None => Ok(text),
            }
        }),
        Command::Replay(args) => replay_log(args).and_then(|s| {
            if let Some(out) = &args.out {
                write(out, &s.repo().export_checkpoint())?;
            }
            Ok(format!(
                "replayed {} records: final state {:?}, {} as-built records\n",
                s.log().len(),
                s.state(),
                s.repo().as_built_records().len()
            ))
        }),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
