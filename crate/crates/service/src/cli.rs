//! `tim` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use tim_core::analytics::{render_report, REPORTS};
use tim_core::session::{FinishReport, Session, SessionManager};
use tim_core::stream_bus::ReplaySpeed;
use tim_core::task_model::parse_task_definition;

use crate::{EventRequest, DEFAULT_BIN_WIDTH_MS};

#[derive(Debug, Parser)]
#[command(name = "tim", version, about = "Task-guidance session engine")]
pub struct Cli {
    /// Root for tasks/, models/ and sessions/.
    #[arg(long, env = "TIM_DATA_DIR", default_value = "data", global = true)]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Run a live session from an NDJSON event script and persist it.
    Record {
        #[arg(long)]
        task: String,
        /// One `{topic_tag, ts_ns?, payload}` object per line.
        #[arg(long)]
        script: PathBuf,
    },
    /// Replay a recorded session and print its guidance transcript as NDJSON.
    Replay {
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "max")]
        speed: ReplaySpeed,
    },
    /// Render an analytics report for a recorded session.
    Analyze {
        #[arg(long)]
        session: String,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(REPORTS))]
        report: String,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_MS)]
        bin_width_ms: u64,
    },
    /// Check a task definition file.
    ValidateTask { file: PathBuf },
}

/// Reads an event script, skipping blank lines and `#` comments.
pub fn read_script(path: &Path) -> anyhow::Result<Vec<EventRequest>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ev: EventRequest =
            serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        out.push(ev);
    }
    Ok(out)
}

pub fn record(manager: &SessionManager, task: &str, events: &[EventRequest]) -> anyhow::Result<FinishReport> {
    let s = manager.start_live(task)?;
    for (i, ev) in events.iter().enumerate() {
        s.ingest_json(&ev.topic_tag, ev.payload.clone(), ev.ts_ns)
            .with_context(|| format!("event {}", i + 1))?;
    }
    Ok(s.finish()?)
}

/// Starts a replay and blocks until it has finished.
pub fn replay(manager: &SessionManager, session: &str, speed: ReplaySpeed) -> anyhow::Result<Arc<Session>> {
    let s = manager.start_replay(session, speed)?;
    while !s.guidance().wait_finished(Duration::from_secs(1)) {}
    if let Some(f) = s.failure() {
        bail!("replay stopped: {f}");
    }
    Ok(s)
}

pub fn analyze(manager: &SessionManager, session: &str, report: &str, bin_width_ms: u64) -> anyhow::Result<String> {
    if bin_width_ms == 0 {
        bail!("bin width must be positive");
    }
    let (graph, bus) = manager.session_bus(session)?;
    Ok(render_report(&bus, Some(&graph), report, bin_width_ms * 1_000_000)?)
}

/// Human-readable verdict on a task definition; `Err` lists the problems.
pub fn validate_task(text: &str) -> Result<String, String> {
    let g = parse_task_definition(text).map_err(|e| e.to_string())?;
    Ok(format!("{}: {} steps, {} edges, valid", g.task_id, g.total_steps(), g.edges.len()))
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    if let Command::ValidateTask { file } = &cli.command {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
        return Ok(match validate_task(&text) {
            Ok(msg) => {
                println!("{msg}");
                ExitCode::SUCCESS
            }
            Err(msg) => {
                eprintln!("{}: {msg}", file.display());
                ExitCode::FAILURE
            }
        });
    }
    let manager = Arc::new(SessionManager::new(&cli.data_dir)?);
    match cli.command {
        Command::Serve { port, host } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(crate::serve(manager, (host, port).into()))?;
        }
        Command::Record { task, script } => {
            let events = read_script(&script)?;
            let report = record(&manager, &task, &events)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Replay { session, speed } => {
            let s = replay(&manager, &session, speed)?;
            let mut out = std::io::stdout().lock();
            for r in s.guidance().all() {
                serde_json::to_writer(&mut out, &r)?;
                out.write_all(b"\n")?;
            }
        }
        Command::Analyze { session, report, out, bin_width_ms } => {
            let body = analyze(&manager, &session, &report, bin_width_ms)?;
            match out {
                Some(p) => std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().write_all(body.as_bytes())?,
            }
        }
        Command::ValidateTask { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}
