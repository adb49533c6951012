use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use learnflow_core::driver::{drive, DriveError, DriveHooks, InputSource, ScriptedInputs};
use learnflow_core::exemplars::{self, EXEMPLARS};
use learnflow_core::flow::{instantiate_template, to_document};
use learnflow_core::gateway::{HttpProvider, HttpProviderConfig, Provider, ProviderScript, StubProvider};
use learnflow_core::log::{
    parse_records, project, replay as replay_log, session_log_path, EventLog,
    LogRecord, SessionManifest,
};
use learnflow_core::text::word_count;
use learnflow_core::{parse_flow, validate_flow, ContentStore, Engine, Event, FlowDefinition, Source, SystemClock};
use learnflow_server::AppState;

use crate::transcript::Printer;
use crate::{ProviderArgs, ProviderKind, RunArgs};

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure(pub u8, String);

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failure {}

fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    Failure(code, message.into()).into()
}

fn load_flow(path: &Path) -> Result<FlowDefinition> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_flow(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_store(materials: Option<&Path>) -> Result<ContentStore> {
    match materials {
        Some(dir) => ContentStore::load_dir(dir).with_context(|| format!("loading materials from {}", dir.display())),
        None => Ok(ContentStore::new()),
    }
}

fn engine(materials: Option<&Path>) -> Result<Engine> {
    Ok(Engine::new(Arc::new(load_store(materials)?), Arc::new(SystemClock)))
}

pub fn validate(path: &Path) -> Result<ExitCode> {
    let flow = load_flow(path)?;
    let report = validate_flow(&flow);
    print!("{report}");
    if report.ok {
        println!("{}: ok", flow.id);
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

fn provider(args: &ProviderArgs) -> Result<Arc<dyn Provider>> {
    Ok(match args.provider {
        ProviderKind::Stub => {
            let Some(path) = &args.script else {
                bail!("--provider stub needs --script");
            };
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let script = ProviderScript::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            Arc::new(StubProvider::new(script))
        }
        ProviderKind::Http => {
            let (Some(base_url), Some(model)) = (&args.base_url, &args.model) else {
                bail!("--provider http needs --base-url and --model");
            };
            Arc::new(HttpProvider::new(HttpProviderConfig::new(base_url.clone(), model.clone())))
        }
    })
}

fn parse_pairs(pairs: &[String], what: &str) -> Result<BTreeMap<String, String>> {
    pairs
        .iter()
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| anyhow::anyhow!("{what} `{p}` is not NAME=VALUE"))
        })
        .collect()
}

/// Reads turns from the terminal, re-asking when a turn is too long.
struct Terminal;

impl InputSource for Terminal {
    fn next_input(&mut self, slot_id: &str, step_id: &str, max_words: Option<u32>) -> Option<(String, String)> {
        let stdin = std::io::stdin();
        loop {
            let limit = max_words.map(|m| format!(", max {m} words")).unwrap_or_default();
            eprint!("{slot_id} [step {step_id}{limit}]> ");
            let _ = std::io::stderr().flush();
            let mut line = String::new();
            if stdin.lock().read_line(&mut line).ok()? == 0 {
                return None;
            }
            let line = line.trim_end_matches(['\r', '\n']).to_string();
            match max_words {
                Some(max) if word_count(&line) > max as usize => {
                    eprintln!("{} words; the limit is {max}", word_count(&line));
                }
                _ => return Some((slot_id.to_string(), line)),
            }
        }
    }
}

struct RunHooks {
    log: EventLog,
    session_id: String,
    printer: Option<Printer<std::io::Stdout>>,
}

impl DriveHooks for RunHooks {
    fn on_event(&mut self, event: &Event) -> Result<(), DriveError> {
        self.log.append(event)?;
        if let Some(printer) = self.printer.as_mut() {
            let _ = printer.record(&LogRecord::from_event(&self.session_id, event));
        }
        Ok(())
    }
}

pub fn run(args: RunArgs) -> Result<ExitCode> {
    let flow = load_flow(&args.flow)?;
    let report = validate_flow(&flow);
    if !report.ok {
        eprint!("{report}");
        return Err(fail(1, format!("flow `{}` does not validate", flow.id)));
    }
    let overrides = parse_pairs(&args.toggles, "toggle")?
        .into_iter()
        .map(|(slot, source)| {
            let source: Source = serde_json::from_value(serde_json::Value::String(source.clone()))
                .map_err(|_| anyhow::anyhow!("source `{source}` must be human or ai"))?;
            Ok((slot, source))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let provider = provider(&args.provider)?;
    let mut inputs: Box<dyn InputSource> = match &args.inputs {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(ScriptedInputs::from_json(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => Box::new(Terminal),
    };
    let engine = engine(args.materials.as_deref())?;

    let data_dir = &args.data_dir;
    let session_id = match args.session_id {
        Some(id) => id,
        None => (1..)
            .map(|n| format!("{}-{n}", flow.id))
            .find(|id| !session_log_path(data_dir, id).exists())
            .expect("some id is free"),
    };
    if session_log_path(data_dir, &session_id).exists() {
        bail!("session `{session_id}` already has a log in {}", data_dir.display());
    }
    let mut state = engine.start_session(&session_id, flow.clone(), &overrides)?;
    SessionManifest {
        session_id: session_id.clone(),
        flow: flow.clone(),
        overrides,
    }
    .write(data_dir)?;
    let mut hooks = RunHooks {
        log: EventLog::create(data_dir, &session_id)?,
        session_id: session_id.clone(),
        printer: (!args.quiet).then(|| Printer::new(&flow, std::io::stdout())),
    };
    let outcome = drive(&engine, &mut state, provider.as_ref(), inputs.as_mut(), &mut hooks);
    let log_path = hooks.log.path().to_path_buf();
    eprintln!("log: {}", log_path.display());
    match outcome {
        Ok(()) => {
            eprintln!("session {session_id}: {}", state.status.name());
            Ok(ExitCode::SUCCESS)
        }
        Err(e @ (DriveError::Provider { .. } | DriveError::InputStarved { .. })) => Err(fail(3, e.to_string())),
        Err(e) => Err(fail(1, e.to_string())),
    }
}

/// `<dir>/<id>.events.jsonl` -> `<dir>/<id>.session.json`
fn manifest_beside(log: &Path) -> Option<PathBuf> {
    let id = log.file_name()?.to_str()?.strip_suffix(".events.jsonl")?;
    Some(log.with_file_name(format!("{id}.session.json")))
}

pub fn replay(log: &Path, viewer: Option<&str>, flow: Option<&Path>, materials: Option<&Path>) -> Result<ExitCode> {
    let text = std::fs::read_to_string(log).with_context(|| format!("reading {}", log.display()))?;
    let records = parse_records(&text).map_err(|e| fail(1, e.to_string()))?;
    let manifest = match flow {
        Some(path) => SessionManifest {
            session_id: records.first().map(|r| r.session_id.clone()).unwrap_or_default(),
            flow: load_flow(path)?,
            overrides: BTreeMap::new(),
        },
        None => {
            let path = manifest_beside(log).context("log file should be named <session>.events.jsonl")?;
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("reading session manifest {} (or pass --flow)", path.display()))?;
            SessionManifest::from_json(&text)?
        }
    };
    let shown: Vec<&LogRecord> = match viewer {
        Some(slot) => project(&records, slot, &manifest.flow)?,
        None => records.iter().collect(),
    };
    let mut printer = Printer::new(&manifest.flow, std::io::stdout().lock());
    for record in shown {
        printer.record(record)?;
    }
    drop(printer);

    let engine = engine(materials)?;
    match replay_log(&engine, &manifest.session_id, manifest.flow, &manifest.overrides, &records) {
        Ok(state) => {
            println!("replay verified: {} events, status {}", records.len(), state.status.name());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => Err(fail(1, format!("replay failed: {e}"))),
    }
}

pub fn serve(port: u16, data_dir: PathBuf, provider_args: &ProviderArgs, materials: Option<&Path>) -> Result<ExitCode> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let provider = provider(provider_args)?;
    let engine = engine(materials)?;
    std::fs::create_dir_all(&data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    let state = AppState::with_data_dir(engine, provider, data_dir)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .with_context(|| format!("binding port {port}"))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        learnflow_server::serve(listener, state).await?;
        Ok(ExitCode::SUCCESS)
    })
}

pub fn examples(dir: &Path, force: bool) -> Result<ExitCode> {
    if !force && dir.is_dir() && std::fs::read_dir(dir)?.next().is_some() {
        return Err(fail(2, format!("{} is not empty; pass --force to overwrite", dir.display())));
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, document) in EXEMPLARS {
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, document).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

pub fn instantiate(name: &str, bindings: &[String], output: Option<&Path>) -> Result<ExitCode> {
    let Some(template) = exemplars::template(name) else {
        let names: Vec<&str> = exemplars::TEMPLATES.iter().map(|(n, _)| *n).collect();
        bail!("no template `{name}`; choose one of {}", names.join(", "));
    };
    let bindings = parse_pairs(bindings, "binding")?;
    let outcome = instantiate_template(&template, &bindings).map_err(|e| fail(1, e.to_string()))?;
    for unused in &outcome.unused_bindings {
        eprintln!("warning: binding `{unused}` is not used by the template");
    }
    let report = validate_flow(&outcome.flow);
    if !report.ok {
        eprint!("{report}");
        return Err(fail(1, "instantiated flow does not validate"));
    }
    let document = to_document(&outcome.flow);
    match output {
        Some(path) => std::fs::write(path, document).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{document}"),
    }
    Ok(ExitCode::SUCCESS)
}
