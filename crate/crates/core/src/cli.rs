//! Terminal entry points: `repl`, `bench` and `check`.
//!
//! Exit codes: `check` returns 0 when clean, 1 on findings and 2 on tool
//! errors. `bench` returns 0 when every selected case executed, 1 when some
//! were skipped or aborted, and 2 on usage or suite errors. `repl` returns 0
//! on a clean quit and 1 when the backend fails.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::gateway::{HttpModel, ModelBackend, ScriptedModel, Usage, UsageCounter};
use crate::orchestrator::{
    new_agent, Agent, AgentConfig, AgentError, Final, ModelParams, SessionResult, Transcript, TranscriptTotals,
    TranscriptTurn, TRANSCRIPT_VERSION,
};
use crate::runtime::{create_runtime, restore, RuntimeConfig, Snapshot};
use crate::security::{check, default_policy, SecurityPolicy};
use crate::semantic::Role;
use crate::statebench::{
    oracle_backend, render_table, report, resolve_suite, run_suite, BenchCase, Category, BUNDLED_SUITE,
};

/// Where the partial transcript goes when the REPL fails without `--transcript`.
pub const PARTIAL_TRANSCRIPT: &str = "cellagent-partial-transcript.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendChoice {
    /// OpenAI-compatible endpoint configured from the environment.
    Live,
    /// Each benchmark turn answered with its reference code.
    Oracle,
    /// Responses replayed from a JSON array file.
    Scripted(PathBuf),
}

impl FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Self::Live),
            "oracle" => Ok(Self::Oracle),
            _ => match s.strip_prefix("scripted:") {
                Some(p) if !p.is_empty() => Ok(Self::Scripted(PathBuf::from(p))),
                _ => Err(format!("unknown backend {s:?}; use live, oracle or scripted:PATH")),
            },
        }
    }
}

fn parse_category(s: &str) -> Result<Category, String> {
    Category::parse(s).ok_or_else(|| {
        let names: Vec<_> = Category::ALL.iter().map(|c| c.as_str()).collect();
        format!("unknown category {s:?}; expected one of {}", names.join(", "))
    })
}

#[derive(Debug, Parser)]
#[command(name = "cellagent", version, about = "Stateful code-acting agent runtime")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    /// Agent config file (TOML or JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Model calls per query.
    #[arg(long)]
    pub max_turns: Option<usize>,
    /// Observation limit in characters.
    #[arg(long)]
    pub max_output: Option<usize>,
    /// Security policy file (TOML or JSON).
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// live, oracle or scripted:PATH.
    #[arg(long, default_value = "live")]
    pub backend: BackendChoice,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interactive session over one persistent runtime.
    Repl {
        #[command(flatten)]
        agent: AgentArgs,
        /// Write the session transcript here on exit.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Run a benchmark suite and report success rates and usage.
    Bench {
        #[command(flatten)]
        agent: AgentArgs,
        /// Suite file or directory, or the bundled suite's name.
        #[arg(long, default_value = BUNDLED_SUITE)]
        suite: String,
        /// Write the structured report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Only run these categories; repeatable.
        #[arg(long = "category", value_parser = parse_category)]
        categories: Vec<Category>,
    },
    /// Check a source file against a security policy.
    Check {
        source: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn load_policy(path: &Option<PathBuf>) -> Result<SecurityPolicy, String> {
    match path {
        Some(p) => SecurityPolicy::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(default_policy()),
    }
}

impl AgentArgs {
    pub fn agent_config(&self) -> Result<AgentConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => AgentConfig::load(p).map_err(|e| e.to_string())?,
            None => AgentConfig::default(),
        };
        if let Some(m) = &self.model {
            cfg.model = ModelParams::for_model(m.clone());
        }
        if let Some(t) = self.temperature {
            cfg.model.temperature = t;
        }
        if let Some(n) = self.max_turns {
            cfg.max_turns = n;
        }
        if let Some(n) = self.max_output {
            cfg.max_output = n;
        }
        if self.policy.is_some() {
            cfg.policy = load_policy(&self.policy)?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, R, O, E>(args: I, input: R, out: &mut O, err: &mut E) -> i32
where
    I: IntoIterator,
    I::Item: Into<OsString> + Clone,
    R: BufRead,
    O: Write,
    E: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match cli.command {
        Command::Repl { agent, transcript } => cmd_repl(&agent, transcript.as_deref(), input, out, err),
        Command::Bench {
            agent,
            suite,
            report,
            jobs,
            categories,
        } => cmd_bench(&agent, &suite, report.as_deref(), jobs, &categories, out, err),
        Command::Check { source, policy } => cmd_check(&source, &policy, out, err),
    }
}

pub fn cmd_check<O: Write, E: Write>(source: &Path, policy: &Option<PathBuf>, out: &mut O, err: &mut E) -> i32 {
    let policy = match load_policy(policy) {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: bad policy: {e}");
            return 2;
        }
    };
    let text = match std::fs::read_to_string(source) {
        Ok(t) => t,
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", source.display());
            return 2;
        }
    };
    let violations = check(&text, &policy);
    for v in &violations {
        let _ = writeln!(
            out,
            "{}:{}:{}: {}",
            source.display(),
            v.location.0,
            v.location.1,
            v.message
        );
    }
    if violations.is_empty() {
        let _ = writeln!(out, "{}: clean", source.display());
        0
    } else {
        1
    }
}

fn live_backend() -> Result<Arc<dyn ModelBackend>, String> {
    HttpModel::from_env()
        .map(|m| Arc::new(m) as Arc<dyn ModelBackend>)
        .map_err(|e| e.to_string())
}

fn scripted_backend(path: &Path) -> Result<Arc<dyn ModelBackend>, String> {
    ScriptedModel::from_file(path)
        .map(|m| Arc::new(m) as Arc<dyn ModelBackend>)
        .map_err(|e| e.to_string())
}

pub fn cmd_bench<O: Write, E: Write>(
    args: &AgentArgs,
    suite: &str,
    report_path: Option<&Path>,
    jobs: usize,
    categories: &[Category],
    out: &mut O,
    err: &mut E,
) -> i32 {
    let config = match args.agent_config() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let mut cases = match resolve_suite(suite) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: suite {suite}: {e}");
            return 2;
        }
    };
    if !categories.is_empty() {
        cases.retain(|c| categories.contains(&c.category));
    }
    if cases.is_empty() {
        let _ = writeln!(err, "error: no cases selected");
        return 2;
    }
    let live = match &args.backend {
        BackendChoice::Live => match live_backend() {
            Ok(b) => Some(b),
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return 2;
            }
        },
        BackendChoice::Scripted(p) => {
            if let Err(e) = scripted_backend(p) {
                let _ = writeln!(err, "error: {e}");
                return 2;
            }
            None
        }
        BackendChoice::Oracle => None,
    };
    let backend = args.backend.clone();
    let factory = move |case: &BenchCase| -> Result<Agent, AgentError> {
        let model: Arc<dyn ModelBackend> = match &backend {
            BackendChoice::Live => live.clone().expect("live backend built above"),
            BackendChoice::Oracle => Arc::new(oracle_backend(case)?),
            BackendChoice::Scripted(p) => scripted_backend(p).map_err(AgentError::Config)?,
        };
        let runtime = create_runtime(RuntimeConfig::default())?;
        new_agent(config.clone(), runtime, model, Vec::new(), Vec::new())
    };
    let results = run_suite(&cases, &factory, jobs.max(1));
    let rep = match report(&results) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let _ = write!(out, "{}", render_table(&rep));
    if let Some(p) = report_path {
        if let Err(e) = std::fs::write(p, rep.to_json()) {
            let _ = writeln!(err, "error: {}: {e}", p.display());
            return 2;
        }
    }
    let mut all_ran = true;
    for r in &results {
        if let Some(why) = r.skipped.as_ref().or(r.aborted.as_ref()) {
            let _ = writeln!(err, "case {} did not complete: {why}", r.id);
            all_ran = false;
        }
    }
    if all_ran {
        0
    } else {
        1
    }
}

/// Transcript of a whole REPL session: user lines plus every model turn.
struct SessionLog {
    turns: Vec<TranscriptTurn>,
    usage: UsageCounter,
    final_: Final,
}

impl SessionLog {
    fn new() -> Self {
        Self {
            turns: Vec::new(),
            usage: UsageCounter::default(),
            final_: Final::Answer(String::new()),
        }
    }

    fn user(&mut self, text: &str) {
        self.turns.push(TranscriptTurn {
            index: self.turns.len() + 1,
            role: Role::User,
            content: text.to_string(),
            code: None,
            diagnostics: Vec::new(),
            violations: Vec::new(),
            observation: None,
            feedback: None,
            usage: Usage::default(),
        });
    }

    fn session(&mut self, result: &SessionResult) {
        for mut t in Transcript::from_result(result).turns {
            t.index = self.turns.len() + 1;
            self.turns.push(t);
        }
        self.usage = self.usage.merged(&result.usage);
        self.final_ = result.final_.clone();
    }

    fn transcript(&self) -> Transcript {
        let final_message = match &self.final_ {
            Final::Answer(a) => a.clone(),
            Final::MaxSteps => crate::orchestrator::MAX_STEPS_MESSAGE.to_string(),
            Final::Aborted(r) => r.clone(),
        };
        Transcript {
            version: TRANSCRIPT_VERSION.into(),
            final_: self.final_.clone(),
            final_message,
            turns: self.turns.clone(),
            totals: TranscriptTotals {
                steps: self.usage.steps,
                prompt_tokens: self.usage.prompt_tokens,
                completion_tokens: self.usage.completion_tokens,
                total_tokens: self.usage.total(),
            },
        }
    }

    fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.transcript().to_json())
    }
}

fn print_session<O: Write>(out: &mut O, result: &SessionResult) {
    for t in &result.turns {
        if let Some(code) = &t.action.code {
            let _ = writeln!(out, "--- code [{}]\n{}", t.index, code.trim_end());
        }
        if let Some(obs) = &t.observation {
            let _ = writeln!(out, "--- observation\n{}", obs.text.trim_end());
        }
    }
    let _ = writeln!(out, "=> {}", result.final_message());
}

fn repl_command<O: Write>(agent: &mut Agent, line: &str, out: &mut O) -> Result<(), String> {
    let (cmd, arg) = match line.split_once(char::is_whitespace) {
        Some((c, a)) => (c, a.trim()),
        None => (line, ""),
    };
    match cmd {
        "/help" => {
            let _ = writeln!(
                out,
                "/vars            list namespace entries\n/save PATH       write a snapshot\n/load PATH       restore a snapshot\n/quit            leave"
            );
        }
        "/vars" => {
            for e in agent.runtime().list_entries() {
                let origin = match e.origin {
                    crate::runtime::Origin::Injected => "injected",
                    crate::runtime::Origin::CellCreated => "cell",
                };
                let _ = writeln!(out, "{}: {} [{origin}] {}", e.name, e.type_name, e.summary);
            }
        }
        "/save" if !arg.is_empty() => {
            let snap = agent.runtime().snapshot().map_err(|e| e.to_string())?;
            snap.write_to(arg).map_err(|e| e.to_string())?;
            let _ = writeln!(
                out,
                "saved {} entries to {arg} ({} skipped)",
                snap.entries.len(),
                snap.skipped.len()
            );
            for s in &snap.skipped {
                let _ = writeln!(out, "  skipped {}: {}", s.name, s.reason);
            }
        }
        "/load" if !arg.is_empty() => {
            let snap = Snapshot::read_from(arg).map_err(|e| e.to_string())?;
            let config = agent.runtime().config().clone();
            let rt = restore(&snap, config).map_err(|e| e.to_string())?;
            agent.rebind_runtime(rt).map_err(|e| e.to_string())?;
            let _ = writeln!(out, "loaded {} entries from {arg}", snap.entries.len());
        }
        "/save" | "/load" => return Err(format!("usage: {cmd} PATH")),
        _ => return Err(format!("unknown command {cmd}; try /help")),
    }
    Ok(())
}

pub fn cmd_repl<R: BufRead, O: Write, E: Write>(
    args: &AgentArgs,
    transcript: Option<&Path>,
    input: R,
    out: &mut O,
    err: &mut E,
) -> i32 {
    let config = match args.agent_config() {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let backend = match &args.backend {
        BackendChoice::Live => live_backend(),
        BackendChoice::Scripted(p) => scripted_backend(p),
        BackendChoice::Oracle => Err("the oracle backend only drives benchmark cases".into()),
    };
    let backend = match backend {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let runtime = match create_runtime(RuntimeConfig::default()) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let mut agent = match new_agent(config, runtime, backend, Vec::new(), Vec::new()) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return 2;
        }
    };
    let mut log = SessionLog::new();
    let fail = |log: &SessionLog, err: &mut E, reason: &str| {
        let path = transcript.unwrap_or(Path::new(PARTIAL_TRANSCRIPT));
        let _ = writeln!(err, "error: {reason}");
        match log.write(path) {
            Ok(()) => {
                let _ = writeln!(err, "partial transcript saved to {}", path.display());
            }
            Err(e) => {
                let _ = writeln!(err, "could not save transcript to {}: {e}", path.display());
            }
        }
        1
    };
    for line in input.lines() {
        let line = match line {
            Ok(l) => l,
            Err(e) => return fail(&log, err, &e.to_string()),
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" || line == "/exit" {
            break;
        }
        if line.starts_with('/') {
            if let Err(e) = repl_command(&mut agent, line, out) {
                let _ = writeln!(err, "{e}");
            }
            continue;
        }
        log.user(line);
        match agent.step(line) {
            Ok(result) => {
                print_session(out, &result);
                log.session(&result);
                if result.is_aborted() {
                    return fail(&log, err, &format!("backend failed: {}", result.final_message()));
                }
            }
            Err(AgentError::Fatal { reason, partial }) => {
                print_session(out, &partial);
                log.session(&partial);
                return fail(&log, err, &reason);
            }
            Err(e) => {
                let _ = writeln!(err, "{e}");
            }
        }
    }
    if let Some(p) = transcript {
        if let Err(e) = log.write(p) {
            let _ = writeln!(err, "could not save transcript to {}: {e}", p.display());
            return 1;
        }
    }
    0
}
