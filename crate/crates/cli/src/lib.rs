//! `lensaudit` command line: audit one contract, benchmark a corpus, record
//! live responses for replay, or re-render a saved benchmark.
//!
//! Settings resolve as flags, then environment, then the `--config` TOML
//! file, then built-in defaults.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use lensaudit::critique::{rank_top_k, run_discrimination};
use lensaudit::evaluate::{aggregate, render_report, Adjudications, ReportFormat};
use lensaudit::extract::RepairTag;
use lensaudit::generate::{run_generation, write_transcripts, AuditorReport, TrialContext};
use lensaudit::ingest::load_dataset;
use lensaudit::llm::{
    Backend, HttpBackend, LlmError, RecordingBackend, ReplayBackend, ReplayStore, RetryPolicy, RetryingBackend,
};
use lensaudit::strategies::{read_outcomes, run_benchmark, write_outcomes, Competitor, TrialOutcome};
use lensaudit::{
    validate_config, BackendKind, ContractCase, Finding, PipelineError, RunConfig, ScoreWeights, ScoredFinding,
    Strategy,
};
use serde::{Deserialize, Serialize};
use tracing::warn;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;
pub const EXIT_EXTRACTION: i32 = 4;
pub const EXIT_AUTH: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "lensaudit",
    version,
    about = "Auditor/critic LLM pipeline for smart contract vulnerability detection",
    after_help = "Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 backend error, \
4 extraction failure, 5 authentication error.\n\
Credentials: LENSAUDIT_API_KEY (or OPENAI_API_KEY); endpoint: LENSAUDIT_API_BASE."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run generation, criticism and ranking on one contract
    Audit {
        /// Solidity source file
        contract: PathBuf,
    },
    /// Run competitors over every case of a manifest for several trials
    Bench {
        /// Dataset manifest (TOML)
        manifest: PathBuf,
        /// Comma-separated competitors such as A,A+R(n1m3),A+C(n2m3) [default: the six table columns]
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Line-delimited outcome file to write
        #[arg(long, default_value = "bench-results.jsonl")]
        out: PathBuf,
        /// Manual hit/miss overrides (TOML)
        #[arg(long)]
        adjudications: Option<PathBuf>,
    },
    /// Audit one contract against the live endpoint, saving every exchange to --fixtures
    Record {
        /// Solidity source file
        contract: PathBuf,
    },
    /// Re-aggregate a saved outcome file
    Report {
        /// Outcome file written by `bench`
        results: PathBuf,
        /// Dataset manifest the outcomes came from
        #[arg(long)]
        manifest: PathBuf,
        /// Manual hit/miss overrides (TOML)
        #[arg(long)]
        adjudications: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendArg {
    Http,
    Replay,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Http => BackendKind::Http,
            BackendArg::Replay => BackendKind::Replay,
        }
    }
}

/// Pipeline settings shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML file with defaults for any of the settings below
    #[arg(long, global = true, env = "LENSAUDIT_CONFIG", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Number of auditors n [default: 2]
    #[arg(long, global = true, env = "LENSAUDIT_AUDITORS", value_name = "N")]
    pub auditors: Option<usize>,
    /// Maximum vulnerabilities per auditor m [default: 3]
    #[arg(long, global = true, env = "LENSAUDIT_MAX_VULNS", value_name = "M")]
    pub max_vulns: Option<usize>,
    /// Findings kept after ranking k [default: 1]
    #[arg(long, global = true, env = "LENSAUDIT_TOPK", value_name = "K")]
    pub topk: Option<usize>,
    /// Auditor sampling temperature [default: 0.7]
    #[arg(long, global = true, env = "LENSAUDIT_AUDITOR_TEMP", value_name = "T")]
    pub auditor_temp: Option<f64>,
    /// Critic sampling temperature [default: 0]
    #[arg(long, global = true, env = "LENSAUDIT_CRITIC_TEMP", value_name = "T")]
    pub critic_temp: Option<f64>,
    /// Trials per case and competitor [default: 3]
    #[arg(long, global = true, env = "LENSAUDIT_TRIALS", value_name = "N")]
    pub trials: Option<u32>,
    /// Base seed for per-trial randomness [default: 0]
    #[arg(long, global = true, env = "LENSAUDIT_SEED", value_name = "S")]
    pub seed: Option<u64>,
    /// Findings per critic request [default: 5]
    #[arg(long, global = true, env = "LENSAUDIT_BATCH_SIZE", value_name = "B")]
    pub batch_size: Option<usize>,
    /// Correctness,severity,profitability weights [default: 1/3,1/3,1/3]
    #[arg(long, global = true, env = "LENSAUDIT_WEIGHTS", value_name = "C,S,P")]
    pub weights: Option<ScoreWeights>,
    /// Selection strategy: A, A+R, A+C or A+O [default: A+C]
    #[arg(long, global = true, env = "LENSAUDIT_STRATEGY", value_name = "S")]
    pub strategy: Option<Strategy>,
    /// Where responses come from [default: http]
    #[arg(long, global = true, env = "LENSAUDIT_BACKEND", value_enum)]
    pub backend: Option<BackendArg>,
    /// Replay store to read (replay backend) or write (record)
    #[arg(long, global = true, env = "LENSAUDIT_FIXTURES", value_name = "PATH")]
    pub fixtures: Option<PathBuf>,
    /// Model identifier sent to the endpoint [default: gpt-4]
    #[arg(long, global = true, env = "LENSAUDIT_MODEL", value_name = "ID")]
    pub model: Option<String>,
    /// Worker threads; 1 runs sequentially, 0 uses every core [default: 0]
    #[arg(long, global = true, env = "LENSAUDIT_PARALLELISM", value_name = "N")]
    pub parallelism: Option<usize>,
    /// Output format [default: text]
    #[arg(long, global = true, env = "LENSAUDIT_FORMAT", value_enum)]
    pub format: Option<OutputFormat>,
    /// Write every request/response pair of an audit to this JSONL file
    #[arg(long, global = true, env = "LENSAUDIT_TRANSCRIPTS", value_name = "PATH")]
    pub transcripts: Option<PathBuf>,
}

/// The `--config` file: any subset of the flag settings.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub auditors: Option<usize>,
    pub max_vulns: Option<usize>,
    pub topk: Option<usize>,
    pub auditor_temp: Option<f64>,
    pub critic_temp: Option<f64>,
    pub trials: Option<u32>,
    pub seed: Option<u64>,
    pub batch_size: Option<usize>,
    pub weights: Option<String>,
    pub strategy: Option<String>,
    pub backend: Option<BackendArg>,
    pub fixtures: Option<PathBuf>,
    pub model: Option<String>,
    pub parallelism: Option<usize>,
    pub format: Option<OutputFormat>,
    pub transcripts: Option<PathBuf>,
    pub max_output_tokens: Option<u32>,
    pub critic_token_budget: Option<usize>,
    pub concurrent_critic_batches: Option<bool>,
    pub dedupe: Option<bool>,
}

/// Everything a subcommand needs after precedence has been applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub run: RunConfig,
    pub fixtures: Option<PathBuf>,
    pub parallelism: usize,
    pub format: OutputFormat,
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Internal,
    Config,
    Backend,
    Extraction,
    Auth,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => EXIT_INTERNAL,
            ErrorClass::Config => EXIT_CONFIG,
            ErrorClass::Backend => EXIT_BACKEND,
            ErrorClass::Extraction => EXIT_EXTRACTION,
            ErrorClass::Auth => EXIT_AUTH,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: ErrorClass,
    pub error: anyhow::Error,
}

impl CliError {
    fn new(class: ErrorClass, error: impl Into<anyhow::Error>) -> Self {
        Self {
            class,
            error: error.into(),
        }
    }

    fn config(message: impl fmt::Display) -> Self {
        Self::new(ErrorClass::Config, anyhow::anyhow!("{message}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        let class = if llm_is_auth(&e) {
            ErrorClass::Auth
        } else {
            ErrorClass::Backend
        };
        Self::new(class, e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let class = match &e {
            PipelineError::Config(_) | PipelineError::Prompt(_) | PipelineError::MissingLabel { .. } => {
                ErrorClass::Config
            }
            PipelineError::AllAuditorsFailed { first, .. } | PipelineError::Llm(first) => {
                if llm_is_auth(first) {
                    ErrorClass::Auth
                } else {
                    ErrorClass::Backend
                }
            }
            PipelineError::EmptyFindings | PipelineError::Io { .. } => ErrorClass::Internal,
        };
        Self::new(class, e)
    }
}

fn llm_is_auth(e: &LlmError) -> bool {
    match e {
        LlmError::ExhaustedRetries { last, .. } => llm_is_auth(last),
        other => other.is_auth(),
    }
}

fn or_file<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

impl Settings {
    /// Applies flags (already merged with environment by the parser) over the
    /// config file over defaults, then validates.
    pub fn resolve(flags: &RunFlags) -> Result<Self, CliError> {
        let file = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let defaults = RunConfig::default();
        let file_weights = file
            .weights
            .as_deref()
            .map(str::parse::<ScoreWeights>)
            .transpose()
            .map_err(|e| CliError::config(format!("config weights: {e}")))?;
        let file_strategy = file
            .strategy
            .as_deref()
            .map(str::parse::<Strategy>)
            .transpose()
            .map_err(|e| CliError::config(format!("config strategy: {e}")))?;
        let parallelism = or_file(&flags.parallelism, &file.parallelism).unwrap_or(0);
        let run = RunConfig {
            n_auditors: or_file(&flags.auditors, &file.auditors).unwrap_or(defaults.n_auditors),
            m_max_vulns: or_file(&flags.max_vulns, &file.max_vulns).unwrap_or(defaults.m_max_vulns),
            k_top: or_file(&flags.topk, &file.topk).unwrap_or(defaults.k_top),
            auditor_temperature: or_file(&flags.auditor_temp, &file.auditor_temp)
                .unwrap_or(defaults.auditor_temperature),
            critic_temperature: or_file(&flags.critic_temp, &file.critic_temp).unwrap_or(defaults.critic_temperature),
            strategy: flags.strategy.or(file_strategy).unwrap_or(defaults.strategy),
            trials: or_file(&flags.trials, &file.trials).unwrap_or(defaults.trials),
            seed: or_file(&flags.seed, &file.seed).unwrap_or(defaults.seed),
            critic_batch_size: or_file(&flags.batch_size, &file.batch_size).unwrap_or(defaults.critic_batch_size),
            critic_token_budget: file.critic_token_budget.or(defaults.critic_token_budget),
            score_weights: flags.weights.or(file_weights).unwrap_or(defaults.score_weights),
            model_id: or_file(&flags.model, &file.model).unwrap_or(defaults.model_id),
            backend: or_file(&flags.backend, &file.backend)
                .map(BackendKind::from)
                .unwrap_or(defaults.backend),
            max_output_tokens: file.max_output_tokens.or(defaults.max_output_tokens),
            parallel: parallelism != 1,
            concurrent_critic_batches: file
                .concurrent_critic_batches
                .unwrap_or(defaults.concurrent_critic_batches),
            dedupe: file.dedupe.unwrap_or(defaults.dedupe),
        };
        let validation = validate_config(&run);
        if !validation.is_ok() {
            return Err(CliError::config(format!("invalid settings: {validation}")));
        }
        Ok(Self {
            run,
            fixtures: or_file(&flags.fixtures, &file.fixtures),
            parallelism,
            format: or_file(&flags.format, &file.format).unwrap_or(OutputFormat::Text),
            transcripts: or_file(&flags.transcripts, &file.transcripts),
        })
    }

    fn backend(&self) -> Result<Box<dyn Backend>, CliError> {
        match self.run.backend {
            BackendKind::Replay => {
                let path = self
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| CliError::config("the replay backend needs --fixtures PATH"))?;
                let store = ReplayStore::load(path).map_err(CliError::config)?;
                Ok(Box::new(ReplayBackend::new(store)))
            }
            BackendKind::Http => Ok(Box::new(RetryingBackend::new(
                HttpBackend::from_env()?,
                RetryPolicy::default(),
            ))),
        }
    }
}

/// One ranked finding in the auditor/critic record shape plus ranking fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedRecord {
    pub rank: usize,
    pub function_name: String,
    pub vulnerability: String,
    pub auditor: String,
    pub critic: String,
    pub correctness: u8,
    pub severity: u8,
    pub profitability: u8,
    pub composite: String,
    pub auditor_index: usize,
}

impl From<&ScoredFinding> for RankedRecord {
    fn from(s: &ScoredFinding) -> Self {
        Self {
            rank: s.rank.unwrap_or(0),
            function_name: s.finding.function_name.clone(),
            vulnerability: s.finding.vulnerability.clone(),
            auditor: s.finding.reasoning.clone(),
            critic: s.critique.criticism.clone(),
            correctness: s.critique.correctness,
            severity: s.critique.severity,
            profitability: s.critique.profitability,
            composite: s.composite.to_string(),
            auditor_index: s.finding.auditor_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditorSummary {
    pub auditor_index: usize,
    pub request_tag: String,
    pub findings: usize,
    pub null_output: bool,
    pub extraction_failed: bool,
    pub repairs: Vec<RepairTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&AuditorReport> for AuditorSummary {
    fn from(r: &AuditorReport) -> Self {
        let ex = r.extraction.as_ref();
        Self {
            auditor_index: r.auditor_index,
            request_tag: r.request_tag.clone(),
            findings: ex.map_or(0, |e| e.values.len()),
            null_output: ex.is_some_and(|e| e.null_output),
            extraction_failed: ex.is_some_and(|e| e.extraction_failed),
            repairs: ex.map(|e| e.repairs_applied.clone()).unwrap_or_default(),
            error: r.error.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSummary {
    pub batch_index: usize,
    pub findings: usize,
    pub repairs: Vec<RepairTag>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Result document of `audit` and `record`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditOutput {
    pub case_id: String,
    pub n_auditors: usize,
    pub m_max_vulns: usize,
    pub k_top: usize,
    pub weights: String,
    pub findings: Vec<Finding>,
    pub ranked: Vec<RankedRecord>,
    pub auditors: Vec<AuditorSummary>,
    pub critic_batches: Vec<CriticSummary>,
}

fn case_from_file(path: &Path) -> Result<ContractCase, CliError> {
    let source = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read contract {}: {e}", path.display())))?;
    if source.trim().is_empty() {
        return Err(CliError::config(format!("contract {} is empty", path.display())));
    }
    let case_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "contract".into());
    Ok(ContractCase::new(case_id, source))
}

fn ensure_two_stage(settings: &Settings) -> Result<(), CliError> {
    if settings.run.strategy != Strategy::AuditorCritic {
        return Err(CliError::config(format!(
            "audit runs the auditor/critic pipeline; strategy {} is only available through bench",
            settings.run.strategy
        )));
    }
    Ok(())
}

/// Generation, criticism and top-k ranking on one contract.
pub fn audit_case(case: &ContractCase, settings: &Settings, backend: &dyn Backend) -> Result<AuditOutput, CliError> {
    ensure_two_stage(settings)?;
    let config = &settings.run;
    let ctx = TrialContext::audit();
    let generation = run_generation(case, config, backend, &ctx)?;
    let mut transcripts = generation.raw_transcripts.clone();
    let all_unreadable = generation
        .per_auditor_reports
        .iter()
        .all(|r| r.extraction.as_ref().is_some_and(|e| e.extraction_failed));

    let mut ranked = Vec::new();
    let mut critic_batches = Vec::new();
    if !generation.findings.is_empty() {
        let scored = run_discrimination(&generation.findings, case, config, backend, &ctx)?;
        transcripts.extend(scored.raw_transcripts.iter().cloned());
        ranked = rank_top_k(&scored.scored, config.k_top)
            .iter()
            .map(RankedRecord::from)
            .collect();
        critic_batches = scored
            .batches
            .iter()
            .map(|b| CriticSummary {
                batch_index: b.batch_index,
                findings: b.end - b.start,
                repairs: b
                    .extraction
                    .as_ref()
                    .map(|e| e.repairs_applied.clone())
                    .unwrap_or_default(),
                warnings: b.extraction.as_ref().map(|e| e.warnings.clone()).unwrap_or_default(),
                error: b.error.clone(),
            })
            .collect();
    }
    if let Some(path) = &settings.transcripts {
        write_transcripts(path, &transcripts)?;
    }
    let output = AuditOutput {
        case_id: case.case_id.clone(),
        n_auditors: config.n_auditors,
        m_max_vulns: config.m_max_vulns,
        k_top: config.k_top,
        weights: config.score_weights.to_string(),
        findings: generation.findings,
        ranked,
        auditors: generation
            .per_auditor_reports
            .iter()
            .map(AuditorSummary::from)
            .collect(),
        critic_batches,
    };
    if all_unreadable {
        return Err(CliError::new(
            ErrorClass::Extraction,
            anyhow::anyhow!("no auditor reply contained a readable findings list"),
        ));
    }
    Ok(output)
}

fn render_audit(output: &AuditOutput, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => {
            let mut s = serde_json::to_string_pretty(output).expect("audit output serializes");
            s.push('\n');
            s
        }
        OutputFormat::Text => {
            let mut s = format!(
                "case {}: {} auditors, up to {} findings each, top {}\n",
                output.case_id, output.n_auditors, output.m_max_vulns, output.k_top
            );
            for a in &output.auditors {
                match &a.error {
                    Some(e) => s.push_str(&format!("  auditor {}: failed: {e}\n", a.auditor_index)),
                    None => s.push_str(&format!("  auditor {}: {} findings\n", a.auditor_index, a.findings)),
                }
            }
            if output.ranked.is_empty() {
                s.push_str("no findings\n");
            }
            for r in &output.ranked {
                s.push_str(&format!(
                    "#{} {}: {} (composite {}; correctness {}, severity {}, profitability {})\n    auditor: {}\n    critic: {}\n",
                    r.rank,
                    r.function_name,
                    r.vulnerability,
                    r.composite,
                    r.correctness,
                    r.severity,
                    r.profitability,
                    r.auditor,
                    r.critic
                ));
            }
            s
        }
    }
}

fn parse_competitors(specs: &[String], settings: &Settings) -> Result<Vec<Competitor>, CliError> {
    if specs.is_empty() {
        return Ok(Competitor::table_six());
    }
    specs
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            Competitor::parse_with_defaults(s, settings.run.n_auditors, settings.run.m_max_vulns)
                .map_err(CliError::config)
        })
        .collect()
}

fn load_adjudications(path: Option<&PathBuf>) -> Result<Option<Adjudications>, CliError> {
    path.map(|p| Adjudications::load(p).map_err(CliError::config))
        .transpose()
}

fn report_text(
    outcomes: &[TrialOutcome],
    cases: &[ContractCase],
    adjudications: Option<&Adjudications>,
    format: OutputFormat,
) -> Result<String, CliError> {
    let report = aggregate(outcomes, cases, adjudications).map_err(CliError::config)?;
    let format = match format {
        OutputFormat::Text => ReportFormat::TextTable,
        OutputFormat::Json => ReportFormat::MachineJson,
    };
    Ok(render_report(&report, format))
}

fn with_pool<T: Send>(parallelism: usize, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    if parallelism <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .context("building worker pool")
        .map_err(|e| CliError::new(ErrorClass::Internal, e))?;
    Ok(pool.install(f))
}

/// Runs a parsed command, writing the result document to `out`.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let settings = Settings::resolve(&cli.flags)?;
    let io = |e: std::io::Error| CliError::new(ErrorClass::Internal, e);
    match cli.command {
        Command::Audit { contract } => {
            let case = case_from_file(&contract)?;
            ensure_two_stage(&settings)?;
            let backend = settings.backend()?;
            let output = with_pool(settings.parallelism, || audit_case(&case, &settings, backend.as_ref()))??;
            out.write_all(render_audit(&output, settings.format).as_bytes())
                .map_err(io)?;
        }
        Command::Record { contract } => {
            let case = case_from_file(&contract)?;
            ensure_two_stage(&settings)?;
            let path = settings
                .fixtures
                .clone()
                .ok_or_else(|| CliError::config("record needs --fixtures PATH to write to"))?;
            let existing = if path.exists() {
                ReplayStore::load(&path).map_err(CliError::config)?
            } else {
                ReplayStore::new()
            };
            let live = RetryingBackend::new(HttpBackend::from_env()?, RetryPolicy::default());
            let recorder = RecordingBackend::with_store(live, existing);
            let result = audit_case(&case, &settings, &recorder);
            let store = recorder.into_store();
            store
                .save(&path)
                .with_context(|| format!("writing {}", path.display()))
                .map_err(|e| CliError::new(ErrorClass::Internal, e))?;
            let output = result?;
            writeln!(
                err,
                "recorded {} responses to {}",
                store.response_count(),
                path.display()
            )
            .map_err(io)?;
            out.write_all(render_audit(&output, settings.format).as_bytes())
                .map_err(io)?;
        }
        Command::Bench {
            manifest,
            strategies,
            out: results_path,
            adjudications,
        } => {
            let cases = load_dataset(&manifest).map_err(CliError::config)?;
            let mut specs = strategies;
            if specs.is_empty() && cli.flags.strategy.is_some() {
                specs.push(settings.run.strategy.label().to_string());
            }
            let competitors = parse_competitors(&specs, &settings)?;
            let adjudications = load_adjudications(adjudications.as_ref())?;
            let backend = settings.backend()?;
            let outcomes = with_pool(settings.parallelism, || {
                run_benchmark(&cases, &competitors, &settings.run, backend.as_ref())
            })?;
            write_outcomes(&results_path, &outcomes)
                .with_context(|| format!("writing {}", results_path.display()))
                .map_err(|e| CliError::new(ErrorClass::Internal, e))?;
            let failed: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.error.is_some()).collect();
            for o in &failed {
                warn!(case = %o.case_id, label = %o.label, trial = o.trial_index, error = ?o.error, "trial error");
            }
            if !failed.is_empty() {
                writeln!(
                    err,
                    "{} of {} trials failed; see {}",
                    failed.len(),
                    outcomes.len(),
                    results_path.display()
                )
                .map_err(io)?;
            }
            let text = report_text(&outcomes, &cases, adjudications.as_ref(), settings.format)?;
            out.write_all(text.as_bytes()).map_err(io)?;
            if !outcomes.is_empty() && failed.len() == outcomes.len() {
                return Err(CliError::new(
                    ErrorClass::Backend,
                    anyhow::anyhow!("every trial failed"),
                ));
            }
        }
        Command::Report {
            results,
            manifest,
            adjudications,
        } => {
            let cases = load_dataset(&manifest).map_err(CliError::config)?;
            let outcomes = read_outcomes(&results).map_err(CliError::config)?;
            let adjudications = load_adjudications(adjudications.as_ref())?;
            let text = report_text(&outcomes, &cases, adjudications.as_ref(), settings.format)?;
            out.write_all(text.as_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs them, returning the
/// process exit code. Diagnostics go to `err`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let rendered = e.render().to_string();
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = target.write_all(rendered.as_bytes());
            return code;
        }
    };
    match run(cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.class.exit_code()
        }
    }
}
