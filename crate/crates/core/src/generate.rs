//! Generation stage: `n` auditors receive the same prompt and each returns
//! up to `m` candidate vulnerabilities.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::PipelineError;
use crate::extract::{extract_findings, ExtractionReport};
use crate::llm::{Backend, ChatRequest, ChatResponse, LlmError};
use crate::prompts::{function_identifier, render_auditor};
use crate::types::{normalize, validate_config, ContractCase, Finding, RunConfig};

/// Where a request sits in a run; becomes part of every request tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialContext {
    pub label: String,
    pub trial_index: u32,
}

impl TrialContext {
    pub fn new(label: impl Into<String>, trial_index: u32) -> Self {
        Self {
            label: label.into(),
            trial_index,
        }
    }

    /// Context used by one-off audits.
    pub fn audit() -> Self {
        Self::new("audit", 1)
    }

    pub fn tag(&self, case_id: &str, role: &str) -> String {
        format!("{case_id}/{}/t{}/{role}", self.label, self.trial_index)
    }
}

/// One request/response exchange, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub request: ChatRequest,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ChatResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Transcript {
    pub fn new(request: ChatRequest, result: &Result<ChatResponse, LlmError>) -> Self {
        match result {
            Ok(r) => Self {
                request,
                response: Some(r.clone()),
                error: None,
            },
            Err(e) => Self {
                request,
                response: None,
                error: Some(e.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditorReport {
    pub auditor_index: usize,
    pub request_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionReport<Finding>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl AuditorReport {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub findings: Vec<Finding>,
    pub per_auditor_reports: Vec<AuditorReport>,
    pub raw_transcripts: Vec<Transcript>,
}

impl GenerationResult {
    pub fn findings_of(&self, auditor_index: usize) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(move |f| f.auditor_index == auditor_index)
    }
}

pub fn auditor_request(
    case: &ContractCase,
    config: &RunConfig,
    ctx: &TrialContext,
    auditor_index: usize,
    m: usize,
) -> Result<ChatRequest, PipelineError> {
    Ok(ChatRequest {
        model_id: config.model_id.clone(),
        system_text: String::new(),
        user_text: render_auditor(&case.source, m)?,
        temperature: config.auditor_temperature,
        max_output_tokens: config.max_output_tokens,
        request_tag: ctx.tag(&case.case_id, &format!("auditor{auditor_index}")),
    })
}

/// Issues `config.n_auditors` identical auditor requests and gathers their
/// findings in auditor order.
pub fn run_generation(
    case: &ContractCase,
    config: &RunConfig,
    client: &dyn Backend,
    ctx: &TrialContext,
) -> Result<GenerationResult, PipelineError> {
    let validation = validate_config(config);
    if !validation.is_ok() {
        return Err(PipelineError::Config(validation.to_string()));
    }
    let n = config.n_auditors;
    let m = config.m_max_vulns;
    let requests = (0..n)
        .map(|i| auditor_request(case, config, ctx, i, m))
        .collect::<Result<Vec<_>, _>>()?;
    let results = client.complete_batch(&requests, config.parallel);

    let mut findings = Vec::new();
    let mut reports = Vec::with_capacity(n);
    let mut transcripts = Vec::with_capacity(n);
    let mut first_error = None;
    for (i, (request, result)) in requests.into_iter().zip(results).enumerate() {
        transcripts.push(Transcript::new(request.clone(), &result));
        match result {
            Ok(response) => {
                let report = extract_findings(&response.text, i, ctx.trial_index, m);
                if report.extraction_failed {
                    warn!(tag = %request.request_tag, "auditor output held no findings structure");
                }
                debug!(tag = %request.request_tag, found = report.values.len(), repairs = ?report.repairs_applied);
                findings.extend(report.values.iter().cloned());
                reports.push(AuditorReport {
                    auditor_index: i,
                    request_tag: request.request_tag,
                    extraction: Some(report),
                    error: None,
                });
            }
            Err(e) => {
                warn!(tag = %request.request_tag, error = %e, "auditor failed");
                reports.push(AuditorReport {
                    auditor_index: i,
                    request_tag: request.request_tag,
                    extraction: None,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    if reports.iter().all(AuditorReport::failed) {
        if let Some(first) = first_error {
            return Err(PipelineError::AllAuditorsFailed {
                case_id: case.case_id.clone(),
                count: n,
                first,
            });
        }
    }
    if config.dedupe {
        findings = dedupe(findings);
    }
    Ok(GenerationResult {
        findings,
        per_auditor_reports: reports,
        raw_transcripts: transcripts,
    })
}

/// Keeps the first occurrence of each (function, vulnerability) pair.
pub fn dedupe(findings: Vec<Finding>) -> Vec<Finding> {
    let mut seen = HashSet::new();
    findings
        .into_iter()
        .filter(|f| {
            seen.insert((
                normalize(function_identifier(&f.function_name)),
                normalize(&f.vulnerability),
            ))
        })
        .collect()
}

/// Writes transcripts as one JSON object per line.
pub fn write_transcripts(path: &Path, transcripts: &[Transcript]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for t in transcripts {
        let line = serde_json::to_string(t).expect("transcript serializes");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}
