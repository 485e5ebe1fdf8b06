use thiserror::Error;

use crate::llm::LlmError;
use crate::prompts::PromptError;

/// Failures that stop a pipeline stage outright. Partial failures (one
/// auditor, one critic batch) are recorded in the stage's report instead.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("all {count} auditors failed for case {case_id}: {first}")]
    AllAuditorsFailed {
        case_id: String,
        count: usize,
        first: LlmError,
    },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("no findings to score")]
    EmptyFindings,
    #[error("case {case_id} has no ground-truth label; the oracle strategy needs one")]
    MissingLabel { case_id: String },
    #[error("could not write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// The underlying LLM error when the stage failed because of the backend.
    pub fn llm_error(&self) -> Option<&LlmError> {
        match self {
            PipelineError::AllAuditorsFailed { first, .. } => Some(first),
            PipelineError::Llm(e) => Some(e),
            _ => None,
        }
    }
}
