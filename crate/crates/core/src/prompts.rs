//! Prompt rendering for the auditor, critic and the three classic paradigms.
//!
//! Template text lives in `prompts/v1/*.txt` and is compiled in.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use thiserror::Error;

use crate::types::Finding;

pub const PROMPT_VERSION: &str = "v1";

/// Shown in place of a snippet when the function cannot be found.
pub const UNRESOLVED_SNIPPET: &str = "(function not located in source)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TemplateId {
    Auditor,
    AuditorFormat,
    Critic,
    CriticFormat,
    Binary,
    Multiclass,
    OpenEnded,
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TemplateId::Auditor => "auditor",
            TemplateId::AuditorFormat => "auditor_format",
            TemplateId::Critic => "critic",
            TemplateId::CriticFormat => "critic_format",
            TemplateId::Binary => "binary",
            TemplateId::Multiclass => "multiclass",
            TemplateId::OpenEnded => "open_ended",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("contract source is empty")]
    EmptyContract,
    #[error("m must be ≥ 1, got {0}")]
    InvalidM(usize),
    #[error("no findings to critique")]
    EmptyFindings,
    #[error("{0} must be non-empty")]
    EmptyInput(&'static str),
    #[error("duplicate vulnerability type {0:?}")]
    DuplicateType(String),
    #[error("template {template} requires placeholder {{{name}}}")]
    MissingPlaceholder { template: TemplateId, name: String },
    #[error("placeholder {{{name}}} supplied more than once for template {template}")]
    DuplicatePlaceholder { template: TemplateId, name: String },
    #[error("template {template} has no placeholder {{{name}}}")]
    UnknownPlaceholder { template: TemplateId, name: String },
}

/// A template body and the placeholders it requires.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: &'static str,
    pub required_placeholders: BTreeSet<String>,
}

/// Byte spans of every `{ident}` occurrence in `body`.
fn placeholder_spans(body: &str) -> Vec<(usize, usize, &str)> {
    let bytes = body.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                spans.push((i, j + 1, &body[i + 1..j]));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    spans
}

impl PromptTemplate {
    pub fn new(template_id: TemplateId, body: &'static str) -> Self {
        let required_placeholders = placeholder_spans(body)
            .into_iter()
            .map(|(_, _, name)| name.to_string())
            .collect();
        Self {
            template_id,
            body,
            required_placeholders,
        }
    }

    pub fn builtin(id: TemplateId) -> Self {
        let body = match id {
            TemplateId::Auditor => include_str!("../prompts/v1/auditor.txt"),
            TemplateId::AuditorFormat => include_str!("../prompts/v1/auditor_format.txt"),
            TemplateId::Critic => include_str!("../prompts/v1/critic.txt"),
            TemplateId::CriticFormat => include_str!("../prompts/v1/critic_format.txt"),
            TemplateId::Binary => include_str!("../prompts/v1/binary.txt"),
            TemplateId::Multiclass => include_str!("../prompts/v1/multiclass.txt"),
            TemplateId::OpenEnded => include_str!("../prompts/v1/open_ended.txt"),
        };
        Self::new(id, body)
    }

    /// Single-pass substitution. Every required placeholder must be supplied
    /// exactly once and nothing else may be supplied.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut supplied: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, value) in values {
            if !self.required_placeholders.contains(*name) {
                return Err(PromptError::UnknownPlaceholder {
                    template: self.template_id,
                    name: name.to_string(),
                });
            }
            if supplied.insert(name, value).is_some() {
                return Err(PromptError::DuplicatePlaceholder {
                    template: self.template_id,
                    name: name.to_string(),
                });
            }
        }
        if let Some(missing) = self
            .required_placeholders
            .iter()
            .find(|n| !supplied.contains_key(n.as_str()))
        {
            return Err(PromptError::MissingPlaceholder {
                template: self.template_id,
                name: missing.clone(),
            });
        }
        let extra: usize = supplied.values().map(|v| v.len()).sum();
        let mut out = String::with_capacity(self.body.len() + extra);
        let mut last = 0;
        for (start, end, name) in placeholder_spans(self.body) {
            out.push_str(&self.body[last..start]);
            out.push_str(supplied[name]);
            last = end;
        }
        out.push_str(&self.body[last..]);
        Ok(out)
    }
}

fn require_contract(contract_source: &str) -> Result<(), PromptError> {
    if contract_source.trim().is_empty() {
        Err(PromptError::EmptyContract)
    } else {
        Ok(())
    }
}

pub fn render_auditor(contract_source: &str, m: usize) -> Result<String, PromptError> {
    require_contract(contract_source)?;
    if m < 1 {
        return Err(PromptError::InvalidM(m));
    }
    let format = PromptTemplate::builtin(TemplateId::AuditorFormat).render(&[])?;
    PromptTemplate::builtin(TemplateId::Auditor).render(&[
        ("m", &m.to_string()),
        ("contract", contract_source),
        ("json_format", &format),
    ])
}

/// Renders one critic request covering `findings` in order. Functions
/// missing from `function_snippets` are shown as [`UNRESOLVED_SNIPPET`].
pub fn render_critic(
    findings: &[Finding],
    function_snippets: &BTreeMap<String, String>,
) -> Result<String, PromptError> {
    if findings.is_empty() {
        return Err(PromptError::EmptyFindings);
    }
    let total = findings.len();
    let mut block = String::new();
    for (i, f) in findings.iter().enumerate() {
        if i > 0 {
            block.push_str("\n\n");
        }
        let snippet = function_snippets
            .get(&f.function_name)
            .map(String::as_str)
            .unwrap_or(UNRESOLVED_SNIPPET);
        block.push_str(&format!(
            "Vulnerability {} of {total}\nfunction_name: {}\nvulnerability: {}\nreasoning: {}\nfunction code:\n{}",
            i + 1,
            f.function_name,
            f.vulnerability,
            f.reasoning,
            snippet
        ));
    }
    let format = PromptTemplate::builtin(TemplateId::CriticFormat).render(&[("count", &total.to_string())])?;
    PromptTemplate::builtin(TemplateId::Critic).render(&[("findings", &block), ("json_format", &format)])
}

/// Looks up a snippet for every distinct function named by `findings`.
pub fn collect_snippets(source: &str, findings: &[Finding]) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for f in findings {
        if out.contains_key(&f.function_name) {
            continue;
        }
        if let Some(snippet) = function_snippet(source, &f.function_name) {
            out.insert(f.function_name.clone(), snippet.to_string());
        }
    }
    out
}

pub fn render_binary(contract_source: &str, vul_type: &str) -> Result<String, PromptError> {
    require_contract(contract_source)?;
    if vul_type.trim().is_empty() {
        return Err(PromptError::EmptyInput("vul_type"));
    }
    PromptTemplate::builtin(TemplateId::Binary).render(&[("vul_type", vul_type.trim()), ("contract", contract_source)])
}

pub fn render_multiclass(contract_source: &str, vul_types: &[String]) -> Result<String, PromptError> {
    require_contract(contract_source)?;
    if vul_types.is_empty() {
        return Err(PromptError::EmptyInput("vul_types"));
    }
    let mut seen = HashSet::new();
    for t in vul_types {
        if t.trim().is_empty() {
            return Err(PromptError::EmptyInput("vulnerability type"));
        }
        if !seen.insert(crate::types::normalize(t)) {
            return Err(PromptError::DuplicateType(t.clone()));
        }
    }
    let names: Vec<&str> = vul_types.iter().map(|t| t.trim()).collect();
    let list = format!("{{{}}}", names.join(", "));
    let example = format!(
        "{{{}}}",
        names.iter().map(|n| format!("{n}: 0")).collect::<Vec<_>>().join(", ")
    );
    PromptTemplate::builtin(TemplateId::Multiclass).render(&[
        ("n", &names.len().to_string()),
        ("vul_list", &list),
        ("indicator_example", &example),
        ("contract", contract_source),
    ])
}

pub fn render_open_ended(contract_source: &str) -> Result<String, PromptError> {
    require_contract(contract_source)?;
    PromptTemplate::builtin(TemplateId::OpenEnded).render(&[("contract", contract_source)])
}

fn is_ident_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$'
}

/// Reduces model spellings such as `approve()` or `function approve` to the
/// bare identifier.
pub fn function_identifier(name: &str) -> &str {
    let trimmed = name.trim();
    let trimmed = trimmed.strip_prefix("function ").unwrap_or(trimmed).trim_start();
    let end = trimmed.bytes().position(|b| !is_ident_byte(b)).unwrap_or(trimmed.len());
    &trimmed[..end]
}

/// Skips a comment or string literal starting at `i`, returning the index
/// just past it, or `None` when `i` starts neither.
fn skip_trivia(bytes: &[u8], i: usize) -> Option<usize> {
    match bytes[i] {
        b'/' if bytes.get(i + 1) == Some(&b'/') => {
            let end = bytes[i..]
                .iter()
                .position(|&b| b == b'\n')
                .map_or(bytes.len(), |p| i + p);
            Some(end)
        }
        b'/' if bytes.get(i + 1) == Some(&b'*') => {
            let end = bytes[i + 2..]
                .windows(2)
                .position(|w| w == b"*/")
                .map_or(bytes.len(), |p| i + 2 + p + 2);
            Some(end)
        }
        q @ (b'"' | b'\'') => {
            let mut j = i + 1;
            while j < bytes.len() {
                match bytes[j] {
                    b'\\' => j += 2,
                    b if b == q => return Some(j + 1),
                    b'\n' => return Some(j),
                    _ => j += 1,
                }
            }
            Some(bytes.len())
        }
        _ => None,
    }
}

/// Locates `function <name>` in Solidity-like source and returns its text up
/// to the matching closing brace (or `;` for bodiless declarations).
pub fn function_snippet<'a>(source: &'a str, name: &str) -> Option<&'a str> {
    let ident = function_identifier(name);
    if ident.is_empty() {
        return None;
    }
    let bytes = source.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if let Some(next) = skip_trivia(bytes, i) {
            i = next.max(i + 1);
            continue;
        }
        if bytes[i..].starts_with(b"function")
            && (i == 0 || !is_ident_byte(bytes[i - 1]))
            && bytes.get(i + 8).is_some_and(|b| b.is_ascii_whitespace())
        {
            let mut j = i + 8;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            let name_end = j + ident.len();
            if bytes[j..].starts_with(ident.as_bytes()) && bytes.get(name_end).is_none_or(|b| !is_ident_byte(*b)) {
                return Some(&source[i..body_end(bytes, name_end)]);
            }
            i = j;
            continue;
        }
        i += 1;
    }
    None
}

fn body_end(bytes: &[u8], from: usize) -> usize {
    let mut depth = 0usize;
    let mut i = from;
    while i < bytes.len() {
        if let Some(next) = skip_trivia(bytes, i) {
            i = next.max(i + 1);
            continue;
        }
        match bytes[i] {
            b';' if depth == 0 => return i + 1,
            b'{' => depth += 1,
            b'}' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return i + 1;
                }
            }
            _ => {}
        }
        i += 1;
    }
    bytes.len()
}
