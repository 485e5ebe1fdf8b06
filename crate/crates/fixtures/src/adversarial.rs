//! Adversarial model outputs for the extractors, and the mutations used to
//! fuzz them.

use std::fs;
use std::path::Path;

use lensaudit::extract::{extract_critiques, extract_findings, RepairTag};
use proptest::prelude::*;
use serde::Deserialize;

pub const ADVERSARIAL: &str = "extraction/adversarial.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractKind {
    Findings,
    Critiques,
}

#[derive(Debug, Clone, Deserialize)]
pub struct AdversarialCase {
    pub name: String,
    pub kind: ExtractKind,
    /// `m` for findings.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Slot count for critiques.
    #[serde(default)]
    pub expected: Option<usize>,
    pub values: usize,
    #[serde(default)]
    pub failed: bool,
    #[serde(default)]
    pub null: bool,
    #[serde(default)]
    pub clean: bool,
    #[serde(default)]
    pub repairs: Vec<RepairTag>,
    pub input: String,
}

#[derive(Deserialize)]
struct CaseFile {
    case: Vec<AdversarialCase>,
}

pub fn load_adversarial(dir: &Path) -> Result<Vec<AdversarialCase>, String> {
    let path = dir.join(ADVERSARIAL);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    toml::from_str::<CaseFile>(&text)
        .map(|f| f.case)
        .map_err(|e| format!("{}: {e}", path.display()))
}

/// Shape-only view of an extraction report, common to both extractors.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted {
    pub values: usize,
    pub failed: bool,
    pub null: bool,
    pub repairs: Vec<RepairTag>,
    pub scores: Vec<u8>,
}

pub fn extract(kind: ExtractKind, input: &str, limit: usize) -> Extracted {
    match kind {
        ExtractKind::Findings => {
            let r = extract_findings(input, 0, 1, limit);
            Extracted {
                values: r.values.len(),
                failed: r.extraction_failed,
                null: r.null_output,
                repairs: r.repairs_applied,
                scores: Vec::new(),
            }
        }
        ExtractKind::Critiques => {
            let r = extract_critiques(input, limit);
            Extracted {
                values: r.values.len(),
                failed: r.extraction_failed,
                null: r.null_output,
                repairs: r.repairs_applied,
                scores: r
                    .values
                    .iter()
                    .flat_map(|c| [c.correctness, c.severity, c.profitability])
                    .collect(),
            }
        }
    }
}

impl AdversarialCase {
    pub fn limit(&self) -> usize {
        match self.kind {
            ExtractKind::Findings => self.limit.unwrap_or(3),
            ExtractKind::Critiques => self.expected.unwrap_or(1),
        }
    }

    pub fn run(&self) -> Extracted {
        extract(self.kind, &self.input, self.limit())
    }

    /// Compares the extractor's report against the expectations in the file.
    pub fn check(&self) -> Result<Extracted, String> {
        let got = self.run();
        let mut problems = Vec::new();
        if got.values != self.values {
            problems.push(format!("{} values, expected {}", got.values, self.values));
        }
        if got.failed != self.failed {
            problems.push(format!("failed={}, expected {}", got.failed, self.failed));
        }
        if got.null != self.null {
            problems.push(format!("null={}, expected {}", got.null, self.null));
        }
        if self.clean && !got.repairs.is_empty() {
            problems.push(format!("clean input repaired: {:?}", got.repairs));
        }
        for tag in &self.repairs {
            if !got.repairs.contains(tag) {
                problems.push(format!("missing repair {}; got {:?}", tag.as_str(), got.repairs));
            }
        }
        if let Some(bad) = got.scores.iter().find(|s| **s > 9) {
            problems.push(format!("score {bad} out of range"));
        }
        if problems.is_empty() {
            Ok(got)
        } else {
            Err(format!("{}: {}", self.name, problems.join("; ")))
        }
    }
}

/// A single edit applied to a model output. Positions are taken modulo the
/// text length, on char boundaries.
#[derive(Debug, Clone)]
pub enum Mutation {
    Delete(usize),
    Insert(usize, char),
    Truncate(usize),
    Prefix(String),
    Suffix(String),
    Fence,
    Duplicate(usize, usize),
}

/// Characters that most often break JSON when inserted.
pub const NOISE: &[char] = &[
    ',', '{', '}', '[', ']', '"', ':', '\n', '\\', '`', '9', '.', '-', 'x', ' ',
];

fn boundary(text: &str, pos: usize) -> usize {
    if text.is_empty() {
        return 0;
    }
    let mut p = pos % (text.len() + 1);
    while !text.is_char_boundary(p) {
        p -= 1;
    }
    p
}

impl Mutation {
    pub fn apply(&self, text: &str) -> String {
        match self {
            Mutation::Delete(pos) => {
                let p = boundary(text, *pos);
                let mut s = text.to_string();
                if p < s.len() {
                    s.remove(p);
                }
                s
            }
            Mutation::Insert(pos, c) => {
                let mut s = text.to_string();
                s.insert(boundary(text, *pos), *c);
                s
            }
            Mutation::Truncate(pos) => text[..boundary(text, *pos)].to_string(),
            Mutation::Prefix(p) => format!("{p}\n{text}"),
            Mutation::Suffix(p) => format!("{text}\n{p}"),
            Mutation::Fence => format!("```json\n{text}\n```"),
            Mutation::Duplicate(a, b) => {
                let (a, b) = (boundary(text, *a), boundary(text, *b));
                let (lo, hi) = (a.min(b), a.max(b));
                format!("{}{}", text, &text[lo..hi])
            }
        }
    }
}

pub fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        any::<usize>().prop_map(Mutation::Delete),
        (any::<usize>(), proptest::sample::select(NOISE)).prop_map(|(p, c)| Mutation::Insert(p, c)),
        any::<usize>().prop_map(Mutation::Truncate),
        "[a-zA-Z .:]{0,40}".prop_map(Mutation::Prefix),
        "[a-zA-Z .:]{0,40}".prop_map(Mutation::Suffix),
        Just(Mutation::Fence),
        (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Mutation::Duplicate(a, b)),
    ]
}

/// A corpus case index and one to five edits to apply to its input.
pub fn mutated_input(cases: usize) -> impl Strategy<Value = (usize, Vec<Mutation>)> {
    (0..cases, prop::collection::vec(mutation(), 1..6))
}

/// Invariants every extraction must satisfy, whatever the input.
pub fn check_total(kind: ExtractKind, input: &str, limit: usize) -> Result<Extracted, String> {
    let got = extract(kind, input, limit);
    if let Some(bad) = got.scores.iter().find(|s| **s > 9) {
        return Err(format!("score {bad} out of range"));
    }
    match kind {
        ExtractKind::Findings if got.values > limit => {
            return Err(format!("{} findings exceed m={limit}", got.values));
        }
        ExtractKind::Critiques if got.values != limit && !(got.values == 0 && (got.failed || got.null)) => {
            return Err(format!("{} critiques for {limit} slots", got.values));
        }
        _ => {}
    }
    if got.failed && got.values > 0 {
        return Err("failed report carries values".into());
    }
    Ok(got)
}
