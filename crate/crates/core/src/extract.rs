//! Tolerant parsing of auditor and critic output.
//!
//! Repairs run in a fixed order: trim, strip code fences, locate the
//! outermost balanced bracket span, parse (with lenient fixes on failure),
//! then coerce each record field by field. Everything that does not end up
//! in a parsed value is kept in `residue`.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::prompts::function_identifier;
use crate::types::{clamp_score, normalize, Critique, Finding, MAX_SCORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairTag {
    FenceStrip,
    BracketScan,
    TrailingTextDrop,
    TrailingComma,
    MissingComma,
    ControlCharEscape,
    ObjectSequence,
    AutoClose,
    RecordScan,
    Unwrap,
    RecordSkipped,
    Truncated,
    ScoreClamp,
    ScoreMissing,
}

impl RepairTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RepairTag::FenceStrip => "fence-strip",
            RepairTag::BracketScan => "bracket-scan",
            RepairTag::TrailingTextDrop => "trailing-text-drop",
            RepairTag::TrailingComma => "trailing-comma",
            RepairTag::MissingComma => "missing-comma",
            RepairTag::ControlCharEscape => "control-char-escape",
            RepairTag::ObjectSequence => "object-sequence",
            RepairTag::AutoClose => "auto-close",
            RepairTag::RecordScan => "record-scan",
            RepairTag::Unwrap => "unwrap",
            RepairTag::RecordSkipped => "record-skipped",
            RepairTag::Truncated => "truncated",
            RepairTag::ScoreClamp => "score-clamp",
            RepairTag::ScoreMissing => "score-missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionReport<T> {
    pub values: Vec<T>,
    /// Repairs in the order first applied, without duplicates.
    pub repairs_applied: Vec<RepairTag>,
    /// Input text that did not contribute to `values`.
    pub residue: String,
    /// No JSON-like structure was found and the output was not `null`.
    pub extraction_failed: bool,
    /// The model explicitly answered `null`.
    pub null_output: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl<T> ExtractionReport<T> {
    pub fn has_repair(&self, tag: RepairTag) -> bool {
        self.repairs_applied.contains(&tag)
    }
}

/// Intermediate result shared by both record kinds.
#[derive(Debug, Default)]
struct RawRecords {
    records: Vec<Map<String, Value>>,
    repairs: Vec<RepairTag>,
    residue: Vec<String>,
    failed: bool,
    null_output: bool,
}

impl RawRecords {
    fn tag(&mut self, tag: RepairTag) {
        if !self.repairs.contains(&tag) {
            self.repairs.push(tag);
        }
    }

    fn drop_text(&mut self, text: &str) {
        if !text.trim().is_empty() {
            self.residue.push(text.trim().to_string());
            self.tag(RepairTag::TrailingTextDrop);
        }
    }
}

fn is_null_literal(text: &str) -> bool {
    let t = text
        .trim()
        .trim_end_matches('.')
        .trim_matches(|c| c == '"' || c == '\'' || c == '`')
        .trim();
    t.eq_ignore_ascii_case("null")
}

/// Returns (inner, outside) for the first fenced block holding a bracket.
fn strip_fence(text: &str) -> Option<(&str, String)> {
    let mut search = 0;
    let mut first: Option<(usize, usize, usize)> = None;
    while let Some(rel) = text[search..].find("```") {
        let open = search + rel;
        let after_ticks = open + 3;
        let body_start = text[after_ticks..]
            .find('\n')
            .map_or(text.len(), |p| after_ticks + p + 1);
        let close = text[body_start..].find("```").map(|p| body_start + p);
        let body_end = close.unwrap_or(text.len());
        let resume = close.map_or(text.len(), |c| c + 3);
        let candidate = (open, body_start, body_end);
        if first.is_none() {
            first = Some(candidate);
        }
        if text[body_start..body_end].contains(['[', '{']) {
            first = Some(candidate);
            break;
        }
        if resume >= text.len() {
            break;
        }
        search = resume;
    }
    let (open, body_start, body_end) = first?;
    let close_end = if body_end < text.len() {
        (body_end + 3).min(text.len())
    } else {
        text.len()
    };
    let outside = format!("{}\n{}", &text[..open], &text[close_end..]);
    Some((&text[body_start..body_end], outside))
}

/// Scans from the opening bracket at `start` to its match. Returns the end
/// index (exclusive) and the closers still owed if the input ran out.
fn balanced_end(text: &str, start: usize) -> (usize, String) {
    let bytes = text.as_bytes();
    let mut stack: Vec<u8> = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let mut i = start;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
        } else {
            match b {
                b'"' => in_string = true,
                b'{' => stack.push(b'}'),
                b'[' => stack.push(b']'),
                b'}' | b']' => {
                    // A mismatched closer still pops; the parse step will complain.
                    stack.pop();
                    if stack.is_empty() {
                        return (i + 1, String::new());
                    }
                }
                _ => {}
            }
        }
        i += 1;
    }
    let mut owed = String::new();
    if in_string {
        if escaped {
            owed.push('\\');
        }
        owed.push('"');
    }
    while let Some(c) = stack.pop() {
        owed.push(c as char);
    }
    (bytes.len(), owed)
}

/// Applies string-aware textual fixes: trailing commas, missing commas
/// between adjacent values, raw control characters inside strings.
fn lenient_fix(text: &str, repairs: &mut Vec<RepairTag>) -> String {
    let mut tag = |t: RepairTag| {
        if !repairs.contains(&t) {
            repairs.push(t);
        }
    };
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 8);
    let mut in_string = false;
    let mut escaped = false;
    let next_significant = |from: usize| chars[from..].iter().copied().find(|c| !c.is_whitespace());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_string {
            if escaped {
                escaped = false;
                out.push(c);
            } else if c == '\\' {
                escaped = true;
                out.push(c);
            } else if c == '"' {
                in_string = false;
                out.push(c);
                // a string value followed directly by another key
                if matches!(next_significant(i + 1), Some('"')) && !string_is_key(&chars, i) {
                    out.push(',');
                    tag(RepairTag::MissingComma);
                }
            } else if c.is_control() {
                match c {
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    '\t' => out.push_str("\\t"),
                    other => out.push_str(&format!("\\u{:04x}", other as u32)),
                }
                tag(RepairTag::ControlCharEscape);
            } else {
                out.push(c);
            }
        } else {
            match c {
                '"' => {
                    in_string = true;
                    out.push(c);
                }
                ',' if matches!(next_significant(i + 1), Some('}') | Some(']') | None) => {
                    tag(RepairTag::TrailingComma);
                }
                '}' | ']' => {
                    out.push(c);
                    if matches!(next_significant(i + 1), Some('{') | Some('[') | Some('"')) {
                        out.push(',');
                        tag(RepairTag::MissingComma);
                    }
                }
                _ => out.push(c),
            }
        }
        i += 1;
    }
    out
}

/// True when the string closing at `close` is followed by a colon, i.e. it
/// is an object key. `close` indexes the closing quote.
fn string_is_key(chars: &[char], close: usize) -> bool {
    chars[close + 1..]
        .iter()
        .find(|c| !c.is_whitespace())
        .is_some_and(|c| *c == ':')
}

fn parse_lenient(span: &str, repairs: &mut Vec<RepairTag>) -> Option<Value> {
    if let Ok(v) = serde_json::from_str(span) {
        return Some(v);
    }
    let mut local = Vec::new();
    let fixed = lenient_fix(span, &mut local);
    let v = serde_json::from_str(&fixed).ok()?;
    for t in local {
        if !repairs.contains(&t) {
            repairs.push(t);
        }
    }
    Some(v)
}

const RECORD_KEYS: &[&str] = &[
    "functionname",
    "function",
    "vulnerability",
    "correctness",
    "severity",
    "profitability",
    "critic",
    "criticism",
];

fn key_norm(k: &str) -> String {
    k.chars()
        .filter(|c| !matches!(c, '_' | '-' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

fn looks_like_record(obj: &Map<String, Value>) -> bool {
    obj.keys().any(|k| RECORD_KEYS.contains(&key_norm(k).as_str()))
}

/// Scans for every balanced `{...}` anywhere in `text` that parses as a record.
fn record_scan(text: &str, repairs: &mut Vec<RepairTag>) -> Vec<Map<String, Value>> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(rel) = text[i..].find('{') {
        let start = i + rel;
        let (end, owed) = balanced_end(text, start);
        if owed.is_empty() {
            let mut scratch = Vec::new();
            if let Some(Value::Object(obj)) = parse_lenient(&text[start..end], &mut scratch) {
                if looks_like_record(&obj) {
                    out.push(obj);
                    for t in scratch {
                        if !repairs.contains(&t) {
                            repairs.push(t);
                        }
                    }
                    i = end;
                    continue;
                }
            }
        }
        i = start + 1;
    }
    out
}

fn value_to_records(value: Value, raw: &mut RawRecords) {
    match value {
        Value::Null => raw.null_output = true,
        Value::Array(items) => {
            for item in items {
                match item {
                    Value::Object(obj) => raw.records.push(obj),
                    Value::Null => {}
                    other => {
                        raw.residue.push(other.to_string());
                        raw.tag(RepairTag::RecordSkipped);
                    }
                }
            }
        }
        Value::Object(obj) => {
            if looks_like_record(&obj) {
                raw.records.push(obj);
                return;
            }
            // wrapper object such as {"vulnerabilities": [...]}
            let nested = obj.iter().find_map(|(_, v)| match v {
                Value::Array(items) if items.iter().any(Value::is_object) => Some(v.clone()),
                Value::Object(inner) if looks_like_record(inner) => Some(v.clone()),
                _ => None,
            });
            match nested {
                Some(v) => {
                    raw.tag(RepairTag::Unwrap);
                    value_to_records(v, raw);
                }
                None if obj.is_empty() => {}
                None => {
                    raw.residue.push(Value::Object(obj).to_string());
                    raw.tag(RepairTag::RecordSkipped);
                }
            }
        }
        other => {
            raw.residue.push(other.to_string());
            raw.failed = true;
        }
    }
}

/// Runs the shared repair pipeline and returns loosely-typed records.
fn parse_records(raw_text: &str) -> RawRecords {
    let mut raw = RawRecords::default();
    let text = raw_text.trim().trim_start_matches('\u{feff}').trim();
    if is_null_literal(text) {
        raw.null_output = true;
        return raw;
    }

    let mut body: &str = text;
    if let Some((inner, outside)) = strip_fence(text) {
        raw.tag(RepairTag::FenceStrip);
        raw.drop_text(&outside);
        body = inner.trim();
        if is_null_literal(body) {
            raw.null_output = true;
            return raw;
        }
    }

    let Some(start) = body.find(['[', '{']) else {
        if body.is_empty() && !raw.residue.is_empty() {
            // fence held nothing but text around it may be `null`
            if raw.residue.iter().all(|r| is_null_literal(r)) {
                raw.residue.clear();
                raw.repairs.retain(|t| *t != RepairTag::TrailingTextDrop);
                raw.null_output = true;
                return raw;
            }
        }
        raw.failed = true;
        raw.residue = vec![raw_text.to_string()];
        return raw;
    };
    if start > 0 {
        raw.tag(RepairTag::BracketScan);
        raw.drop_text(&body[..start]);
    }

    let (mut end, mut owed) = balanced_end(body, start);
    let mut span = body[start..end].to_string();

    // {..} {..}, {..}: a bare sequence of objects
    if body.as_bytes()[start] == b'{' && owed.is_empty() {
        let mut objects = vec![span.clone()];
        let mut cursor = end;
        loop {
            let rest = &body[cursor..];
            let skipped = rest.len() - rest.trim_start_matches(|c: char| c.is_whitespace() || c == ',').len();
            let next = cursor + skipped;
            if body.as_bytes().get(next) != Some(&b'{') {
                break;
            }
            let (e, o) = balanced_end(body, next);
            objects.push(body[next..e].to_string());
            cursor = e;
            end = e;
            if !o.is_empty() {
                owed = o;
                break;
            }
        }
        if objects.len() > 1 {
            raw.tag(RepairTag::ObjectSequence);
            span = format!("[{}{}]", objects.join(","), owed);
            owed.clear();
        }
    }
    if !owed.is_empty() {
        raw.tag(RepairTag::AutoClose);
        span.push_str(&owed);
    }
    raw.drop_text(&body[end..]);

    match parse_lenient(&span, &mut raw.repairs) {
        Some(v) => value_to_records(v, &mut raw),
        None => {
            let found = record_scan(body, &mut raw.repairs);
            if found.is_empty() {
                raw.failed = true;
                raw.residue = vec![raw_text.to_string()];
                raw.records.clear();
            } else {
                raw.tag(RepairTag::RecordScan);
                raw.records = found;
                raw.residue.push(body[start..end].to_string());
            }
        }
    }
    raw
}

fn field<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names
        .iter()
        .find_map(|want| obj.iter().find(|(k, _)| key_norm(k) == *want).map(|(_, v)| v))
}

fn text_field(obj: &Map<String, Value>, names: &[&str]) -> Option<String> {
    match field(obj, names)? {
        Value::String(s) => Some(s.trim().to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
    .filter(|s| !s.is_empty())
}

const FUNCTION_KEYS: &[&str] = &["functionname", "function", "func", "method"];
const VULNERABILITY_KEYS: &[&str] = &[
    "vulnerability",
    "vulnerabilityname",
    "vulnerabilitytype",
    "vuln",
    "name",
    "title",
    "type",
    "issue",
];
const REASONING_KEYS: &[&str] = &[
    "reasoning",
    "auditor",
    "reason",
    "explanation",
    "description",
    "details",
    "rationale",
];
const CRITICISM_KEYS: &[&str] = &["critic", "criticism", "critique", "comment", "explanation", "reasoning"];

/// Parses auditor output into at most `m` findings.
pub fn extract_findings(raw: &str, auditor_index: usize, trial_index: u32, m: usize) -> ExtractionReport<Finding> {
    let mut parsed = parse_records(raw);
    let mut values = Vec::new();
    for record in std::mem::take(&mut parsed.records) {
        let function_name = text_field(&record, FUNCTION_KEYS);
        let vulnerability = text_field(&record, VULNERABILITY_KEYS);
        match (function_name, vulnerability) {
            (Some(function_name), Some(vulnerability)) => {
                if values.len() >= m {
                    parsed.residue.push(Value::Object(record).to_string());
                    parsed.tag(RepairTag::Truncated);
                    continue;
                }
                values.push(Finding {
                    function_name,
                    vulnerability,
                    reasoning: text_field(&record, REASONING_KEYS).unwrap_or_default(),
                    auditor_index,
                    trial_index,
                });
            }
            _ => {
                parsed.residue.push(Value::Object(record).to_string());
                parsed.tag(RepairTag::RecordSkipped);
            }
        }
    }
    ExtractionReport {
        values,
        repairs_applied: parsed.repairs,
        residue: parsed.residue.join("\n"),
        extraction_failed: parsed.failed,
        null_output: parsed.null_output,
        warnings: Vec::new(),
    }
}

/// Returns the clamped score and whether it needed coercion, or `None` when
/// the field is absent or not numeric.
fn coerce_score(value: Option<&Value>) -> Option<(u8, bool)> {
    match value? {
        Value::Number(n) => match n.as_u64() {
            Some(v) if v <= MAX_SCORE as u64 => Some((v as u8, false)),
            _ => n.as_f64().map(|f| (clamp_score(f), true)),
        },
        Value::String(s) => {
            let s = s.trim();
            let numeric: String = s
                .chars()
                .take_while(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+'))
                .collect();
            numeric.parse::<f64>().ok().map(|f| (clamp_score(f), true))
        }
        _ => None,
    }
}

/// Parses critic output positionally into exactly `expected_count` slots.
/// Slots without a record are filled with [`Critique::sentinel`].
pub fn extract_critiques(raw: &str, expected_count: usize) -> ExtractionReport<Critique> {
    extract_critiques_inner(raw, expected_count, None)
}

/// As [`extract_critiques`], additionally warning when a record's
/// `function_name` disagrees with the finding in the same slot.
pub fn extract_critiques_for(raw: &str, findings: &[Finding]) -> ExtractionReport<Critique> {
    extract_critiques_inner(raw, findings.len(), Some(findings))
}

fn extract_critiques_inner(
    raw: &str,
    expected_count: usize,
    findings: Option<&[Finding]>,
) -> ExtractionReport<Critique> {
    let mut parsed = parse_records(raw);
    let records = std::mem::take(&mut parsed.records);
    let mut warnings = Vec::new();
    if parsed.failed {
        return ExtractionReport {
            values: Vec::new(),
            repairs_applied: parsed.repairs,
            residue: parsed.residue.join("\n"),
            extraction_failed: true,
            null_output: false,
            warnings,
        };
    }

    let mut values = Vec::with_capacity(expected_count);
    let mut records = records.into_iter();
    for slot in 0..expected_count {
        let Some(record) = records.next() else {
            parsed.tag(RepairTag::ScoreMissing);
            values.push(Critique::sentinel("no critique returned for this finding"));
            continue;
        };
        if let (Some(findings), Some(name)) = (findings, text_field(&record, FUNCTION_KEYS)) {
            let expected = &findings[slot].function_name;
            if normalize(function_identifier(&name)) != normalize(function_identifier(expected)) {
                warnings.push(format!(
                    "slot {slot}: critic named function {name:?}, expected {expected:?}"
                ));
            }
        }
        let mut scores = [0u8; 3];
        let mut missing = 0;
        for (i, key) in ["correctness", "severity", "profitability"].iter().enumerate() {
            match coerce_score(field(&record, &[key])) {
                Some((v, coerced)) => {
                    scores[i] = v;
                    if coerced {
                        parsed.tag(RepairTag::ScoreClamp);
                    }
                }
                None => {
                    missing += 1;
                    parsed.tag(RepairTag::ScoreMissing);
                }
            }
        }
        let criticism = text_field(&record, CRITICISM_KEYS).unwrap_or_default();
        let critique = if missing == 3 {
            Critique::sentinel(criticism)
        } else {
            Critique::new(criticism, scores[0], scores[1], scores[2])
        };
        values.push(critique);
    }
    let extra: Vec<String> = records.map(|r| Value::Object(r).to_string()).collect();
    if !extra.is_empty() {
        parsed.tag(RepairTag::Truncated);
        parsed.residue.extend(extra);
    }
    ExtractionReport {
        values,
        repairs_applied: parsed.repairs,
        residue: parsed.residue.join("\n"),
        extraction_failed: false,
        null_output: parsed.null_output,
        warnings,
    }
}

/// Canonical JSON array for a list of findings; extracting it again yields
/// the same findings with no repairs.
pub fn findings_to_json(findings: &[Finding]) -> String {
    serde_json::to_string_pretty(findings).expect("findings serialize")
}
