//! Shared domain vocabulary: contract cases, findings, critiques, run configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

/// Exact non-negative rational used for weights, composites and ratios.
pub type Rational = Ratio<u64>;

/// Highest score the critic may assign on any criterion.
pub const MAX_SCORE: u8 = 9;

/// Lowercase, drop punctuation and symbols, trim and collapse internal whitespace.
///
/// Used for every comparison between model-produced names and labels.
pub fn normalize(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Round to the nearest integer and clamp into `[0, MAX_SCORE]`. NaN maps to 0.
pub fn clamp_score(x: f64) -> u8 {
    if x.is_nan() {
        return 0;
    }
    x.round().clamp(0.0, MAX_SCORE as f64) as u8
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractCase {
    pub case_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<GroundTruthLabel>,
}

impl ContractCase {
    pub fn new(case_id: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            case_id: case_id.into(),
            source: source.into(),
            label: None,
        }
    }

    pub fn with_label(mut self, label: GroundTruthLabel) -> Self {
        self.label = Some(label);
        self
    }
}

/// The labelled vulnerability of a case: the affected function plus the
/// accepted names for the flaw, stored normalized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub function_name: String,
    pub vulnerability_aliases: BTreeSet<String>,
    #[serde(default)]
    pub description: String,
}

impl GroundTruthLabel {
    /// Builds a label, normalizing aliases. Fails when the function name is
    /// empty or no alias survives normalization.
    pub fn new<I, S>(
        function_name: impl Into<String>,
        aliases: I,
        description: impl Into<String>,
    ) -> Result<Self, String>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let function_name = function_name.into().trim().to_string();
        if function_name.is_empty() {
            return Err("label function_name must be non-empty".into());
        }
        let mut vulnerability_aliases = BTreeSet::new();
        for alias in aliases {
            let n = normalize(alias.as_ref());
            if n.is_empty() {
                return Err(format!("label alias {:?} is empty after normalization", alias.as_ref()));
            }
            vulnerability_aliases.insert(n);
        }
        if vulnerability_aliases.is_empty() {
            return Err("label needs at least one vulnerability alias".into());
        }
        Ok(Self {
            function_name,
            vulnerability_aliases,
            description: description.into(),
        })
    }
}

/// One candidate vulnerability produced by an auditor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub function_name: String,
    pub vulnerability: String,
    pub reasoning: String,
    pub auditor_index: usize,
    pub trial_index: u32,
}

/// The critic's verdict on one finding. Scores are always within `[0, 9]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Critique {
    pub criticism: String,
    pub correctness: u8,
    pub severity: u8,
    pub profitability: u8,
    /// Set when the critic produced no usable record for this slot.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub missing: bool,
}

impl Critique {
    pub fn new(criticism: impl Into<String>, correctness: u8, severity: u8, profitability: u8) -> Self {
        Self {
            criticism: criticism.into(),
            correctness: correctness.min(MAX_SCORE),
            severity: severity.min(MAX_SCORE),
            profitability: profitability.min(MAX_SCORE),
            missing: false,
        }
    }

    /// All-zero placeholder used when a slot could not be scored.
    pub fn sentinel(reason: impl Into<String>) -> Self {
        Self {
            criticism: reason.into(),
            correctness: 0,
            severity: 0,
            profitability: 0,
            missing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredFinding {
    pub finding: Finding,
    pub critique: Critique,
    #[serde(with = "rational_str")]
    pub composite: Rational,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

/// Relative weights of the three critic criteria in the composite score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreWeights {
    #[serde(with = "rational_str")]
    pub correctness: Rational,
    #[serde(with = "rational_str")]
    pub severity: Rational,
    #[serde(with = "rational_str")]
    pub profitability: Rational,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        let third = Rational::new(1, 3);
        Self {
            correctness: third,
            severity: third,
            profitability: third,
        }
    }
}

impl ScoreWeights {
    pub fn new(correctness: Rational, severity: Rational, profitability: Rational) -> Self {
        Self {
            correctness,
            severity,
            profitability,
        }
    }

    pub fn sum(&self) -> Rational {
        self.correctness + self.severity + self.profitability
    }
}

impl FromStr for ScoreWeights {
    type Err = String;

    /// Parses `c,s,p` where each part is an integer, a decimal or a fraction.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated weights, got {s:?}"));
        }
        let c = parse_rational(parts[0])?;
        let sv = parse_rational(parts[1])?;
        let p = parse_rational(parts[2])?;
        Ok(Self::new(c, sv, p))
    }
}

impl fmt::Display for ScoreWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.correctness, self.severity, self.profitability)
    }
}

/// Parses `"3"`, `"2/3"` or `"0.25"` into an exact non-negative rational.
pub fn parse_rational(s: &str) -> Result<Rational, String> {
    let s = s.trim();
    if let Some((n, d)) = s.split_once('/') {
        let n: u64 = n.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
        let d: u64 = d.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
        if d == 0 {
            return Err(format!("zero denominator in {s:?}"));
        }
        return Ok(Rational::new(n, d));
    }
    if let Some((int, frac)) = s.split_once('.') {
        if frac.len() > 9 || !frac.chars().all(|c| c.is_ascii_digit()) {
            return Err(format!("bad decimal {s:?}"));
        }
        let int: u64 = if int.is_empty() {
            0
        } else {
            int.parse().map_err(|_| format!("bad decimal {s:?}"))?
        };
        let scale = 10u64.pow(frac.len() as u32);
        let frac_val: u64 = if frac.is_empty() { 0 } else { frac.parse().unwrap_or(0) };
        let numer = int
            .checked_mul(scale)
            .and_then(|v| v.checked_add(frac_val))
            .ok_or_else(|| format!("decimal {s:?} out of range"))?;
        return Ok(Rational::new(numer, scale));
    }
    s.parse::<u64>()
        .map(Rational::from_integer)
        .map_err(|_| format!("expected a non-negative number, got {s:?}"))
}

/// Serializes a rational as `"p/q"` (or `"p"` when integral).
pub mod rational_str {
    use super::{parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(r)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }
}

/// [`rational_str`] for optional values.
pub mod rational_opt {
    use super::{parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Some(r) => s.collect_str(r),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| parse_rational(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

/// [`rational_str`] for string-keyed maps.
pub mod rational_map {
    use std::collections::BTreeMap;

    use super::{parse_rational, Rational};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, Rational>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(m.iter().map(|(k, v)| (k, v.to_string())))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Rational>, D::Error> {
        BTreeMap::<String, String>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| parse_rational(&v).map(|r| (k, r)).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Selection rule applied to the auditors' candidate pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// Single auditor, single finding, no ranking.
    #[serde(rename = "A")]
    Auditor,
    /// Uniform random pick from the pool.
    #[serde(rename = "A+R")]
    AuditorRandom,
    /// Critic scoring then top-1.
    #[serde(rename = "A+C")]
    AuditorCritic,
    /// Ground-truth oracle pick; an upper bound, not a detector.
    #[serde(rename = "A+O")]
    AuditorOracle,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Auditor,
        Strategy::AuditorRandom,
        Strategy::AuditorCritic,
        Strategy::AuditorOracle,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Strategy::Auditor => "A",
            Strategy::AuditorRandom => "A+R",
            Strategy::AuditorCritic => "A+C",
            Strategy::AuditorOracle => "A+O",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace(['_', ' '], "+").as_str() {
            "A" => Ok(Strategy::Auditor),
            "A+R" | "AR" => Ok(Strategy::AuditorRandom),
            "A+C" | "AC" => Ok(Strategy::AuditorCritic),
            "A+O" | "AO" => Ok(Strategy::AuditorOracle),
            other => Err(format!("unknown strategy {other:?} (expected A, A+R, A+C or A+O)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Http,
    Replay,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "http" => Ok(BackendKind::Http),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?} (expected http or replay)")),
        }
    }
}

/// Every pipeline hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub n_auditors: usize,
    pub m_max_vulns: usize,
    pub k_top: usize,
    pub auditor_temperature: f64,
    pub critic_temperature: f64,
    pub strategy: Strategy,
    pub trials: u32,
    pub seed: u64,
    pub critic_batch_size: usize,
    /// Optional cap on the estimated tokens of one critic batch.
    pub critic_token_budget: Option<usize>,
    pub score_weights: ScoreWeights,
    pub model_id: String,
    pub backend: BackendKind,
    pub max_output_tokens: Option<u32>,
    /// Fan out independent requests (auditors, cases) across threads.
    pub parallel: bool,
    /// Score critic batches concurrently; off keeps one critic context in sequence.
    pub concurrent_critic_batches: bool,
    /// Drop repeated (function, vulnerability) pairs from the candidate pool.
    pub dedupe: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_auditors: 2,
            m_max_vulns: 3,
            k_top: 1,
            auditor_temperature: 0.7,
            critic_temperature: 0.0,
            strategy: Strategy::AuditorCritic,
            trials: 3,
            seed: 0,
            critic_batch_size: 5,
            critic_token_budget: None,
            score_weights: ScoreWeights::default(),
            model_id: "gpt-4".to_string(),
            backend: BackendKind::Http,
            max_output_tokens: Some(2048),
            parallel: true,
            concurrent_critic_batches: false,
            dedupe: false,
        }
    }
}

/// Outcome of [`validate_config`]: empty when the configuration is usable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationResult {
    pub violations: Vec<String>,
}

impl ValidationResult {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            f.write_str("ok")
        } else {
            f.write_str(&self.violations.join("; "))
        }
    }
}

pub fn validate_config(config: &RunConfig) -> ValidationResult {
    let mut violations = Vec::new();
    let mut at_least_one = |value: usize, name: &str| {
        if value < 1 {
            violations.push(format!("{name} must be ≥ 1"));
        }
    };
    at_least_one(config.n_auditors, "n_auditors");
    at_least_one(config.m_max_vulns, "m_max_vulns");
    at_least_one(config.k_top, "k_top");
    at_least_one(config.trials as usize, "trials");
    at_least_one(config.critic_batch_size, "critic_batch_size");
    if let Some(budget) = config.critic_token_budget {
        at_least_one(budget, "critic_token_budget");
    }
    for (name, t) in [
        ("auditor_temperature", config.auditor_temperature),
        ("critic_temperature", config.critic_temperature),
    ] {
        if !(0.0..=2.0).contains(&t) {
            violations.push(format!("{name} must be within [0, 2], got {t}"));
        }
    }
    if config.score_weights.sum() == Rational::from_integer(0) {
        violations.push("weights must sum > 0".to_string());
    }
    if config.model_id.trim().is_empty() {
        violations.push("model_id must be non-empty".to_string());
    }
    ValidationResult { violations }
}
