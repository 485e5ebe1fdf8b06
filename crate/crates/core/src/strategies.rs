//! Selection strategies over the auditors' candidate pool and the
//! multi-trial benchmark protocol.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{info, warn};

use crate::critique::{rank_top_k, run_discrimination};
use crate::error::PipelineError;
use crate::evaluate::finding_matches;
use crate::generate::{run_generation, TrialContext};
use crate::llm::{Backend, ChatRequest};
use crate::par;
use crate::prompts::{render_binary, render_multiclass};
use crate::types::{rational_opt, ContractCase, Critique, Finding, Rational, RunConfig, Strategy};

/// A strategy together with its auditor count `n` and per-auditor cap `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Competitor {
    pub strategy: Strategy,
    pub n: usize,
    pub m: usize,
}

impl Competitor {
    /// The single-auditor baseline always runs with `n = m = 1`.
    pub fn new(strategy: Strategy, n: usize, m: usize) -> Self {
        match strategy {
            Strategy::Auditor => Self { strategy, n: 1, m: 1 },
            _ => Self { strategy, n, m },
        }
    }

    /// `A(n1m1)`, `A+R(n1m3)`, `A+C(n1m3)`, `A+O(n1m3)`, `A+C(n2m3)`, `A+O(n2m3)`.
    pub fn table_six() -> Vec<Competitor> {
        vec![
            Competitor::new(Strategy::Auditor, 1, 1),
            Competitor::new(Strategy::AuditorRandom, 1, 3),
            Competitor::new(Strategy::AuditorCritic, 1, 3),
            Competitor::new(Strategy::AuditorOracle, 1, 3),
            Competitor::new(Strategy::AuditorCritic, 2, 3),
            Competitor::new(Strategy::AuditorOracle, 2, 3),
        ]
    }

    pub fn label(&self) -> String {
        format!("{}(n{}m{})", self.strategy.label(), self.n, self.m)
    }

    /// Column order used in reports: by `n`, then `m`, then strategy.
    pub fn sort_key(&self) -> (usize, usize, usize) {
        let rank = Strategy::ALL
            .iter()
            .position(|s| *s == self.strategy)
            .unwrap_or(usize::MAX);
        (self.n, self.m, rank)
    }

    /// Parses `A+C(n2m3)`; a bare strategy name takes `n`, `m` from the defaults.
    pub fn parse_with_defaults(s: &str, n: usize, m: usize) -> Result<Self, String> {
        let s = s.trim();
        let Some((name, params)) = s.split_once('(') else {
            return Ok(Self::new(s.parse()?, n, m));
        };
        let params = params
            .strip_suffix(')')
            .ok_or_else(|| format!("unbalanced parameters in {s:?}"))?;
        let (pn, pm) = params
            .strip_prefix('n')
            .and_then(|p| p.split_once('m'))
            .ok_or_else(|| format!("expected parameters like n2m3 in {s:?}"))?;
        let n = pn.parse().map_err(|_| format!("bad n in {s:?}"))?;
        let m = pm.parse().map_err(|_| format!("bad m in {s:?}"))?;
        if n == 0 || m == 0 {
            return Err(format!("n and m must be ≥ 1 in {s:?}"));
        }
        Ok(Self::new(name.parse()?, n, m))
    }
}

impl fmt::Display for Competitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Competitor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse_with_defaults(s, 1, 3)
    }
}

/// Result of one trial of one competitor on one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub case_id: String,
    pub strategy: Strategy,
    pub label: String,
    pub n: usize,
    pub m: usize,
    /// 1-based.
    pub trial_index: u32,
    pub seed: u64,
    pub selected: Option<Finding>,
    /// Present when a critic scored the selection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critique: Option<Critique>,
    #[serde(default, with = "rational_opt", skip_serializing_if = "Option::is_none")]
    pub composite: Option<Rational>,
    /// Oracle strategies only: whether the pick matched the label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_match: Option<bool>,
    pub candidate_pool_size: usize,
    pub candidates: Vec<Finding>,
    pub request_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialOutcome {
    fn empty(case: &ContractCase, competitor: &Competitor, trial_index: u32, seed: u64) -> Self {
        Self {
            case_id: case.case_id.clone(),
            strategy: competitor.strategy,
            label: competitor.label(),
            n: competitor.n,
            m: competitor.m,
            trial_index,
            seed,
            selected: None,
            critique: None,
            composite: None,
            oracle_match: None,
            candidate_pool_size: 0,
            candidates: Vec::new(),
            request_tags: Vec::new(),
            error: None,
        }
    }
}

/// Per-trial seed: SHA-256 over the run seed, case id, competitor label and
/// trial index, truncated to 64 bits.
pub fn derive_seed(seed: u64, case_id: &str, label: &str, trial_index: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for part in [case_id.as_bytes(), label.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(trial_index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Runs one trial of `competitor` on `case`.
pub fn run_strategy<R: Rng + ?Sized>(
    competitor: &Competitor,
    case: &ContractCase,
    config: &RunConfig,
    client: &dyn Backend,
    trial_index: u32,
    seed: u64,
    rng: &mut R,
) -> Result<TrialOutcome, PipelineError> {
    if competitor.strategy == Strategy::AuditorOracle && case.label.is_none() {
        return Err(PipelineError::MissingLabel {
            case_id: case.case_id.clone(),
        });
    }
    let cfg = RunConfig {
        n_auditors: competitor.n,
        m_max_vulns: competitor.m,
        k_top: 1,
        strategy: competitor.strategy,
        ..config.clone()
    };
    let ctx = TrialContext::new(competitor.label(), trial_index);
    let generation = run_generation(case, &cfg, client, &ctx)?;
    let mut out = TrialOutcome::empty(case, competitor, trial_index, seed);
    out.request_tags = generation
        .raw_transcripts
        .iter()
        .map(|t| t.request.request_tag.clone())
        .collect();
    out.candidate_pool_size = generation.findings.len();
    let pool = generation.findings;

    match competitor.strategy {
        Strategy::Auditor => out.selected = pool.first().cloned(),
        Strategy::AuditorRandom => {
            if !pool.is_empty() {
                out.selected = Some(pool[rng.random_range(0..pool.len())].clone());
            }
        }
        Strategy::AuditorCritic => {
            if !pool.is_empty() {
                let scored = run_discrimination(&pool, case, &cfg, client, &ctx)?;
                out.request_tags
                    .extend(scored.raw_transcripts.iter().map(|t| t.request.request_tag.clone()));
                if let Some(top) = rank_top_k(&scored.scored, 1).into_iter().next() {
                    out.selected = Some(top.finding);
                    out.critique = Some(top.critique);
                    out.composite = Some(top.composite);
                }
            }
        }
        Strategy::AuditorOracle => {
            let label = case.label.as_ref().expect("checked above");
            out.selected = oracle_select(&pool, label).cloned();
            out.oracle_match = out.selected.as_ref().map(|f| finding_matches(f, label));
        }
    }
    out.candidates = pool;
    Ok(out)
}

/// First candidate matching the label, else the first candidate.
pub fn oracle_select<'a>(pool: &'a [Finding], label: &crate::types::GroundTruthLabel) -> Option<&'a Finding> {
    pool.iter().find(|f| finding_matches(f, label)).or_else(|| pool.first())
}

/// Runs every competitor for `config.trials` trials on every case. Cases may
/// run concurrently; within a case everything is sequential. Output is
/// ordered by case, then competitor, then trial.
pub fn run_benchmark(
    cases: &[ContractCase],
    competitors: &[Competitor],
    config: &RunConfig,
    client: &dyn Backend,
) -> Vec<TrialOutcome> {
    let per_case = par::map_slice(cases, config.parallel, |case| {
        let mut outcomes = Vec::with_capacity(competitors.len() * config.trials as usize);
        for competitor in competitors {
            let label = competitor.label();
            for trial in 1..=config.trials {
                let seed = derive_seed(config.seed, &case.case_id, &label, trial);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let outcome =
                    run_strategy(competitor, case, config, client, trial, seed, &mut rng).unwrap_or_else(|e| {
                        warn!(case = %case.case_id, %label, trial, error = %e, "trial failed");
                        let mut o = TrialOutcome::empty(case, competitor, trial, seed);
                        o.error = Some(e.to_string());
                        o
                    });
                outcomes.push(outcome);
            }
        }
        info!(case = %case.case_id, trials = outcomes.len(), "case finished");
        outcomes
    });
    per_case.into_iter().flatten().collect()
}

/// One outcome per line, in order.
pub fn outcomes_to_jsonl(outcomes: &[TrialOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&serde_json::to_string(o).expect("outcome serializes"));
        s.push('\n');
    }
    s
}

pub fn write_outcomes(path: &Path, outcomes: &[TrialOutcome]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(outcomes_to_jsonl(outcomes).as_bytes())?;
    w.flush()
}

pub fn read_outcomes(path: &Path) -> Result<Vec<TrialOutcome>, String> {
    let file = File::open(path).map_err(|e| format!("cannot open {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

fn aux_request(case: &ContractCase, config: &RunConfig, role: &str, user_text: String) -> ChatRequest {
    ChatRequest {
        model_id: config.model_id.clone(),
        system_text: String::new(),
        user_text,
        temperature: config.auditor_temperature,
        max_output_tokens: config.max_output_tokens,
        request_tag: format!("{}/{role}", case.case_id),
    }
}

/// Close-ended binary question. `Ok(None)` when the reply is neither `YES`
/// nor `NO`.
pub fn run_binary(
    case: &ContractCase,
    vul_type: &str,
    config: &RunConfig,
    client: &dyn Backend,
) -> Result<Option<bool>, PipelineError> {
    let req = aux_request(case, config, "binary", render_binary(&case.source, vul_type)?);
    let resp = client.complete(&req)?;
    Ok(parse_yes_no(&resp.text))
}

pub fn parse_yes_no(text: &str) -> Option<bool> {
    match text.trim() {
        "YES" => Some(true),
        "NO" => Some(false),
        _ => None,
    }
}

/// Close-ended multi-class question. `Ok(None)` when the reply does not list
/// exactly the asked types with 0/1 indicators.
pub fn run_multiclass(
    case: &ContractCase,
    vul_types: &[String],
    config: &RunConfig,
    client: &dyn Backend,
) -> Result<Option<Vec<(String, bool)>>, PipelineError> {
    let req = aux_request(case, config, "multiclass", render_multiclass(&case.source, vul_types)?);
    let resp = client.complete(&req)?;
    Ok(parse_indicators(&resp.text, vul_types))
}

/// Parses `{name: 0, other: 1}` against the expected type names, in order.
pub fn parse_indicators(text: &str, vul_types: &[String]) -> Option<Vec<(String, bool)>> {
    let inner = text.trim().strip_prefix('{')?.strip_suffix('}')?;
    let mut got = Vec::new();
    for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part.rsplit_once(':')?;
        let name = name.trim().trim_matches('"').trim();
        let value = match value.trim() {
            "0" => false,
            "1" => true,
            _ => return None,
        };
        got.push((name.to_string(), value));
    }
    let names: Vec<&str> = got.iter().map(|(n, _)| n.as_str()).collect();
    let expected: Vec<&str> = vul_types.iter().map(|t| t.trim()).collect();
    (names == expected).then_some(got)
}
