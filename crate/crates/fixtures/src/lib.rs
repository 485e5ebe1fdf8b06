//! Scripted model responses that reproduce a fixed hit table, and builders
//! that record them into replay stores.
//!
//! The [`ScriptedBackend`] answers from the request tag alone: for a trial
//! `t` of competitor `s` on case `c` it produces a hit whenever
//! `t <= hits[s][c]`. Running the benchmark through a recorder turns those
//! answers into a fingerprint-keyed replay corpus.

pub mod adversarial;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lensaudit::critique::{rank_top_k, run_discrimination};
use lensaudit::evaluate::aggregate;
use lensaudit::generate::{run_generation, TrialContext};
use lensaudit::ingest::load_dataset;
use lensaudit::llm::{Backend, ChatRequest, ChatResponse, FnBackend, LlmError, RecordingBackend, ReplayStore};
use lensaudit::strategies::{derive_seed, run_benchmark, Competitor};
use lensaudit::{ContractCase, RunConfig, Strategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

pub const MANIFEST: &str = "manifest.toml";
pub const TABLE: &str = "hit_table.json";
pub const CORPUS: &str = "replay/corpus.json";
pub const CASE_STUDY: &str = "replay/case-study.json";
pub const CASE_STUDY_ID: &str = "2018-19830";

/// Repository `fixtures/` directory.
pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

#[derive(Debug, Clone, Deserialize)]
pub struct PrintedSummary {
    pub cve_hits: Vec<u32>,
    pub cve_ratio_percent: Vec<f64>,
    pub trial_hits: Vec<u32>,
    pub trial_ratio_percent: Vec<f64>,
}

/// Per-cell hit counts plus the summary rows as printed alongside them.
#[derive(Debug, Clone, Deserialize)]
pub struct HitTable {
    pub trials: u32,
    pub cases: Vec<String>,
    pub strategies: Vec<String>,
    pub hits: BTreeMap<String, Vec<u32>>,
    pub printed: PrintedSummary,
}

impl HitTable {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn cell(&self, case_id: &str, strategy: &str) -> u32 {
        let Some(i) = self.cases.iter().position(|c| c == case_id) else {
            return 0;
        };
        self.hits.get(strategy).and_then(|col| col.get(i)).copied().unwrap_or(0)
    }

    /// Columns in `strategies` order.
    pub fn columns(&self) -> Vec<Vec<u32>> {
        self.strategies.iter().map(|s| self.hits[s].clone()).collect()
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    function_name: &'static str,
    vulnerability: &'static str,
    reasoning: &'static str,
}

const fn cand(function_name: &'static str, vulnerability: &'static str, reasoning: &'static str) -> Candidate {
    Candidate {
        function_name,
        vulnerability,
        reasoning,
    }
}

/// The correct finding for a case and four plausible wrong ones.
#[derive(Debug, Clone)]
struct Scenario {
    genuine: Candidate,
    decoys: [Candidate; 4],
}

fn scenario(case_id: &str) -> Option<Scenario> {
    let s = match case_id {
        "2018-10299" => Scenario {
            genuine: cand("batchTransfer", "Integer Overflow", "cnt * _value is unchecked; a large _value wraps amount to a small number so the balance check passes."),
            decoys: [
                cand("transfer", "Reentrancy", "State is updated after an external interaction."),
                cand("approve", "Race Condition", "Changing an allowance from one non-zero value to another can be front-run."),
                cand("pause", "Denial of Service", "The owner can pause all transfers indefinitely."),
                cand("transfer", "Missing Return Value Check", "Callers may ignore the boolean result."),
            ],
        },
        "2018-10666" => Scenario {
            genuine: cand("setOwner", "Lack of Access Control", "setOwner has no onlyOwner modifier, so any account can become the owner."),
            decoys: [
                cand("uploadBalances", "Arbitrary Balance Manipulation", "The owner can assign any balance to any address."),
                cand("transfer", "Integer Underflow", "Balances are subtracted without SafeMath."),
                cand("lockBalances", "Centralization Risk", "A single owner controls the lock."),
                cand("uploadBalances", "Unbounded Loop", "A long address list can exhaust gas."),
            ],
        },
        "2018-11335" => Scenario {
            genuine: cand("transferMulti", "Integer Overflow", "The sum of _value entries can wrap, so a tiny total passes the balance check while recipients receive huge amounts."),
            decoys: [
                cand("mint", "Unlimited Minting", "The owner can mint without a cap."),
                cand("transfer", "Missing Zero Address Check", "Tokens can be burned by sending to address zero."),
                cand("approve", "Incorrect Implementation", "approve never stores the allowance."),
                cand("transferMulti", "Unbounded Loop", "A long recipient list can run out of gas."),
            ],
        },
        "2018-11411" => Scenario {
            genuine: cand("transferFrom", "Condition Logic Error", "The checks pass and the recipient is credited, but the sender balance and allowance are never reduced."),
            decoys: [
                cand("approve", "Race Condition", "Allowance changes can be front-run."),
                cand("distribute", "Integer Underflow", "The owner balance can underflow when distributing."),
                cand("transfer", "Short Address Attack", "Payload length is not validated."),
                cand("distribute", "Gas Limit", "A long address array may not fit in a block."),
            ],
        },
        "2018-12025" => Scenario {
            genuine: cand("transferFrom", "Incorrect Comparison", "The allowance comparison is inverted, so spending beyond the approved allowance is accepted."),
            decoys: [
                cand("approve", "Race Condition", "Allowance changes can be front-run."),
                cand("freeze", "Centralization Risk", "The owner can freeze every transfer."),
                cand("transfer", "Integer Overflow", "The recipient balance may overflow."),
                cand("freeze", "Irreversible State", "There is no way to unfreeze."),
            ],
        },
        "2018-13836" => Scenario {
            genuine: cand("multiTransfer", "Integer Overflow", "totalValue accumulates user-supplied values without overflow checks and can wrap past the balance check."),
            decoys: [
                cand("withdraw", "Unchecked Send", "The transfer result is not handled."),
                cand("transfer", "Integer Overflow", "The recipient balance may overflow."),
                cand("multiTransfer", "Array Length Mismatch", "_to and _value lengths are not compared."),
                cand("withdraw", "Centralization Risk", "The owner can drain collected ether."),
            ],
        },
        "2018-15552" => Scenario {
            genuine: cand("PayWinner", "Bad Randomness", "The winner index comes from the previous block hash and timestamp, which can be predicted or influenced."),
            decoys: [
                cand("refundAll", "Denial of Service", "A reverting player blocks every refund."),
                cand("buyTicket", "Reentrancy", "Payouts happen inside the purchase call."),
                cand("changeOwner", "Missing Event", "Ownership changes are not logged."),
                cand("refundAll", "Unbounded Loop", "Many players can exhaust gas."),
            ],
        },
        "2018-17882" => Scenario {
            genuine: cand("batchTransferToken", "Integer Overflow", "_to.length * _value can wrap so the balance check passes for an enormous transfer."),
            decoys: [
                cand("burn", "Integer Underflow", "Burning more than the owner holds wraps the balance."),
                cand("setOwner", "Missing Zero Address Check", "Ownership can be renounced by mistake."),
                cand("transfer", "Missing Event", "Transfers emit no event."),
                cand("batchTransferToken", "Unbounded Loop", "A long recipient list can exhaust gas."),
            ],
        },
        "2018-19830" => Scenario {
            genuine: cand("UBSexToken", "Unexpected Behaviour", "The function is meant to be the constructor but its name differs from the contract name, so anyone can call it and reset supply and owner."),
            decoys: [
                cand("approve", "Race Condition", "Allowance changes can be front-run by the spender."),
                cand("transferFrom", "Race Condition", "The allowance is read before the transfer executes."),
                cand("transfer", "Integer Overflow", "The recipient balance may overflow."),
                cand("balanceOf", "Information Exposure", "Balances are publicly readable."),
            ],
        },
        "2019-15078" => Scenario {
            genuine: cand("XBornID", "Constructor Typo", "The intended constructor has a different name from the contract and remains callable."),
            decoys: [
                cand("airdrop", "Unbounded Loop", "A long recipient list can exhaust gas."),
                cand("kill", "Unprotected Selfdestruct", "The owner can destroy the contract."),
                cand("transfer", "Missing Return Value", "transfer does not return a boolean."),
                cand("airdrop", "Incorrect Sender", "airdrop transfers from the owner balance via msg.sender."),
            ],
        },
        "2019-15079" => Scenario {
            genuine: cand("EAI_TokenERC20", "Incorrect Constructor Name", "The intended constructor does not match the contract name and anyone can call it."),
            decoys: [
                cand("burn", "Integer Underflow", "totalSupply may underflow."),
                cand("_transfer", "Missing Overflow Check", "The recipient balance is not checked for overflow."),
                cand("transfer", "Missing Return Value", "transfer does not return a boolean."),
                cand("burn", "Missing Event", "Burns emit no event."),
            ],
        },
        "2019-15080" => Scenario {
            genuine: cand("owned", "Constructor Typo", "owned differs in case from the contract name, so it is an ordinary public function that sets the owner."),
            decoys: [
                cand("mintToken", "Unlimited Minting", "The owner can mint without a cap."),
                cand("transferOwnership", "Missing Zero Address Check", "Ownership can be transferred to address zero."),
                cand("transfer", "Integer Overflow", "The recipient balance may overflow."),
                cand("mintToken", "Centralization Risk", "Supply depends on one key."),
            ],
        },
        "2018-18425" => Scenario {
            genuine: cand("doAirdrop", "Unlimited Issuance", "Every paid claim mints a fresh airdrop amount, so supply grows without bound."),
            decoys: [
                cand("getTokens", "Missing Access Control", "Anyone can call getTokens."),
                cand("finishDistribution", "Centralization Risk", "The owner decides when distribution ends."),
                cand("transfer", "Integer Overflow", "The recipient balance may overflow."),
                cand("getTokens", "Locked Ether", "Ether sent with claims cannot be withdrawn."),
            ],
        },
        _ => return None,
    };
    Some(s)
}

struct Tag<'a> {
    case_id: &'a str,
    label: &'a str,
    trial: u32,
    role: &'a str,
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    let mut parts = tag.splitn(4, '/');
    let case_id = parts.next()?;
    let label = parts.next()?;
    let trial = parts.next()?.strip_prefix('t')?.parse().ok()?;
    let role = parts.next()?;
    Some(Tag {
        case_id,
        label,
        trial,
        role,
    })
}

/// Deterministic stand-in for a model, driven entirely by request tags.
pub struct ScriptedBackend {
    table: HitTable,
    seed: u64,
}

impl ScriptedBackend {
    /// `seed` must match the benchmark seed so random picks can be steered.
    pub fn new(table: HitTable, seed: u64) -> Self {
        Self { table, seed }
    }

    fn case_index(&self, case_id: &str) -> usize {
        self.table.cases.iter().position(|c| c == case_id).unwrap_or(0)
    }

    fn auditor_pool(&self, tag: &Tag<'_>, competitor: &Competitor, auditor: usize) -> Option<Vec<Candidate>> {
        let sc = scenario(tag.case_id)?;
        let ci = self.case_index(tag.case_id);
        let t = tag.trial as usize;
        let hit = tag.trial <= self.table.cell(tag.case_id, tag.label);
        let decoys = |count: usize, offset: usize| -> Vec<Candidate> {
            (0..count)
                .map(|j| sc.decoys[(offset + j) % sc.decoys.len()].clone())
                .collect()
        };
        let with_genuine = |mut pool: Vec<Candidate>, pos: usize| {
            let slot = pos % pool.len();
            pool[slot] = sc.genuine.clone();
            pool
        };
        let m = competitor.m;
        let misranked = (ci + t).is_multiple_of(3);
        let pool = match competitor.strategy {
            Strategy::Auditor => {
                if hit {
                    vec![sc.genuine.clone()]
                } else if (ci + t).is_multiple_of(3) {
                    return None;
                } else {
                    decoys(1, t)
                }
            }
            Strategy::AuditorRandom => {
                if hit {
                    let seed = derive_seed(self.seed, tag.case_id, tag.label, tag.trial);
                    let pick = ChaCha8Rng::seed_from_u64(seed).random_range(0..m);
                    with_genuine(decoys(m, t), pick)
                } else {
                    decoys(m, t)
                }
            }
            Strategy::AuditorCritic | Strategy::AuditorOracle => {
                let carrier = t % competitor.n;
                let present = hit || (competitor.strategy == Strategy::AuditorCritic && misranked);
                let pool = decoys(m, t + auditor);
                if present && auditor == carrier {
                    with_genuine(pool, ci + t)
                } else {
                    pool
                }
            }
        };
        Some(pool)
    }

    fn auditor_reply(&self, tag: &Tag<'_>, auditor: usize) -> String {
        let Ok(competitor) = tag.label.parse::<Competitor>() else {
            return "null".into();
        };
        let Some(pool) = self.auditor_pool(tag, &competitor, auditor) else {
            return "null".into();
        };
        let style = (self.case_index(tag.case_id) + tag.trial as usize + auditor) % 4;
        let reasoning_key = if style == 2 { "auditor" } else { "reasoning" };
        let records: Vec<_> = pool
            .iter()
            .map(|c| {
                let mut obj = serde_json::Map::new();
                obj.insert("function_name".into(), json!(c.function_name));
                obj.insert("vulnerability".into(), json!(c.vulnerability));
                obj.insert(reasoning_key.into(), json!(c.reasoning));
                serde_json::Value::Object(obj)
            })
            .collect();
        let body = serde_json::to_string_pretty(&records).expect("records serialize");
        match style {
            1 => format!("Here are the vulnerabilities I identified:\n```json\n{body}\n```"),
            3 => format!("{body}\nThese are the most likely issues in the contract."),
            _ => body,
        }
    }

    fn critic_reply(&self, tag: &Tag<'_>, prompt: &str) -> String {
        let sc = scenario(tag.case_id);
        let hit = tag.trial <= self.table.cell(tag.case_id, tag.label);
        let mut records = Vec::new();
        let mut lines = prompt.lines().peekable();
        let mut j = 0;
        while let Some(line) = lines.next() {
            let Some(function_name) = line.strip_prefix("function_name: ") else {
                continue;
            };
            let vulnerability = lines
                .peek()
                .and_then(|l| l.strip_prefix("vulnerability: "))
                .unwrap_or_default();
            let genuine = sc
                .as_ref()
                .is_some_and(|s| s.genuine.function_name == function_name && s.genuine.vulnerability == vulnerability);
            let (criticism, scores) = if genuine && hit {
                (
                    "The reasoning is sound and the issue is directly exploitable.",
                    (9, 8, 8),
                )
            } else if genuine {
                ("The described path looks guarded; the claim is doubtful.", (1, 1, 0))
            } else {
                (
                    "Plausible but minor; exploitation gains little.",
                    (3 + j % 3, 2, 2 + j % 2),
                )
            };
            records.push(json!({
                "function_name": function_name,
                "vulnerability": vulnerability,
                "critic": criticism,
                "correctness": scores.0,
                "severity": scores.1,
                "profitability": scores.2,
            }));
            j += 1;
        }
        let body = serde_json::to_string_pretty(&records).expect("records serialize");
        if tag.trial.is_multiple_of(2) {
            format!("```json\n{body}\n```")
        } else {
            body
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let tag = parse_tag(&request.request_tag).ok_or_else(|| LlmError::InvalidRequest {
            tag: request.request_tag.clone(),
            message: "scripted backend needs case/label/tN/role tags".into(),
        })?;
        let text = if let Some(i) = tag.role.strip_prefix("auditor") {
            self.auditor_reply(&tag, i.parse().unwrap_or(0))
        } else if tag.role.starts_with("critic") {
            self.critic_reply(&tag, &request.user_text)
        } else {
            return Err(LlmError::InvalidRequest {
                tag: request.request_tag.clone(),
                message: format!("unknown role {:?}", tag.role),
            });
        };
        Ok(ChatResponse::complete(text))
    }
}

/// Configuration the corpus is recorded under.
pub fn corpus_config() -> RunConfig {
    RunConfig {
        backend: lensaudit::BackendKind::Replay,
        ..RunConfig::default()
    }
}

/// Runs the six-competitor benchmark against the scripted backend, checks
/// that the resulting hit table equals the scripted one, and returns the
/// recorded store.
pub fn build_corpus(dir: &Path) -> Result<ReplayStore, String> {
    let cases = load_dataset(dir.join(MANIFEST)).map_err(|e| e.to_string())?;
    let table = HitTable::load(&dir.join(TABLE))?;
    let config = corpus_config();
    let recorder = RecordingBackend::new(ScriptedBackend::new(table.clone(), config.seed));
    let outcomes = run_benchmark(&cases, &Competitor::table_six(), &config, &recorder);
    if let Some(failed) = outcomes.iter().find(|o| o.error.is_some()) {
        return Err(format!("scripted trial failed: {failed:?}"));
    }
    let report = aggregate(&outcomes, &cases, None).map_err(|e| e.to_string())?;
    for s in &table.strategies {
        for c in &table.cases {
            if report.cell(c, s) != table.cell(c, s) {
                return Err(format!(
                    "scripted corpus gives {} hits for {c} / {s}, table says {}",
                    report.cell(c, s),
                    table.cell(c, s)
                ));
            }
        }
    }
    Ok(recorder.into_store())
}

/// Configuration of the single-auditor case-study audit.
pub fn case_study_config() -> RunConfig {
    RunConfig {
        n_auditors: 1,
        m_max_vulns: 3,
        k_top: 1,
        backend: lensaudit::BackendKind::Replay,
        ..RunConfig::default()
    }
}

pub fn case_study_case(dir: &Path) -> Result<ContractCase, String> {
    let cases = load_dataset(dir.join(MANIFEST)).map_err(|e| e.to_string())?;
    cases
        .into_iter()
        .find(|c| c.case_id == CASE_STUDY_ID)
        .ok_or_else(|| format!("{CASE_STUDY_ID} missing from manifest"))
}

/// Records the case-study audit: the auditor answers with
/// `case-study/auditor.txt`, the critic with `case-study/critic.txt`.
pub fn build_case_study(dir: &Path) -> Result<ReplayStore, String> {
    let read = |name: &str| {
        let path = dir.join("case-study").join(name);
        fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))
    };
    let auditor = read("auditor.txt")?;
    let critic = read("critic.txt")?;
    let backend = FnBackend(move |req: &ChatRequest| {
        let text = if req.request_tag.ends_with("critic0") {
            &critic
        } else {
            &auditor
        };
        Ok(ChatResponse::complete(text.clone()))
    });
    let recorder = RecordingBackend::new(backend);
    let case = case_study_case(dir)?;
    let config = case_study_config();
    let ctx = TrialContext::audit();
    let generation = run_generation(&case, &config, &recorder, &ctx).map_err(|e| e.to_string())?;
    let scored =
        run_discrimination(&generation.findings, &case, &config, &recorder, &ctx).map_err(|e| e.to_string())?;
    let top = rank_top_k(&scored.scored, 1);
    if top.first().map(|s| s.finding.function_name.as_str()) != Some("UBSexToken") {
        return Err(format!("case study does not rank UBSexToken first: {top:?}"));
    }
    Ok(recorder.into_store())
}

/// Writes both stores under `dir/replay`.
pub fn write_all(dir: &Path) -> Result<(), String> {
    let save = |store: ReplayStore, name: &str| {
        let path = dir.join(name);
        store
            .save(&path)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))
    };
    save(build_corpus(dir)?, CORPUS)?;
    save(build_case_study(dir)?, CASE_STUDY)
}
