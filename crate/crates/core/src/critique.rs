//! Discrimination stage: one critic scores findings batch by batch, then the
//! scored pool is ranked by composite score.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::PipelineError;
use crate::extract::{extract_critiques_for, ExtractionReport};
use crate::generate::{Transcript, TrialContext};
use crate::ingest::estimate_tokens;
use crate::llm::{Backend, ChatRequest};
use crate::prompts::{collect_snippets, render_critic};
use crate::types::{
    validate_config, ContractCase, Critique, Finding, Rational, RunConfig, ScoreWeights, ScoredFinding,
};

/// Weight-normalized mean of the three critic scores.
pub fn composite_score(critique: &Critique, weights: &ScoreWeights) -> Rational {
    let total = weights.sum();
    if total == Rational::from_integer(0) {
        return Rational::from_integer(0);
    }
    let weighted = weights.correctness * Rational::from_integer(critique.correctness as u64)
        + weights.severity * Rational::from_integer(critique.severity as u64)
        + weights.profitability * Rational::from_integer(critique.profitability as u64);
    weighted / total
}

/// Highest `k` composites, stable with respect to input order, with ranks
/// 1.. assigned. The input is left untouched.
pub fn rank_top_k(scored: &[ScoredFinding], k: usize) -> Vec<ScoredFinding> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].composite.cmp(&scored[a].composite));
    order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, i)| ScoredFinding {
            rank: Some(rank + 1),
            ..scored[i].clone()
        })
        .collect()
}

/// Splits `findings` into consecutive batches of at most `batch_size`. With
/// a token budget, a batch also closes once its critic prompt would exceed
/// the budget; a single finding always forms a batch on its own.
pub fn plan_batches(
    findings: &[Finding],
    source: &str,
    batch_size: usize,
    token_budget: Option<usize>,
) -> Vec<Range<usize>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < findings.len() {
        let mut end = (start + batch_size).min(findings.len());
        if let Some(budget) = token_budget {
            let mut fit = start + 1;
            while fit < end {
                let candidate = &findings[start..=fit];
                let prompt = render_critic(candidate, &collect_snippets(source, candidate)).unwrap_or_default();
                if estimate_tokens(&prompt) > budget {
                    break;
                }
                fit += 1;
            }
            end = fit;
        }
        out.push(start..end);
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub batch_index: usize,
    pub start: usize,
    pub end: usize,
    pub request_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionReport<Critique>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationResult {
    /// Same order as the input findings; ranks unset.
    pub scored: Vec<ScoredFinding>,
    pub batches: Vec<BatchReport>,
    pub raw_transcripts: Vec<Transcript>,
}

/// Scores every finding with the critic.
pub fn run_discrimination(
    findings: &[Finding],
    case: &ContractCase,
    config: &RunConfig,
    client: &dyn Backend,
    ctx: &TrialContext,
) -> Result<DiscriminationResult, PipelineError> {
    if findings.is_empty() {
        return Err(PipelineError::EmptyFindings);
    }
    let validation = validate_config(config);
    if !validation.is_ok() {
        return Err(PipelineError::Config(validation.to_string()));
    }
    let ranges = plan_batches(
        findings,
        &case.source,
        config.critic_batch_size,
        config.critic_token_budget,
    );
    let requests = ranges
        .iter()
        .enumerate()
        .map(|(b, range)| {
            let batch = &findings[range.clone()];
            Ok(ChatRequest {
                model_id: config.model_id.clone(),
                system_text: String::new(),
                user_text: render_critic(batch, &collect_snippets(&case.source, batch))?,
                temperature: config.critic_temperature,
                max_output_tokens: config.max_output_tokens,
                request_tag: ctx.tag(&case.case_id, &format!("critic{b}")),
            })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let results = client.complete_batch(&requests, config.parallel && config.concurrent_critic_batches);

    let mut scored = Vec::with_capacity(findings.len());
    let mut batches = Vec::with_capacity(ranges.len());
    let mut transcripts = Vec::with_capacity(ranges.len());
    for (b, ((range, request), result)) in ranges.into_iter().zip(requests).zip(results).enumerate() {
        transcripts.push(Transcript::new(request.clone(), &result));
        let batch = &findings[range.clone()];
        let (critiques, extraction, error) = match result {
            Ok(response) => {
                let report = extract_critiques_for(&response.text, batch);
                if report.extraction_failed {
                    warn!(tag = %request.request_tag, "critic output unreadable; scoring batch as zero");
                    let sentinels = vec![Critique::sentinel("critic output could not be parsed"); batch.len()];
                    (sentinels, Some(report), None)
                } else {
                    (report.values.clone(), Some(report), None)
                }
            }
            Err(e) => {
                warn!(tag = %request.request_tag, error = %e, "critic batch failed");
                let sentinels = vec![Critique::sentinel(format!("critic request failed: {e}")); batch.len()];
                (sentinels, None, Some(e.to_string()))
            }
        };
        for (finding, critique) in batch.iter().zip(critiques) {
            scored.push(ScoredFinding {
                composite: composite_score(&critique, &config.score_weights),
                finding: finding.clone(),
                critique,
                rank: None,
            });
        }
        batches.push(BatchReport {
            batch_index: b,
            start: range.start,
            end: range.end,
            request_tag: request.request_tag,
            extraction,
            error,
        });
    }
    Ok(DiscriminationResult {
        scored,
        batches,
        raw_transcripts: transcripts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatResponse, FaultInjector, FnBackend, LlmError};
    use proptest::prelude::*;

    fn finding(name: &str, auditor_index: usize) -> Finding {
        Finding {
            function_name: name.into(),
            vulnerability: format!("v-{name}"),
            reasoning: "r".into(),
            auditor_index,
            trial_index: 1,
        }
    }

    fn scored(scores: (u8, u8, u8), i: usize) -> ScoredFinding {
        let critique = Critique::new("", scores.0, scores.1, scores.2);
        ScoredFinding {
            composite: composite_score(&critique, &ScoreWeights::default()),
            finding: finding(&format!("f{i}"), 0),
            critique,
            rank: None,
        }
    }

    #[test]
    fn composite_examples() {
        let w = ScoreWeights::default();
        assert_eq!(
            composite_score(&Critique::new("", 9, 9, 9), &w),
            Rational::from_integer(9)
        );
        assert_eq!(
            composite_score(&Critique::new("", 3, 0, 0), &w),
            Rational::from_integer(1)
        );
        assert_eq!(composite_score(&Critique::new("", 2, 0, 0), &w), Rational::new(2, 3));
        let only_severity = ScoreWeights::new(0.into(), 1.into(), 0.into());
        assert_eq!(
            composite_score(&Critique::new("", 9, 4, 0), &only_severity),
            Rational::from_integer(4)
        );
    }

    #[test]
    fn case_study_top_one() {
        let pool = vec![scored((3, 0, 0), 0), scored((2, 0, 0), 1), scored((9, 9, 9), 2)];
        let top = rank_top_k(&pool, 1);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].finding.function_name, "f2");
        assert_eq!(top[0].rank, Some(1));
        assert_eq!(top[0].composite, Rational::from_integer(9));
        assert!(pool.iter().all(|s| s.rank.is_none()));
    }

    #[test]
    fn large_k_returns_everything_ranked() {
        let pool = vec![scored((1, 1, 1), 0), scored((5, 5, 5), 1)];
        let all = rank_top_k(&pool, 10);
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].finding.function_name, "f1");
        assert_eq!(all.iter().map(|s| s.rank.unwrap()).collect::<Vec<_>>(), [1, 2]);
    }

    #[test]
    fn ties_keep_input_order() {
        let pool: Vec<_> = (0..5).map(|i| scored((4, 4, 4), i)).collect();
        let out = rank_top_k(&pool, 5);
        let names: Vec<_> = out.iter().map(|s| s.finding.function_name.clone()).collect();
        assert_eq!(names, ["f0", "f1", "f2", "f3", "f4"]);
    }

    #[test]
    fn batches_are_consecutive_slices() {
        let fs: Vec<_> = (0..7).map(|i| finding(&format!("f{i}"), 0)).collect();
        assert_eq!(plan_batches(&fs, "", 5, None), vec![0..5, 5..7]);
        assert_eq!(plan_batches(&fs, "", 7, None), vec![0..7]);
        assert_eq!(plan_batches(&fs, "", 1, None).len(), 7);
        // a tiny budget degrades to one finding per batch
        assert_eq!(plan_batches(&fs, "", 5, Some(1)).len(), 7);
    }

    fn critic_reply(req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let count = req.user_text.matches("\nfunction_name: ").count()
            + usize::from(req.user_text.starts_with("function_name: "));
        let items: Vec<String> = (0..count)
            .map(|i| format!(r#"{{"critic": "c", "correctness": {i}, "severity": 1, "profitability": 2}}"#))
            .collect();
        Ok(ChatResponse::complete(format!("[{}]", items.join(","))))
    }

    fn run_with(n: usize, batch: usize, backend: &dyn Backend) -> DiscriminationResult {
        let fs: Vec<_> = (0..n).map(|i| finding(&format!("f{i}"), 0)).collect();
        let case = ContractCase::new("c", "contract C {}");
        let config = RunConfig {
            critic_batch_size: batch,
            ..RunConfig::default()
        };
        run_discrimination(&fs, &case, &config, backend, &TrialContext::audit()).unwrap()
    }

    #[test]
    fn seven_findings_take_two_critic_requests() {
        let r = run_with(7, 5, &FnBackend(critic_reply));
        assert_eq!(r.raw_transcripts.len(), 2);
        assert_eq!(r.scored.len(), 7);
        assert_eq!(r.scored[4].critique.correctness, 4);
        assert_eq!(r.scored[5].critique.correctness, 0);
        assert_eq!(r.batches[1].request_tag, "c/audit/t1/critic1");
        assert!(r
            .raw_transcripts
            .iter()
            .all(|t| t.request.temperature == 0.0 && t.request.model_id == "gpt-4"));
    }

    #[test]
    fn failed_batch_scores_zero_and_spares_the_rest() {
        let faulty = FaultInjector::new(FnBackend(critic_reply), ["critic0"]);
        let r = run_with(7, 5, &faulty);
        assert!(r.scored[..5]
            .iter()
            .all(|s| s.critique.missing && s.composite == Rational::from_integer(0)));
        assert!(r.scored[5..].iter().all(|s| !s.critique.missing));
        assert!(r.batches[0].error.is_some());
    }

    #[test]
    fn empty_findings_rejected() {
        let case = ContractCase::new("c", "contract C {}");
        let err = run_discrimination(
            &[],
            &case,
            &RunConfig::default(),
            &FnBackend(critic_reply),
            &TrialContext::audit(),
        );
        assert!(matches!(err, Err(PipelineError::EmptyFindings)));
    }

    fn score_lists() -> impl proptest::strategy::Strategy<Value = Vec<(u8, u8, u8)>> {
        prop::collection::vec((0u8..=9, 0u8..=9, 0u8..=9), 0..20)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn ranking_is_a_sorted_stable_subset(scores in score_lists(), k in 1usize..25) {
            let pool: Vec<_> = scores.iter().enumerate().map(|(i, s)| scored(*s, i)).collect();
            let out = rank_top_k(&pool, k);
            prop_assert_eq!(out.len(), k.min(pool.len()));
            for w in out.windows(2) {
                prop_assert!(w[0].composite >= w[1].composite);
                if w[0].composite == w[1].composite {
                    prop_assert!(w[0].finding.function_name[1..].parse::<usize>().unwrap()
                        < w[1].finding.function_name[1..].parse::<usize>().unwrap());
                }
            }
        }

        #[test]
        fn batching_does_not_change_ranking(scores in score_lists(), b1 in 1usize..8, b2 in 1usize..8) {
            let fs: Vec<_> = (0..scores.len()).map(|i| finding(&format!("f{i}"), 0)).collect();
            let attach = |batch: usize| {
                let mut out = Vec::new();
                for range in plan_batches(&fs, "", batch, None) {
                    for i in range {
                        out.push(scored(scores[i], i));
                    }
                }
                rank_top_k(&out, usize::MAX)
            };
            prop_assert_eq!(attach(b1), attach(b2));
        }
    }
}
