//! Acceptance checks 1-8. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lensaudit::critique::{composite_score, rank_top_k};
use lensaudit::evaluate::{aggregate, judge_hit, percent, precision_recall, render_report, EvalReport, ReportFormat};
use lensaudit::extract::{extract_critiques, extract_findings, findings_to_json};
use lensaudit::generate::{run_generation, TrialContext};
use lensaudit::ingest::load_dataset;
use lensaudit::llm::{FaultInjector, ReplayBackend, ReplayStore};
use lensaudit::strategies::{derive_seed, oracle_select, read_outcomes, run_strategy, Competitor, TrialOutcome};
use lensaudit::{Critique, Finding, Rational, RunConfig, ScoreWeights, ScoredFinding, Strategy};
use lensaudit_cli::{run_from, AuditOutput};
use lensaudit_fixtures::adversarial::{check_total, load_adversarial, mutated_input, ExtractKind};
use lensaudit_fixtures::{fixtures_dir, HitTable, ScriptedBackend, CASE_STUDY, CASE_STUDY_ID, CORPUS, MANIFEST, TABLE};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Absolute tolerance, in percentage points, for ratio comparisons.
const PERCENT_TOLERANCE: f64 = 0.05;
const RUNTIME_LIMIT: Duration = Duration::from_secs(1);
const PROPTEST_CASES: u32 = 1000;
const MIN_ADVERSARIAL: usize = 30;

type Check = Result<String, String>;

fn cli(args: &[&str]) -> (i32, Vec<u8>, Vec<u8>) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["lensaudit"];
    argv.extend_from_slice(args);
    let code = run_from(argv, &mut out, &mut err);
    (code, out, err)
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn within(got: f64, want: f64) -> bool {
    (got - want).abs() <= PERCENT_TOLERANCE
}

/// Percentages in the rendered text row starting with `label`.
fn rendered_row(text: &str, label: &str) -> Vec<f64> {
    text.lines()
        .find(|l| l.starts_with(label))
        .map(|l| {
            l[label.len()..]
                .split_whitespace()
                .filter_map(|t| t.strip_suffix('%'))
                .filter_map(|t| t.parse().ok())
                .collect()
        })
        .unwrap_or_default()
}

fn criterion_1() -> Check {
    let dir = fixtures_dir();
    let table = HitTable::load(&dir.join(TABLE))?;
    let started = Instant::now();
    let report = EvalReport::from_columns(
        table.cases.clone(),
        table.strategies.clone(),
        &table.columns(),
        table.trials,
    );
    let text = render_report(&report, ReportFormat::TextTable);
    let json = render_report(&report, ReportFormat::MachineJson);
    let elapsed = started.elapsed();

    let cases = load_dataset(dir.join(MANIFEST)).map_err(|e| e.to_string())?;
    let outcomes = lensaudit::strategies::run_benchmark(
        &cases,
        &Competitor::table_six(),
        &RunConfig {
            backend: lensaudit::BackendKind::Replay,
            ..RunConfig::default()
        },
        &ReplayBackend::new(ReplayStore::load(dir.join(CORPUS))?),
    );
    let aggregated = aggregate(&outcomes, &cases, None).map_err(|e| e.to_string())?;
    if render_report(&aggregated, ReportFormat::TextTable) != text {
        return Err("aggregate over the replayed corpus renders a different table than the hit fixture".into());
    }
    if serde_json::from_str::<serde_json::Value>(&json).is_err() {
        return Err("machine report is not JSON".into());
    }

    let printed = &table.printed;
    let rows = [
        ("Hit ratio (CVE)", &report.cve_ratio, &printed.cve_ratio_percent),
        ("Hit ratio (trial)", &report.trial_ratio, &printed.trial_ratio_percent),
    ];
    let mut mismatches = Vec::new();
    for (label, ratios, want) in rows {
        let shown = rendered_row(&text, label);
        for (i, s) in table.strategies.iter().enumerate() {
            let exact = percent(ratios[s]);
            let rendered = shown.get(i).copied().unwrap_or(f64::NAN);
            if !within(exact, want[i]) || !within(rendered, want[i]) {
                mismatches.push(format!(
                    "{label} {s}: {exact:.4}% (rendered {rendered}%) vs printed {}%",
                    want[i]
                ));
            }
        }
    }
    let counted: Vec<u32> = table.strategies.iter().map(|s| report.trial_hits[s]).collect();
    let cve: Vec<u32> = table.strategies.iter().map(|s| report.cve_hits[s]).collect();
    if cve != printed.cve_hits {
        mismatches.push(format!("Hit # (CVE) {cve:?} vs printed {:?}", printed.cve_hits));
    }
    if counted != printed.trial_hits {
        mismatches.push(format!(
            "Hit # (trial) from cells {counted:?} vs printed {:?}",
            printed.trial_hits
        ));
    }
    if elapsed >= RUNTIME_LIMIT {
        mismatches.push(format!("runtime {elapsed:?}"));
    }
    if mismatches.is_empty() {
        Ok(format!(
            "all 12 ratios within {PERCENT_TOLERANCE} points in {elapsed:?}"
        ))
    } else {
        Err(mismatches.join("; "))
    }
}

fn criterion_2() -> Check {
    let dir = fixtures_dir();
    let contract = path_str(&dir.join("contracts").join(format!("{CASE_STUDY_ID}.sol")));
    let store = path_str(&dir.join(CASE_STUDY));
    let args = [
        "audit",
        contract.as_str(),
        "--auditors",
        "1",
        "--max-vulns",
        "3",
        "--topk",
        "1",
        "--weights",
        "1,1,1",
        "--backend",
        "replay",
        "--fixtures",
        store.as_str(),
        "--format",
        "json",
    ];
    let mut first: Option<Vec<u8>> = None;
    let mut slowest = Duration::ZERO;
    for run in 1..=10 {
        let started = Instant::now();
        let (code, out, err) = cli(&args);
        slowest = slowest.max(started.elapsed());
        if code != 0 {
            return Err(format!("run {run} exited {code}: {}", String::from_utf8_lossy(&err)));
        }
        match &first {
            None => first = Some(out),
            Some(f) if *f != out => return Err(format!("run {run} output differs from run 1")),
            Some(_) => {}
        }
    }
    let doc: AuditOutput = serde_json::from_slice(first.as_deref().unwrap_or_default()).map_err(|e| e.to_string())?;
    let top = doc.ranked.first().ok_or("no ranked finding")?;
    if doc.ranked.len() != 1
        || top.rank != 1
        || top.function_name != "UBSexToken"
        || top.vulnerability != "Unexpected Behaviour"
        || top.composite != "9"
    {
        return Err(format!("top finding is {top:?}"));
    }
    if slowest >= RUNTIME_LIMIT {
        return Err(format!("slowest run took {slowest:?}"));
    }
    Ok(format!(
        "UBSexToken / Unexpected Behaviour at rank 1, composite 9, 10 identical runs, slowest {slowest:?}"
    ))
}

fn criterion_3() -> Check {
    let (precision, _) = precision_recall(32, 740, 0);
    let (_, recall) = precision_recall(32, 0, 41);
    let (p, r) = (percent(precision), percent(recall));
    if within(p, 4.15) && within(r, 43.8) {
        Ok(format!("precision {p:.3}%, recall {r:.3}%"))
    } else {
        Err(format!("precision {p:.3}% (want 4.15), recall {r:.3}% (want 43.8)"))
    }
}

fn criterion_4() -> Check {
    let cases = load_adversarial(&fixtures_dir())?;
    if cases.len() < MIN_ADVERSARIAL {
        return Err(format!("only {} adversarial fixtures", cases.len()));
    }
    let failures: Vec<String> = cases.iter().filter_map(|c| c.check().err()).collect();
    if !failures.is_empty() {
        return Err(failures.join(" | "));
    }
    for case in cases.iter().filter(|c| c.clean) {
        let again = match case.kind {
            ExtractKind::Findings => {
                let first = extract_findings(&case.input, 0, 1, case.limit());
                let again = extract_findings(&findings_to_json(&first.values), 0, 1, case.limit());
                (again.values == first.values, again.repairs_applied)
            }
            ExtractKind::Critiques => {
                let first = extract_critiques(&case.input, case.limit());
                let json = serde_json::to_string(&first.values).map_err(|e| e.to_string())?;
                let again = extract_critiques(&json, case.limit());
                (again.values == first.values, again.repairs_applied)
            }
        };
        if !again.0 || !again.1.is_empty() {
            return Err(format!("{} does not round-trip cleanly: {:?}", case.name, again.1));
        }
    }
    let mut runner = TestRunner::new(Config {
        cases: PROPTEST_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&mutated_input(cases.len()), |(pick, edits)| {
            let case = &cases[pick];
            let text = edits.iter().fold(case.input.clone(), |t, e| e.apply(&t));
            check_total(case.kind, &text, case.limit())
                .map(|_| ())
                .map_err(|e| TestCaseError::fail(format!("{}: {e}; input {text:?}", case.name)))
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{} fixtures meet expectations, clean ones round-trip, {PROPTEST_CASES} mutations yield total reports",
        cases.len()
    ))
}

fn scored(scores: &[(u8, u8, u8)], weights: &ScoreWeights) -> Vec<ScoredFinding> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &(c, s, p))| {
            let critique = Critique::new("", c, s, p);
            ScoredFinding {
                finding: Finding {
                    function_name: format!("f{i}"),
                    vulnerability: "v".into(),
                    reasoning: String::new(),
                    auditor_index: 0,
                    trial_index: 1,
                },
                composite: composite_score(&critique, weights),
                critique,
                rank: None,
            }
        })
        .collect()
}

fn index_of(s: &ScoredFinding) -> usize {
    s.finding.function_name[1..].parse().unwrap_or(usize::MAX)
}

fn criterion_5() -> Check {
    let mut runner = TestRunner::new(Config {
        cases: PROPTEST_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let input = (
        prop::collection::vec((0u8..=9, 0u8..=9, 0u8..=9), 0..24),
        0usize..30,
        (1u64..6, 1u64..6, 1u64..6),
        (1u64..10, 1u64..5),
    );
    runner
        .run(&input, |(scores, k, (wc, ws, wp), (num, den))| {
            let weights = ScoreWeights::new(wc.into(), ws.into(), wp.into());
            let pool = scored(&scores, &weights);
            let top = rank_top_k(&pool, k);
            prop_assert_eq!(top.len(), k.min(pool.len()));
            let idx: Vec<usize> = top.iter().map(index_of).collect();
            let mut distinct = idx.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), idx.len());
            for (rank, s) in top.iter().enumerate() {
                prop_assert_eq!(s.rank, Some(rank + 1));
                prop_assert_eq!(&pool[index_of(s)].finding, &s.finding);
            }
            for w in top.windows(2) {
                prop_assert!(w[0].composite >= w[1].composite);
                if w[0].composite == w[1].composite {
                    prop_assert!(index_of(&w[0]) < index_of(&w[1]));
                }
            }
            let mut expected: Vec<usize> = (0..pool.len()).collect();
            expected.sort_by(|a, b| pool[*b].composite.cmp(&pool[*a].composite));
            expected.truncate(k);
            prop_assert_eq!(&idx, &expected);

            let factor = Rational::new(num, den);
            let scaled = ScoreWeights::new(
                weights.correctness * factor,
                weights.severity * factor,
                weights.profitability * factor,
            );
            let rescaled: Vec<usize> = rank_top_k(&scored(&scores, &scaled), k).iter().map(index_of).collect();
            prop_assert_eq!(idx, rescaled);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{PROPTEST_CASES} random pools: size min(k,N), distinct subset, non-increasing, stable ties, scale-invariant"
    ))
}

fn bench_once(out: &Path) -> Result<Vec<u8>, String> {
    let dir = fixtures_dir();
    let (manifest, corpus, out_s) = (
        path_str(&dir.join(MANIFEST)),
        path_str(&dir.join(CORPUS)),
        path_str(out),
    );
    let (code, _, err) = cli(&[
        "bench",
        manifest.as_str(),
        "--backend",
        "replay",
        "--fixtures",
        corpus.as_str(),
        "--seed",
        "0",
        "--out",
        out_s.as_str(),
        "--format",
        "json",
    ]);
    if code != 0 {
        return Err(format!("bench exited {code}: {}", String::from_utf8_lossy(&err)));
    }
    fs::read(out).map_err(|e| e.to_string())
}

fn criterion_6(scratch: &Path) -> Check {
    let a = bench_once(&scratch.join("a.jsonl"))?;
    let b = bench_once(&scratch.join("b.jsonl"))?;
    if a != b {
        return Err("results files differ".into());
    }
    let outcomes = read_outcomes(&scratch.join("a.jsonl"))?;
    if outcomes.len() != 13 * 6 * 3 {
        return Err(format!("{} outcomes, expected 234", outcomes.len()));
    }
    if let Some(o) = outcomes.iter().find(|o| o.error.is_some()) {
        return Err(format!(
            "{} {} t{} errored: {:?}",
            o.case_id, o.label, o.trial_index, o.error
        ));
    }
    Ok(format!("two runs byte-identical ({} bytes), 234 outcomes", a.len()))
}

fn criterion_7(scratch: &Path) -> Check {
    let outcomes = read_outcomes(&scratch.join("a.jsonl"))?;
    let cases = load_dataset(fixtures_dir().join(MANIFEST)).map_err(|e| e.to_string())?;
    let find = |case: &str, label: &str, trial: u32| -> Result<&TrialOutcome, String> {
        outcomes
            .iter()
            .find(|o| o.case_id == case && o.label == label && o.trial_index == trial)
            .ok_or_else(|| format!("no outcome for {case} {label} t{trial}"))
    };
    let mut compared = 0;
    for case in &cases {
        let label = case.label.as_ref().ok_or("unlabeled fixture case")?;
        for trial in 1..=3 {
            for params in ["n1m3", "n2m3"] {
                let critic = find(&case.case_id, &format!("A+C({params})"), trial)?;
                let oracle = find(&case.case_id, &format!("A+O({params})"), trial)?;
                if judge_hit(critic, label, None) && !judge_hit(oracle, label, None) {
                    return Err(format!("{} t{trial} {params}: A+O misses where A+C hits", case.case_id));
                }
                let mut same_pool = critic.clone();
                same_pool.selected = oracle_select(&critic.candidates, label).cloned();
                if judge_hit(critic, label, None) && !judge_hit(&same_pool, label, None) {
                    return Err(format!(
                        "{} t{trial} {params}: oracle loses on the A+C pool",
                        case.case_id
                    ));
                }
                compared += 1;
            }
        }
    }
    Ok(format!(
        "{compared} (case, trial, n) pairs: A+O >= A+C, also on identical pools"
    ))
}

fn criterion_8() -> Check {
    let dir = fixtures_dir();
    let table = HitTable::load(&dir.join(TABLE))?;
    let cases = load_dataset(dir.join(MANIFEST)).map_err(|e| e.to_string())?;
    let config = RunConfig {
        n_auditors: 2,
        m_max_vulns: 3,
        ..RunConfig::default()
    };
    let competitor = Competitor::new(Strategy::AuditorCritic, 2, 3);
    let label = competitor.label();
    let mut runs = 0;
    for case in &cases {
        for trial in 1..=table.trials {
            let ctx = TrialContext::new(label.clone(), trial);
            let clean = run_generation(case, &config, &ScriptedBackend::new(table.clone(), 0), &ctx)
                .map_err(|e| e.to_string())?;
            let faulty_backend = FaultInjector::new(ScriptedBackend::new(table.clone(), 0), ["auditor1"]);
            let faulty = run_generation(case, &config, &faulty_backend, &ctx).map_err(|e| e.to_string())?;
            let kept = |g: &lensaudit::generate::GenerationResult| {
                serde_json::to_vec(&g.findings_of(0).collect::<Vec<_>>()).unwrap_or_default()
            };
            if kept(&clean) != kept(&faulty) {
                return Err(format!("{} t{trial}: auditor 0 findings changed", case.case_id));
            }
            let report = &faulty.per_auditor_reports[1];
            if report.error.is_none() || faulty.findings_of(1).count() != 0 {
                return Err(format!("{} t{trial}: auditor 1 failure not reported", case.case_id));
            }
            let seed = derive_seed(config.seed, &case.case_id, &label, trial);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcome = run_strategy(&competitor, case, &config, &faulty_backend, trial, seed, &mut rng)
                .map_err(|e| format!("{} t{trial}: run aborted: {e}", case.case_id))?;
            if outcome.selected.is_none() && !outcome.candidates.is_empty() {
                return Err(format!(
                    "{} t{trial}: nothing selected from surviving pool",
                    case.case_id
                ));
            }
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} n=2 runs with auditor 1 failing: auditor 0 bit-identical, error reported, run completes"
    ))
}

fn main() -> ExitCode {
    let scratch = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL setup: {e}");
            return ExitCode::FAILURE;
        }
    };
    let results: Vec<(u32, &str, Check)> = vec![
        (1, "metric golden table", criterion_1()),
        (2, "case-study end-to-end", criterion_2()),
        (3, "precision/recall formulas", criterion_3()),
        (4, "extraction robustness", criterion_4()),
        (5, "ranking properties", criterion_5()),
        (6, "benchmark determinism", criterion_6(scratch.path())),
        (7, "oracle dominance", criterion_7(scratch.path())),
        (8, "fault isolation", criterion_8()),
    ];
    let mut failed = 0;
    for (n, name, result) in &results {
        match result {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
