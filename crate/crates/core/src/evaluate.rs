//! Hit adjudication and hit-rate aggregation over benchmark outcomes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::function_identifier;
use crate::strategies::{Competitor, TrialOutcome};
use crate::types::{normalize, rational_map, ContractCase, Finding, GroundTruthLabel, Rational};

/// True when the finding names the labelled function and its vulnerability
/// name and some label alias contain one another after normalization.
pub fn finding_matches(finding: &Finding, label: &GroundTruthLabel) -> bool {
    let name = normalize(function_identifier(&finding.function_name));
    if name.is_empty() || name != normalize(function_identifier(&label.function_name)) {
        return false;
    }
    let vuln = normalize(&finding.vulnerability);
    !vuln.is_empty()
        && label
            .vulnerability_aliases
            .iter()
            .any(|a| !a.is_empty() && (vuln.contains(a.as_str()) || a.contains(vuln.as_str())))
}

/// A human verdict overriding the automatic judgement for one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adjudication {
    pub case_id: String,
    /// Competitor label, e.g. `A+C(n1m3)`.
    pub strategy: String,
    pub trial: u32,
    pub hit: bool,
    #[serde(default)]
    pub rationale: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Adjudications {
    entries: BTreeMap<(String, String, u32), Adjudication>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AdjudicationFile {
    #[serde(default)]
    adjudication: Vec<Adjudication>,
}

impl Adjudications {
    /// Parses TOML of the form `[[adjudication]] case_id, strategy, trial, hit, rationale`.
    /// A later entry for the same trial replaces an earlier one.
    pub fn parse(text: &str) -> Result<Self, String> {
        let file: AdjudicationFile = toml::from_str(text).map_err(|e| e.to_string())?;
        Ok(file.adjudication.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn get(&self, case_id: &str, strategy: &str, trial: u32) -> Option<&Adjudication> {
        self.entries.get(&(case_id.to_string(), strategy.to_string(), trial))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<Adjudication> for Adjudications {
    fn from_iter<I: IntoIterator<Item = Adjudication>>(iter: I) -> Self {
        let entries = iter
            .into_iter()
            .map(|a| ((a.case_id.clone(), a.strategy.clone(), a.trial), a))
            .collect();
        Self { entries }
    }
}

/// Whether one trial counts as a hit. Manual adjudications win; otherwise
/// the selection must match the label. No selection is a miss.
pub fn judge_hit(outcome: &TrialOutcome, label: &GroundTruthLabel, adjudications: Option<&Adjudications>) -> bool {
    if let Some(a) = adjudications.and_then(|a| a.get(&outcome.case_id, &outcome.label, outcome.trial_index)) {
        return a.hit;
    }
    outcome.selected.as_ref().is_some_and(|f| finding_matches(f, label))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("outcome refers to case {0:?}, which is not in the dataset")]
    UnknownCase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Dataset order.
    pub cases: Vec<String>,
    /// Competitor labels in column order.
    pub strategies: Vec<String>,
    pub trials: u32,
    /// case → strategy → hits in `[0, trials]`.
    pub per_cell: BTreeMap<String, BTreeMap<String, u32>>,
    pub cve_hits: BTreeMap<String, u32>,
    #[serde(with = "rational_map")]
    pub cve_ratio: BTreeMap<String, Rational>,
    pub trial_hits: BTreeMap<String, u32>,
    #[serde(with = "rational_map")]
    pub trial_ratio: BTreeMap<String, Rational>,
    /// (cases, cases × trials).
    pub denominators: (u64, u64),
}

fn ratio(hits: u32, denominator: u64) -> Rational {
    if denominator == 0 {
        Rational::from_integer(0)
    } else {
        Rational::new(hits as u64, denominator)
    }
}

impl EvalReport {
    /// Builds the summary rows from a per-cell hit table. `columns[s][c]`
    /// holds the hits of strategy `s` on case `c`.
    pub fn from_columns(cases: Vec<String>, strategies: Vec<String>, columns: &[Vec<u32>], trials: u32) -> Self {
        let mut per_cell: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for case in &cases {
            per_cell.entry(case.clone()).or_default();
        }
        for (s, column) in strategies.iter().zip(columns) {
            for (case, hits) in cases.iter().zip(column) {
                per_cell.entry(case.clone()).or_default().insert(s.clone(), *hits);
            }
        }
        Self::from_per_cell(cases, strategies, per_cell, trials)
    }

    pub fn from_per_cell(
        cases: Vec<String>,
        strategies: Vec<String>,
        per_cell: BTreeMap<String, BTreeMap<String, u32>>,
        trials: u32,
    ) -> Self {
        let num_cases = cases.len() as u64;
        let num_trials = num_cases * trials as u64;
        let mut cve_hits = BTreeMap::new();
        let mut trial_hits = BTreeMap::new();
        let mut cve_ratio = BTreeMap::new();
        let mut trial_ratio = BTreeMap::new();
        for s in &strategies {
            let column = cases
                .iter()
                .map(|c| per_cell.get(c).and_then(|row| row.get(s)).copied().unwrap_or(0));
            let cve = column.clone().filter(|h| *h >= 1).count() as u32;
            let trial: u32 = column.sum();
            cve_hits.insert(s.clone(), cve);
            trial_hits.insert(s.clone(), trial);
            cve_ratio.insert(s.clone(), ratio(cve, num_cases));
            trial_ratio.insert(s.clone(), ratio(trial, num_trials));
        }
        Self {
            cases,
            strategies,
            trials,
            per_cell,
            cve_hits,
            cve_ratio,
            trial_hits,
            trial_ratio,
            denominators: (num_cases, num_trials),
        }
    }

    pub fn cell(&self, case_id: &str, strategy: &str) -> u32 {
        self.per_cell
            .get(case_id)
            .and_then(|row| row.get(strategy))
            .copied()
            .unwrap_or(0)
    }
}

fn column_order(labels: BTreeSet<String>) -> Vec<String> {
    let mut labels: Vec<String> = labels.into_iter().collect();
    labels.sort_by_key(|l| match l.parse::<Competitor>() {
        Ok(c) => (0, c.sort_key(), l.clone()),
        Err(_) => (1, (0, 0, 0), l.clone()),
    });
    labels
}

/// Judges every outcome and tallies hits per (case, strategy). The trial
/// denominator uses the highest trial index seen. Independent of the order
/// of `outcomes`.
pub fn aggregate(
    outcomes: &[TrialOutcome],
    dataset: &[ContractCase],
    adjudications: Option<&Adjudications>,
) -> Result<EvalReport, EvalError> {
    let labels: BTreeMap<&str, Option<&GroundTruthLabel>> =
        dataset.iter().map(|c| (c.case_id.as_str(), c.label.as_ref())).collect();
    let mut strategies = BTreeSet::new();
    let mut per_cell: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    let mut trials = 0;
    for o in outcomes {
        let label = labels
            .get(o.case_id.as_str())
            .ok_or_else(|| EvalError::UnknownCase(o.case_id.clone()))?;
        strategies.insert(o.label.clone());
        trials = trials.max(o.trial_index);
        let hit = match label {
            Some(label) => judge_hit(o, label, adjudications),
            None => adjudications
                .and_then(|a| a.get(&o.case_id, &o.label, o.trial_index))
                .is_some_and(|a| a.hit),
        };
        let cell = per_cell
            .entry(o.case_id.clone())
            .or_default()
            .entry(o.label.clone())
            .or_insert(0);
        *cell += u32::from(hit);
    }
    let strategies = column_order(strategies);
    for row in per_cell.values_mut() {
        for s in &strategies {
            row.entry(s.clone()).or_insert(0);
        }
    }
    let cases: Vec<String> = dataset.iter().map(|c| c.case_id.clone()).collect();
    Ok(EvalReport::from_per_cell(cases, strategies, per_cell, trials))
}

/// `(tp / (tp + fp), tp / (tp + fn))`, each 0 when its denominator is 0.
pub fn precision_recall(tp: u64, fp: u64, fn_: u64) -> (Rational, Rational) {
    let frac = |num: u64, den: u64| {
        if den == 0 {
            Rational::from_integer(0)
        } else {
            Rational::new(num, den)
        }
    };
    (frac(tp, tp + fp), frac(tp, tp + fn_))
}

/// A ratio as a percentage rounded half-up to `decimals` places.
pub fn format_percent(r: Rational, decimals: u32) -> String {
    let scale = 10u128.pow(decimals);
    let numer = *r.numer() as u128 * 100 * scale;
    let denom = *r.denom() as u128;
    let rounded = (2 * numer + denom) / (2 * denom);
    if decimals == 0 {
        format!("{rounded}%")
    } else {
        format!(
            "{}.{:0width$}%",
            rounded / scale,
            rounded % scale,
            width = decimals as usize
        )
    }
}

/// A ratio as a floating percentage, for tolerance checks.
pub fn percent(r: Rational) -> f64 {
    *r.numer() as f64 * 100.0 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    TextTable,
    MachineJson,
}

fn split_label(label: &str) -> (&str, &str) {
    match label.split_once('(') {
        Some((method, rest)) => (method, rest.trim_end_matches(')')),
        None => (label, ""),
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::MachineJson => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::TextTable => render_table(report),
    }
}

fn render_table(report: &EvalReport) -> String {
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let (methods, params): (Vec<_>, Vec<_>) = report.strategies.iter().map(|s| split_label(s)).unzip();
    rows.push(("Method".into(), methods.iter().map(|s| s.to_string()).collect()));
    rows.push(("Parameter".into(), params.iter().map(|s| s.to_string()).collect()));
    let header_rows = rows.len();
    if !report.strategies.is_empty() {
        for case in &report.cases {
            rows.push((
                case.clone(),
                report
                    .strategies
                    .iter()
                    .map(|s| report.cell(case, s).to_string())
                    .collect(),
            ));
        }
        let summary = |name: &str, f: &dyn Fn(&str) -> String| {
            (
                name.to_string(),
                report.strategies.iter().map(|s| f(s)).collect::<Vec<_>>(),
            )
        };
        rows.push(summary("Hit # (CVE)", &|s| report.cve_hits[s].to_string()));
        rows.push(summary("Hit ratio (CVE)", &|s| format_percent(report.cve_ratio[s], 1)));
        rows.push(summary("Hit # (trial)", &|s| report.trial_hits[s].to_string()));
        rows.push(summary("Hit ratio (trial)", &|s| {
            format_percent(report.trial_ratio[s], 1)
        }));
    }

    let first = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..report.strategies.len())
        .map(|i| {
            rows.iter()
                .map(|(_, cells)| cells[i].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let total = first + widths.iter().map(|w| w + 2).sum::<usize>();
    let summary_start = if report.strategies.is_empty() {
        usize::MAX
    } else {
        rows.len() - 4
    };
    let mut out = String::new();
    for (i, (name, cells)) in rows.iter().enumerate() {
        if i == header_rows && !report.strategies.is_empty() || i == summary_start {
            let _ = writeln!(out, "{}", "-".repeat(total));
        }
        let mut line = format!("{name:<first$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(line, "  {cell:>w$}");
        }
        let _ = writeln!(out, "{}", line.trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Strategy;
    use proptest::prelude::*;

    fn label() -> GroundTruthLabel {
        GroundTruthLabel::new(
            "UBSexToken",
            ["constructor typo", "unexpected behaviour", "wrong constructor name"],
            "",
        )
        .unwrap()
    }

    fn finding(function: &str, vulnerability: &str) -> Finding {
        Finding {
            function_name: function.into(),
            vulnerability: vulnerability.into(),
            reasoning: String::new(),
            auditor_index: 0,
            trial_index: 1,
        }
    }

    fn outcome(case_id: &str, label: &str, trial: u32, selected: Option<Finding>) -> TrialOutcome {
        let competitor: Competitor = label.parse().unwrap();
        TrialOutcome {
            case_id: case_id.into(),
            strategy: competitor.strategy,
            label: label.into(),
            n: competitor.n,
            m: competitor.m,
            trial_index: trial,
            seed: 0,
            selected,
            critique: None,
            composite: None,
            oracle_match: None,
            candidate_pool_size: 0,
            candidates: Vec::new(),
            request_tags: Vec::new(),
            error: None,
        }
    }

    #[test]
    fn case_study_selection_is_a_hit() {
        let o = outcome("x", "A+C(n1m3)", 1, Some(finding("UBSexToken", "Unexpected Behaviour")));
        assert!(judge_hit(&o, &label(), None));
    }

    #[test]
    fn no_selection_is_a_miss() {
        assert!(!judge_hit(&outcome("x", "A(n1m1)", 1, None), &label(), None));
    }

    #[test]
    fn wrong_function_is_a_miss() {
        let o = outcome("x", "A(n1m1)", 1, Some(finding("approve", "Unexpected Behaviour")));
        assert!(!judge_hit(&o, &label(), None));
    }

    #[test]
    fn alias_matching_works_in_both_directions() {
        let l = GroundTruthLabel::new("f", ["integer overflow"], "").unwrap();
        assert!(finding_matches(&finding("f", "Integer Overflow/Underflow"), &l));
        assert!(finding_matches(&finding("f()", "overflow"), &l));
        assert!(!finding_matches(&finding("f", "reentrancy"), &l));
        assert!(!finding_matches(&finding("f", "!!!"), &l));
    }

    #[test]
    fn adjudication_overrides_the_automatic_verdict() {
        let adj = Adjudications::parse(
            r#"
[[adjudication]]
case_id = "x"
strategy = "A+C(n1m3)"
trial = 2
hit = false
rationale = "reasoning does not match the report"
"#,
        )
        .unwrap();
        let hit = outcome("x", "A+C(n1m3)", 2, Some(finding("UBSexToken", "constructor typo")));
        assert!(judge_hit(&hit, &label(), None));
        assert!(!judge_hit(&hit, &label(), Some(&adj)));
        let other_trial = outcome("x", "A+C(n1m3)", 1, Some(finding("UBSexToken", "constructor typo")));
        assert!(judge_hit(&other_trial, &label(), Some(&adj)));
        assert!(Adjudications::parse("[[adjudication]]\ncase_id = 1").is_err());
    }

    const COLUMN_A: [u32; 13] = [3, 3, 1, 0, 0, 2, 0, 0, 0, 0, 0, 3, 0];
    const COLUMN_AC2: [u32; 13] = [3, 3, 1, 2, 3, 0, 2, 3, 3, 0, 0, 3, 0];

    fn cases13() -> Vec<String> {
        (0..13).map(|i| format!("case{i:02}")).collect()
    }

    #[test]
    fn column_totals_and_ratios() {
        let r = EvalReport::from_columns(
            cases13(),
            vec!["A(n1m1)".into(), "A+C(n2m3)".into(), "zero".into()],
            &[COLUMN_A.to_vec(), COLUMN_AC2.to_vec(), vec![0; 13]],
            3,
        );
        assert_eq!(r.cve_hits["A(n1m1)"], 5);
        assert_eq!(format_percent(r.cve_ratio["A(n1m1)"], 1), "38.5%");
        assert_eq!(r.trial_hits["A(n1m1)"], 12);
        assert_eq!(r.cve_hits["A+C(n2m3)"], 9);
        assert_eq!(format_percent(r.cve_ratio["A+C(n2m3)"], 1), "69.2%");
        assert_eq!(r.trial_hits["A+C(n2m3)"], 23);
        assert_eq!(format_percent(r.trial_ratio["A+C(n2m3)"], 1), "59.0%");
        assert_eq!(r.trial_hits["zero"], 0);
        assert_eq!(r.trial_ratio["zero"], Rational::from_integer(0));
        assert_eq!(r.denominators, (13, 39));
    }

    #[test]
    fn precision_and_recall() {
        let (p, _) = precision_recall(32, 740, 0);
        assert!((percent(p) - 4.15).abs() < 0.01);
        let (_, r) = precision_recall(32, 0, 41);
        assert!((percent(r) - 43.8).abs() < 0.1);
        assert_eq!(
            precision_recall(0, 0, 0),
            (Rational::from_integer(0), Rational::from_integer(0))
        );
    }

    #[test]
    fn percent_rounding_is_half_up() {
        assert_eq!(format_percent(Rational::new(1, 8), 1), "12.5%");
        assert_eq!(format_percent(Rational::new(1, 16), 1), "6.3%");
        assert_eq!(format_percent(Rational::new(7, 39), 1), "17.9%");
        assert_eq!(format_percent(Rational::from_integer(1), 0), "100%");
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = EvalReport::from_columns(Vec::new(), Vec::new(), &[], 3);
        let text = render_report(&r, ReportFormat::TextTable);
        assert_eq!(text.lines().collect::<Vec<_>>(), ["Method", "Parameter"]);
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_columns(
            cases13(),
            vec!["A(n1m1)".into(), "A+C(n2m3)".into()],
            &[COLUMN_A.to_vec(), COLUMN_AC2.to_vec()],
            3,
        );
        let text = render_report(&r, ReportFormat::TextTable);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Method") && lines[0].ends_with("A+C"));
        assert!(lines[1].ends_with("n2m3"));
        assert!(lines
            .iter()
            .any(|l| l.starts_with("Hit ratio (CVE)") && l.ends_with("38.5%  69.2%")));
        assert!(lines.last().unwrap().starts_with("Hit ratio (trial)"));
    }

    #[test]
    fn json_round_trips() {
        let r = EvalReport::from_columns(cases13(), vec!["A(n1m1)".into()], &[COLUMN_A.to_vec()], 3);
        let json = render_report(&r, ReportFormat::MachineJson);
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn aggregate_rejects_unknown_cases() {
        let dataset = vec![ContractCase::new("a", "contract A {}")];
        let err = aggregate(&[outcome("b", "A(n1m1)", 1, None)], &dataset, None).unwrap_err();
        assert_eq!(err, EvalError::UnknownCase("b".into()));
    }

    fn dataset() -> Vec<ContractCase> {
        vec![
            ContractCase::new("a", "contract A {}").with_label(label()),
            ContractCase::new("b", "contract B {}").with_label(GroundTruthLabel::new("f", ["overflow"], "").unwrap()),
        ]
    }

    fn sample_outcomes() -> Vec<TrialOutcome> {
        let mut out = Vec::new();
        for (i, s) in ["A(n1m1)", "A+C(n1m3)", "A+O(n2m3)"].iter().enumerate() {
            for t in 1..=3u32 {
                let hit_a = (t as usize + i).is_multiple_of(2);
                out.push(outcome(
                    "a",
                    s,
                    t,
                    Some(finding(
                        if hit_a { "UBSexToken" } else { "approve" },
                        "constructor typo",
                    )),
                ));
                out.push(outcome("b", s, t, (t <= i as u32).then(|| finding("f", "overflow"))));
            }
        }
        out
    }

    #[test]
    fn aggregate_orders_columns_canonically() {
        let r = aggregate(&sample_outcomes(), &dataset(), None).unwrap();
        assert_eq!(r.strategies, ["A(n1m1)", "A+C(n1m3)", "A+O(n2m3)"]);
        assert_eq!(r.trials, 3);
        assert_eq!(r.cell("b", "A+O(n2m3)"), 2);
        assert_eq!(r.cell("a", "A(n1m1)"), 1);
        for s in &r.strategies {
            assert!(r.cve_hits[s] <= r.trial_hits[s]);
        }
        let _ = Strategy::ALL;
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = sample_outcomes();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                aggregate(&shuffled, &dataset(), None).unwrap(),
                aggregate(&sample_outcomes(), &dataset(), None).unwrap()
            );
        }

        #[test]
        fn summary_bounds_hold(columns in prop::collection::vec(prop::collection::vec(0u32..=3, 13), 1..7)) {
            let strategies: Vec<String> = (0..columns.len()).map(|i| format!("s{i}")).collect();
            let r = EvalReport::from_columns(cases13(), strategies.clone(), &columns, 3);
            for (s, col) in strategies.iter().zip(&columns) {
                prop_assert!(r.cve_hits[s] <= 13);
                prop_assert!(r.trial_hits[s] <= 39);
                prop_assert!(r.cve_hits[s] <= r.trial_hits[s]);
                prop_assert_eq!(r.trial_hits[s], col.iter().sum::<u32>());
                let printed: f64 = format_percent(r.trial_ratio[s], 1).trim_end_matches('%').parse().unwrap();
                prop_assert!((printed - percent(r.trial_ratio[s])).abs() <= 0.05 + 1e-9);
            }
        }
    }
}
