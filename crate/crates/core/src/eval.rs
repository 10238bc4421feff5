//! Evaluation strategies and metrics.
//!
//! Scoring runs over canonical labels: free-text conclusions are mapped
//! onto a [`LabelSet`] by whole-word matching, k-trajectory answer lists
//! are reduced by majority vote or best-of-k membership, and the resulting
//! predictions feed a multi-class confusion matrix. Reported metrics are
//! accuracy, macro one-vs-rest sensitivity/specificity, and the
//! micro/macro/weighted F1 and AUC families. AUC uses the rank statistic
//! (ties count one half), which matches the pairwise positive-vs-negative
//! comparison exactly.
//!
//! Abstentions (conclusions that map to no label, or to several) score as
//! incorrect for accuracy and sensitivity but never contribute false
//! positives.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Question;

/// Canonical labels plus case-insensitive aliases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    labels: Vec<String>,
    aliases: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("label set invalid: {0}")]
    BadLabelSet(String),
    #[error("answer list is empty")]
    EmptyList,
    #[error("prediction and gold lists differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("gold label {0:?} is not in the label set")]
    UnknownGold(String),
    #[error("dataset line {line}: {detail}")]
    SchemaViolation { line: usize, detail: String },
}

impl LabelSet {
    pub fn new(
        labels: impl IntoIterator<Item = impl Into<String>>,
        aliases: impl IntoIterator<Item = (impl Into<String>, impl Into<String>)>,
    ) -> Result<Self, EvalError> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = std::collections::BTreeSet::new();
        for label in &labels {
            if label.trim().is_empty() {
                return Err(EvalError::BadLabelSet("empty label".into()));
            }
            if !seen.insert(label.to_lowercase()) {
                return Err(EvalError::BadLabelSet(format!("duplicate label {label:?}")));
            }
        }
        let mut alias_map = BTreeMap::new();
        for (alias, target) in aliases {
            let alias = alias.into();
            let target = target.into();
            if !labels.iter().any(|l| *l == target) {
                return Err(EvalError::BadLabelSet(format!(
                    "alias {alias:?} targets unknown label {target:?}"
                )));
            }
            alias_map.insert(alias.to_lowercase(), target);
        }
        Ok(Self { labels, aliases: alias_map })
    }

    pub fn from_question(question: &Question) -> Result<Self, EvalError> {
        Self::new(
            question.label_set.iter().cloned(),
            question.aliases.iter().map(|(a, c)| (a.clone(), c.clone())),
        )
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A trajectory's conclusion mapped onto the label set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizedAnswer {
    Label(String),
    Abstain,
}

impl NormalizedAnswer {
    pub fn label(&self) -> Option<&str> {
        match self {
            NormalizedAnswer::Label(l) => Some(l),
            NormalizedAnswer::Abstain => None,
        }
    }
}

/// True when `needle` occurs in lowercase `hay` bounded by non-alphanumeric
/// characters (or the string edges).
fn whole_word_match(hay: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut start = 0;
    while let Some(rel) = hay[start..].find(needle) {
        let pos = start + rel;
        let end = pos + needle.len();
        let left_ok = pos == 0
            || !hay[..pos]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        let right_ok = end == hay.len()
            || !hay[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
        if left_ok && right_ok {
            return true;
        }
        start = pos + 1;
    }
    false
}

/// Map a free-text conclusion onto the label set: a case-insensitive
/// whole-word match of exactly one distinct canonical label (directly or
/// via alias) names that label; zero or several distinct matches abstain.
pub fn normalize_answer(answer: &str, labels: &LabelSet) -> NormalizedAnswer {
    let hay = answer.to_lowercase();
    let mut matched: Option<&str> = None;
    let mut candidates: Vec<(String, &str)> = labels
        .labels
        .iter()
        .map(|l| (l.to_lowercase(), l.as_str()))
        .collect();
    candidates.extend(
        labels
            .aliases
            .iter()
            .map(|(alias, target)| (alias.clone(), target.as_str())),
    );
    for (needle, canonical) in &candidates {
        if whole_word_match(&hay, needle) {
            match matched {
                None => matched = Some(canonical),
                Some(existing) if existing == *canonical => {}
                Some(_) => return NormalizedAnswer::Abstain,
            }
        }
    }
    match matched {
        Some(label) => NormalizedAnswer::Label(label.to_string()),
        None => NormalizedAnswer::Abstain,
    }
}

/// Plurality vote over non-abstain answers. Ties break toward the label
/// whose first occurrence has the lowest trajectory index; an all-abstain
/// list abstains.
pub fn majority_at_k(answers: &[NormalizedAnswer]) -> Result<NormalizedAnswer, EvalError> {
    if answers.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new(); // label -> (count, first index)
    for (i, answer) in answers.iter().enumerate() {
        if let Some(label) = answer.label() {
            let entry = counts.entry(label).or_insert((0, i));
            entry.0 += 1;
        }
    }
    let winner = counts
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(label, _)| label.to_string());
    Ok(match winner {
        Some(label) => NormalizedAnswer::Label(label),
        None => NormalizedAnswer::Abstain,
    })
}

/// Best-of-k: true iff the gold label appears among the answers.
pub fn best_at_k(answers: &[NormalizedAnswer], gold: &str) -> bool {
    answers.iter().any(|a| a.label() == Some(gold))
}

/// Multi-class confusion counts; rows are gold, columns predicted.
/// Abstentions are tallied per gold label outside the matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub abstain: Vec<usize>,
}

impl ConfusionMatrix {
    /// Total scored cases, abstentions included.
    pub fn total(&self) -> usize {
        let matrix: usize = self.counts.iter().flatten().sum();
        matrix + self.abstain.iter().sum::<usize>()
    }

    pub fn trace(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    fn gold_count(&self, i: usize) -> usize {
        self.counts[i].iter().sum::<usize>() + self.abstain[i]
    }

    fn predicted_count(&self, j: usize) -> usize {
        self.counts.iter().map(|row| row[j]).sum()
    }

    /// Per-label one-vs-rest counts. Abstained gold-l cases count as missed
    /// (false negatives) but never as false positives anywhere.
    pub fn per_label_counts(&self) -> Vec<LabelCounts> {
        (0..self.labels.len())
            .map(|i| {
                let tp = self.counts[i][i];
                let support = self.gold_count(i);
                let fp = self.predicted_count(i) - tp;
                let fn_ = support - tp;
                let tn = self.total() - support - fp;
                LabelCounts {
                    label: self.labels[i].clone(),
                    tp,
                    fp,
                    fn_,
                    tn,
                    support,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub support: usize,
}

/// Build a confusion matrix from aligned prediction/gold lists.
pub fn confusion(
    preds: &[NormalizedAnswer],
    golds: &[String],
    labels: &LabelSet,
) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    let n = labels.labels().len();
    let mut counts = vec![vec![0usize; n]; n];
    let mut abstain = vec![0usize; n];
    for (pred, gold) in preds.iter().zip(golds) {
        let g = labels
            .index_of(gold)
            .ok_or_else(|| EvalError::UnknownGold(gold.clone()))?;
        match pred {
            NormalizedAnswer::Label(p) => {
                let p = labels
                    .index_of(p)
                    .ok_or_else(|| EvalError::UnknownGold(p.clone()))?;
                counts[g][p] += 1;
            }
            NormalizedAnswer::Abstain => abstain[g] += 1,
        }
    }
    Ok(ConfusionMatrix {
        labels: labels.labels().to_vec(),
        counts,
        abstain,
    })
}

/// Accuracy plus macro one-vs-rest sensitivity and specificity. Classes
/// whose denominator is empty (no gold instances for SEN, no negatives for
/// SPE) are left out of the corresponding mean.
pub fn macro_metrics(matrix: &ConfusionMatrix) -> Result<MacroMetrics, EvalError> {
    let total = matrix.total();
    if total == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let accuracy = matrix.trace() as f64 / total as f64;
    let mut sens = Vec::new();
    let mut specs = Vec::new();
    for counts in matrix.per_label_counts() {
        if counts.tp + counts.fn_ > 0 {
            sens.push(counts.tp as f64 / (counts.tp + counts.fn_) as f64);
        }
        if counts.tn + counts.fp > 0 {
            specs.push(counts.tn as f64 / (counts.tn + counts.fp) as f64);
        }
    }
    Ok(MacroMetrics {
        accuracy,
        sensitivity_macro: mean(&sens),
        specificity_macro: mean(&specs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub sensitivity_macro: Option<f64>,
    pub specificity_macro: Option<f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn f1_from(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Suite {
    pub micro: f64,
    pub macro_: f64,
    pub weighted: f64,
}

/// Micro, macro, and support-weighted F1 from per-label counts. Labels with
/// no activity (TP+FP+FN = 0) contribute an F1 of zero to the macro mean.
pub fn f1_suite(per_label: &[LabelCounts]) -> F1Suite {
    let tp: usize = per_label.iter().map(|c| c.tp).sum();
    let fp: usize = per_label.iter().map(|c| c.fp).sum();
    let fn_: usize = per_label.iter().map(|c| c.fn_).sum();
    let micro = f1_from(tp, fp, fn_);
    let f1s: Vec<f64> = per_label.iter().map(|c| f1_from(c.tp, c.fp, c.fn_)).collect();
    let macro_ = if f1s.is_empty() {
        0.0
    } else {
        f1s.iter().sum::<f64>() / f1s.len() as f64
    };
    let support_total: usize = per_label.iter().map(|c| c.support).sum();
    let weighted = if support_total == 0 {
        0.0
    } else {
        per_label
            .iter()
            .zip(&f1s)
            .map(|(c, f1)| c.support as f64 * f1)
            .sum::<f64>()
            / support_total as f64
    };
    F1Suite { micro, macro_, weighted }
}

/// One scored case: a per-label score vector in [0,1] (vote fractions) and
/// per-label binary gold. Single-label tasks use a one-hot gold row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    pub scores: Vec<f64>,
    pub gold: Vec<bool>,
}

/// AUC of one score column via the Mann-Whitney rank statistic; ties get
/// half credit. `None` when either class is absent.
pub fn auc_binary(scores: &[f64], golds: &[bool]) -> Option<f64> {
    let positives = golds.iter().filter(|&&g| g).count();
    let negatives = golds.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // Average ranks across tied scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if golds[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AucSuite {
    pub micro: Option<f64>,
    pub macro_: Option<f64>,
    pub weighted: Option<f64>,
}

/// Micro, macro, and positive-support-weighted AUC over scored cases.
///
/// Macro and weighted average the per-label AUCs of labels that have at
/// least one positive and one negative; micro pools every (case, label)
/// pair, single-class labels included.
pub fn auc_suite(scored: &[ScoredPrediction], n_labels: usize) -> AucSuite {
    let mut per_label = Vec::new();
    let mut weights = Vec::new();
    let mut pooled_scores = Vec::new();
    let mut pooled_golds = Vec::new();
    for label in 0..n_labels {
        let scores: Vec<f64> = scored.iter().map(|s| s.scores[label]).collect();
        let golds: Vec<bool> = scored.iter().map(|s| s.gold[label]).collect();
        pooled_scores.extend_from_slice(&scores);
        pooled_golds.extend_from_slice(&golds);
        if let Some(auc) = auc_binary(&scores, &golds) {
            per_label.push(auc);
            weights.push(golds.iter().filter(|&&g| g).count() as f64);
        }
    }
    let macro_ = mean(&per_label);
    let weight_total: f64 = weights.iter().sum();
    let weighted = if per_label.is_empty() || weight_total == 0.0 {
        None
    } else {
        Some(
            per_label
                .iter()
                .zip(&weights)
                .map(|(auc, w)| auc * w)
                .sum::<f64>()
                / weight_total,
        )
    };
    AucSuite {
        micro: auc_binary(&pooled_scores, &pooled_golds),
        macro_,
        weighted,
    }
}

/// Full metrics row for one evaluation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity_macro: Option<f64>,
    pub specificity_macro: Option<f64>,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub auc_micro: Option<f64>,
    pub auc_macro: Option<f64>,
    pub auc_weighted: Option<f64>,
    pub n_cases: usize,
    pub n_abstain: usize,
}

impl MetricsReport {
    pub fn from_parts(
        matrix: &ConfusionMatrix,
        scored: &[ScoredPrediction],
    ) -> Result<Self, EvalError> {
        let macros = macro_metrics(matrix)?;
        let per_label = matrix.per_label_counts();
        let f1 = f1_suite(&per_label);
        let auc = auc_suite(scored, matrix.labels.len());
        Ok(Self {
            accuracy: macros.accuracy,
            sensitivity_macro: macros.sensitivity_macro,
            specificity_macro: macros.specificity_macro,
            f1_micro: f1.micro,
            f1_macro: f1.macro_,
            f1_weighted: f1.weighted,
            auc_micro: auc.micro,
            auc_macro: auc.macro_,
            auc_weighted: auc.weighted,
            n_cases: matrix.total(),
            n_abstain: matrix.abstain.iter().sum(),
        })
    }
}

/// Fixed column order for the plain-text report table.
pub const REPORT_COLUMNS: [&str; 9] = [
    "ACC", "SEN", "SPE", "F1-micro", "F1-macro", "F1-weighted", "AUC-micro", "AUC-macro",
    "AUC-weighted",
];

fn fmt_rate(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Render strategy rows as an aligned plain-text table.
pub fn render_report_table(rows: &[(String, MetricsReport)]) -> String {
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["strategy".to_string()];
    header.extend(REPORT_COLUMNS.iter().map(|c| c.to_string()));
    header.push("cases".into());
    header.push("abstain".into());
    table.push(header);
    for (name, report) in rows {
        table.push(vec![
            name.clone(),
            fmt_rate(Some(report.accuracy)),
            fmt_rate(report.sensitivity_macro),
            fmt_rate(report.specificity_macro),
            fmt_rate(Some(report.f1_micro)),
            fmt_rate(Some(report.f1_macro)),
            fmt_rate(Some(report.f1_weighted)),
            fmt_rate(report.auc_micro),
            fmt_rate(report.auc_macro),
            fmt_rate(report.auc_weighted),
            report.n_cases.to_string(),
            report.n_abstain.to_string(),
        ]);
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|col| table.iter().map(|row| row[col].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, width)| format!("{cell:<width$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Load a line-delimited JSON dataset of questions, validating that ids are
/// unique and gold labels belong to their label sets.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Question>, EvalError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| EvalError::SchemaViolation {
        line: 0,
        detail: format!("cannot open {}: {e}", path.as_ref().display()),
    })?;
    let mut questions = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| EvalError::SchemaViolation {
            line: line_no,
            detail: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let question: Question =
            serde_json::from_str(&line).map_err(|e| EvalError::SchemaViolation {
                line: line_no,
                detail: e.to_string(),
            })?;
        if !seen.insert(question.id.clone()) {
            return Err(EvalError::SchemaViolation {
                line: line_no,
                detail: format!("duplicate question id {:?}", question.id),
            });
        }
        if let Some(gold) = &question.gold {
            if !question.label_set.contains(gold) {
                return Err(EvalError::SchemaViolation {
                    line: line_no,
                    detail: format!("gold {gold:?} not in label_set"),
                });
            }
        }
        LabelSet::from_question(&question).map_err(|e| EvalError::SchemaViolation {
            line: line_no,
            detail: e.to_string(),
        })?;
        questions.push(question);
    }
    Ok(questions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> LabelSet {
        LabelSet::new(["AD", "MCI", "NC"], Vec::<(String, String)>::new()).unwrap()
    }

    fn lab(s: &str) -> NormalizedAnswer {
        NormalizedAnswer::Label(s.into())
    }

    #[test]
    fn normalize_matches_single_label() {
        assert_eq!(
            normalize_answer("the most likely diagnosis is AD", &labels()),
            lab("AD")
        );
    }

    #[test]
    fn normalize_abstains_on_ambiguity() {
        assert_eq!(
            normalize_answer("could be AD or MCI", &labels()),
            NormalizedAnswer::Abstain
        );
        assert_eq!(
            normalize_answer("inconclusive", &labels()),
            NormalizedAnswer::Abstain
        );
    }

    #[test]
    fn normalize_resolves_aliases() {
        let labels = LabelSet::new(["AD", "MCI", "NC"], [("alzheimer's disease", "AD")]).unwrap();
        assert_eq!(normalize_answer("signs of alzheimer's disease", &labels), lab("AD"));
        // Alias and canonical pointing at the same label stay unambiguous.
        assert_eq!(
            normalize_answer("AD, i.e. alzheimer's disease", &labels),
            lab("AD")
        );
    }

    #[test]
    fn normalize_requires_word_boundaries() {
        assert_eq!(
            normalize_answer("ADNI cohort mentioned, no diagnosis", &labels()),
            NormalizedAnswer::Abstain
        );
        assert_eq!(normalize_answer("verdict: ad.", &labels()), lab("AD"));
    }

    #[test]
    fn majority_takes_plurality() {
        let answers = vec![lab("AD"), lab("AD"), lab("MCI"), lab("NC"), lab("AD")];
        assert_eq!(majority_at_k(&answers).unwrap(), lab("AD"));
    }

    #[test]
    fn majority_ties_break_by_earliest_index() {
        assert_eq!(majority_at_k(&[lab("AD"), lab("MCI")]).unwrap(), lab("AD"));
        assert_eq!(
            majority_at_k(&[
                NormalizedAnswer::Abstain,
                lab("MCI"),
                lab("AD"),
                lab("AD"),
                lab("MCI")
            ])
            .unwrap(),
            lab("MCI")
        );
    }

    #[test]
    fn majority_of_abstains_abstains() {
        assert_eq!(
            majority_at_k(&[NormalizedAnswer::Abstain, NormalizedAnswer::Abstain]).unwrap(),
            NormalizedAnswer::Abstain
        );
        assert_eq!(majority_at_k(&[]).unwrap_err(), EvalError::EmptyList);
    }

    #[test]
    fn best_at_k_is_membership() {
        assert!(best_at_k(&[lab("MCI"), lab("AD"), lab("NC")], "AD"));
        assert!(!best_at_k(&[lab("MCI"), lab("NC")], "AD"));
        assert!(best_at_k(&[lab("AD")], "AD"));
    }

    fn six_case_matrix() -> ConfusionMatrix {
        let labels = LabelSet::new(["A", "B", "C"], Vec::<(String, String)>::new()).unwrap();
        let golds: Vec<String> = ["A", "A", "B", "B", "C", "C"].iter().map(|s| s.to_string()).collect();
        let preds = vec![lab("A"), lab("B"), lab("B"), lab("B"), lab("C"), lab("A")];
        confusion(&preds, &golds, &labels).unwrap()
    }

    #[test]
    fn confusion_counts_pairs() {
        let matrix = six_case_matrix();
        assert_eq!(matrix.counts[0], vec![1, 1, 0]);
        assert_eq!(matrix.counts[1], vec![0, 2, 0]);
        assert_eq!(matrix.counts[2], vec![1, 0, 1]);
        assert_eq!(matrix.abstain, vec![0, 0, 0]);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let labels = LabelSet::new(["A", "B"], Vec::<(String, String)>::new()).unwrap();
        let golds = vec!["A".to_string(), "B".to_string()];
        let preds = vec![lab("A"), lab("B")];
        let matrix = confusion(&preds, &golds, &labels).unwrap();
        assert_eq!(matrix.trace(), 2);
        let macros = macro_metrics(&matrix).unwrap();
        assert_eq!(macros.accuracy, 1.0);
        assert_eq!(macros.sensitivity_macro, Some(1.0));
        assert_eq!(macros.specificity_macro, Some(1.0));
    }

    #[test]
    fn abstains_reduce_the_matrix_but_not_the_total() {
        let labels = LabelSet::new(["A", "B"], Vec::<(String, String)>::new()).unwrap();
        let golds = vec!["A".to_string(), "B".to_string()];
        let preds = vec![NormalizedAnswer::Abstain, lab("B")];
        let matrix = confusion(&preds, &golds, &labels).unwrap();
        assert_eq!(matrix.counts.iter().flatten().sum::<usize>(), 1);
        assert_eq!(matrix.total(), 2);
        let macros = macro_metrics(&matrix).unwrap();
        assert_eq!(macros.accuracy, 0.5);
    }

    #[test]
    fn macro_metrics_match_hand_counts() {
        // Oracle: per-class one-vs-rest counting on the six-case example.
        // A: TP 1, FN 1, FP 1, TN 3 -> SEN 0.5,  SPE 0.75
        // B: TP 2, FN 0, FP 1, TN 3 -> SEN 1.0,  SPE 0.75
        // C: TP 1, FN 1, FP 0, TN 4 -> SEN 0.5,  SPE 1.0
        let matrix = six_case_matrix();
        let macros = macro_metrics(&matrix).unwrap();
        assert!((macros.accuracy - 4.0 / 6.0).abs() < 1e-12);
        assert!((macros.sensitivity_macro.unwrap() - (0.5 + 1.0 + 0.5) / 3.0).abs() < 1e-12);
        assert!((macros.specificity_macro.unwrap() - (0.75 + 0.75 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gold_classes_leave_the_sen_mean() {
        let labels = LabelSet::new(["A", "B", "C"], Vec::<(String, String)>::new()).unwrap();
        let golds = vec!["A".to_string(), "A".to_string()];
        let preds = vec![lab("A"), lab("B")];
        let matrix = confusion(&preds, &golds, &labels).unwrap();
        let macros = macro_metrics(&matrix).unwrap();
        // Only class A has gold instances: SEN = 1/2.
        assert_eq!(macros.sensitivity_macro, Some(0.5));
    }

    #[test]
    fn f1_suite_matches_direct_formula() {
        // L1: TP=1 FP=0 FN=1 -> F1 = 2/3; L2: TP=1 FP=1 FN=0 -> F1 = 2/3.
        // Micro: TP=2 FP=1 FN=1 -> 2*2/(4+1+1) = 2/3. Supports (2,1).
        let per_label = vec![
            LabelCounts { label: "L1".into(), tp: 1, fp: 0, fn_: 1, tn: 1, support: 2 },
            LabelCounts { label: "L2".into(), tp: 1, fp: 1, fn_: 0, tn: 1, support: 1 },
        ];
        let f1 = f1_suite(&per_label);
        assert!((f1.micro - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1.macro_ - 2.0 / 3.0).abs() < 1e-12);
        assert!((f1.weighted - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_conventions_for_degenerate_inputs() {
        let zero = vec![LabelCounts { label: "L".into(), tp: 0, fp: 0, fn_: 0, tn: 0, support: 0 }];
        let f1 = f1_suite(&zero);
        assert_eq!((f1.micro, f1.macro_, f1.weighted), (0.0, 0.0, 0.0));
        let single = vec![LabelCounts { label: "L".into(), tp: 3, fp: 1, fn_: 2, tn: 0, support: 5 }];
        let f1 = f1_suite(&single);
        assert_eq!(f1.micro, f1.macro_);
        assert_eq!(f1.micro, f1.weighted);
    }

    #[test]
    fn auc_handles_perfect_inverted_and_tied_rankings() {
        assert_eq!(
            auc_binary(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]),
            Some(1.0)
        );
        assert_eq!(auc_binary(&[0.4, 0.6], &[true, false]), Some(0.0));
        assert_eq!(auc_binary(&[0.8, 0.8], &[true, false]), Some(0.5));
        assert_eq!(auc_binary(&[0.8, 0.8], &[true, true]), None);
    }

    /// O(P*N) pairwise oracle with half credit for ties.
    fn auc_pairwise(scores: &[f64], golds: &[bool]) -> Option<f64> {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &gi) in golds.iter().enumerate() {
            if !gi {
                continue;
            }
            for (j, &gj) in golds.iter().enumerate() {
                if gj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        if pairs == 0.0 {
            None
        } else {
            Some(wins / pairs)
        }
    }

    #[test]
    fn rank_auc_equals_pairwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(2..40);
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let golds: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let fast = auc_binary(&scores, &golds);
            let slow = auc_pairwise(&scores, &golds);
            match (fast, slow) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.gen_range(3..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let golds: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            assert_eq!(auc_binary(&scores, &golds), auc_binary(&transformed, &golds));
        }
    }

    #[test]
    fn auc_suite_skips_single_class_labels_in_macro_but_pools_them() {
        // Label 0 has both classes, label 1 is all-negative.
        let scored = vec![
            ScoredPrediction { scores: vec![0.9, 0.1], gold: vec![true, false] },
            ScoredPrediction { scores: vec![0.2, 0.3], gold: vec![false, false] },
        ];
        let suite = auc_suite(&scored, 2);
        assert_eq!(suite.macro_, Some(1.0));
        assert_eq!(suite.weighted, Some(1.0));
        // Pooled: scores [0.9, 0.2, 0.1, 0.3], golds [1, 0, 0, 0] -> 0.9 tops all.
        assert_eq!(suite.micro, Some(1.0));
    }

    #[test]
    fn micro_f1_equals_accuracy_without_abstains() {
        use rand::{Rng, SeedableRng};
        let labels = LabelSet::new(["A", "B", "C"], Vec::<(String, String)>::new()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let golds: Vec<String> = (0..n)
                .map(|_| labels.labels()[rng.gen_range(0..3)].clone())
                .collect();
            let preds: Vec<NormalizedAnswer> = (0..n)
                .map(|_| lab(&labels.labels()[rng.gen_range(0..3)]))
                .collect();
            let matrix = confusion(&preds, &golds, &labels).unwrap();
            let macros = macro_metrics(&matrix).unwrap();
            let f1 = f1_suite(&matrix.per_label_counts());
            assert!((f1.micro - macros.accuracy).abs() < 1e-12);
        }
    }

    #[test]
    fn report_table_uses_fixed_column_order() {
        let report = MetricsReport {
            accuracy: 0.5,
            sensitivity_macro: Some(0.25),
            specificity_macro: None,
            f1_micro: 0.5,
            f1_macro: 0.25,
            f1_weighted: 0.375,
            auc_micro: Some(0.9),
            auc_macro: None,
            auc_weighted: None,
            n_cases: 4,
            n_abstain: 1,
        };
        let table = render_report_table(&[("best@1".into(), report)]);
        let header = table.lines().next().unwrap();
        let mut last = 0;
        for column in REPORT_COLUMNS {
            let pos = header.find(column).unwrap();
            assert!(pos >= last, "column {column} out of order");
            last = pos;
        }
        assert!(table.contains("0.2500"));
        assert!(table.contains('-'));
    }

    #[test]
    fn dataset_loading_validates_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"q1\",\"text\":\"t\",\"label_set\":[\"A\",\"B\"],\"gold\":\"A\"}\n",
                "{\"id\":\"q2\",\"text\":\"t\",\"label_set\":[\"A\",\"B\"],\"gold\":\"B\"}\n",
                "{\"id\":\"q3\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"A\"}\n",
            ),
        )
        .unwrap();
        assert_eq!(load_dataset(&path).unwrap().len(), 3);

        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"Z\"}\n",
        )
        .unwrap();
        match load_dataset(&path).unwrap_err() {
            EvalError::SchemaViolation { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }

        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"dup\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"A\"}\n",
                "{\"id\":\"dup\",\"text\":\"t\",\"label_set\":[\"A\"],\"gold\":\"A\"}\n",
            ),
        )
        .unwrap();
        match load_dataset(&path).unwrap_err() {
            EvalError::SchemaViolation { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
