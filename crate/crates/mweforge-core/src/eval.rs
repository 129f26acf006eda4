//! Strict MWE-based scoring, globally and on the seen/unseen partitions.
//!
//! A predicted instance counts as a true positive only when its token-
//! position set equals an unmatched gold instance's set exactly (categories
//! compared only in category-strict mode). A test instance is *unseen* when
//! the multiset of its component lemmas (lowercased) matches no annotated
//! instance in the reference corpus; the unseen scope restricts gold to the
//! unseen partition and predictions to those whose lemma multiset is itself
//! unseen. Scores across languages are averaged unweighted.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::cupt::{check_alignment, lemma_multiset, Corpus, MweInstance, Sentence};
use crate::diag::Diagnostic;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("corpora are misaligned: {0}")]
    Misaligned(String),
}

/// Strict-match totals. `tp + fn_` equals the gold instances in scope and
/// `tp + fp` the predicted instances in scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }

    pub fn merge(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

/// Precision, recall, F1 with every 0/0 case defined as 0.
pub fn prf(counts: &MatchCounts) -> (f64, f64, f64) {
    let tp = counts.tp as f64;
    let precision = if counts.tp + counts.fp == 0 {
        0.0
    } else {
        tp / (counts.tp + counts.fp) as f64
    };
    let recall = if counts.tp + counts.fn_ == 0 {
        0.0
    } else {
        tp / (counts.tp + counts.fn_) as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

fn match_key(mwe: &MweInstance, category_strict: bool) -> (Vec<usize>, Option<String>) {
    let mut positions = mwe.token_positions.clone();
    positions.sort_unstable();
    let cat = if category_strict {
        mwe.category.as_ref().map(|c| c.as_str().to_string())
    } else {
        None
    };
    (positions, cat)
}

/// Strict matching within one sentence: maximum one-to-one assignment on
/// identical keys (greedy multiset matching is exact because only equal keys
/// can ever match).
pub fn strict_match(
    gold: &[MweInstance],
    pred: &[MweInstance],
    category_strict: bool,
) -> MatchCounts {
    let mut available: HashMap<(Vec<usize>, Option<String>), usize> = HashMap::new();
    for g in gold {
        *available.entry(match_key(g, category_strict)).or_default() += 1;
    }
    let mut tp = 0;
    let mut fp = 0;
    for p in pred {
        let key = match_key(p, category_strict);
        match available.get_mut(&key) {
            Some(n) if *n > 0 => {
                *n -= 1;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    MatchCounts::new(tp, fp, gold.len() - tp)
}

/// Instance identifier within a corpus: (sentence index, index into `mwes`).
pub type InstanceRef = (usize, usize);

/// Gold instances split into seen and unseen by lemma multiset.
#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub seen: BTreeSet<InstanceRef>,
    pub unseen: BTreeSet<InstanceRef>,
}

/// Lemma multisets of every annotated instance in a reference corpus.
pub fn reference_inventory(
    reference: &Corpus,
    diagnostics: &mut Vec<Diagnostic>,
) -> HashSet<Vec<String>> {
    let mut inventory = HashSet::new();
    for sentence in &reference.sentences {
        for mwe in &sentence.mwes {
            inventory.insert(lemma_multiset(sentence, mwe, diagnostics));
        }
    }
    inventory
}

/// Splits the test corpus's gold instances into seen/unseen with respect to
/// the reference corpus (train, or train + dev, per the caller's choice).
pub fn unseen_partition(
    test: &Corpus,
    reference: &Corpus,
    diagnostics: &mut Vec<Diagnostic>,
) -> Partition {
    let inventory = reference_inventory(reference, diagnostics);
    let mut partition = Partition::default();
    for (si, sentence) in test.sentences.iter().enumerate() {
        for (mi, mwe) in sentence.mwes.iter().enumerate() {
            let key = lemma_multiset(sentence, mwe, diagnostics);
            if inventory.contains(&key) {
                partition.seen.insert((si, mi));
            } else {
                partition.unseen.insert((si, mi));
            }
        }
    }
    partition
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScopeScores {
    pub counts: MatchCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ScopeScores {
    pub fn from_counts(counts: MatchCounts) -> Self {
        let (precision, recall, f1) = prf(&counts);
        Self {
            counts,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub category_strict: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            category_strict: false,
        }
    }
}

/// Scores for one gold/pred corpus pair.
#[derive(Debug, Clone)]
pub struct LanguageEval {
    pub global: ScopeScores,
    pub seen: ScopeScores,
    pub unseen: ScopeScores,
    /// Sizes of the gold seen/unseen inventories.
    pub gold_seen: usize,
    pub gold_unseen: usize,
    pub diagnostics: Vec<Diagnostic>,
}

/// Scores `pred` against `gold`. The unseen scope restricts gold to the
/// unseen partition and predictions to instances whose lemma multiset is
/// unseen with respect to `reference`; the seen scope is the complement.
pub fn evaluate(
    gold: &Corpus,
    pred: &Corpus,
    reference: &Corpus,
    options: &EvalOptions,
) -> Result<LanguageEval, EvalError> {
    check_alignment(gold, pred).map_err(EvalError::Misaligned)?;

    let mut diagnostics = Vec::new();
    let inventory = reference_inventory(reference, &mut diagnostics);
    let partition = unseen_partition(gold, reference, &mut diagnostics);

    let mut global = MatchCounts::default();
    let mut seen = MatchCounts::default();
    let mut unseen = MatchCounts::default();

    for (si, (gs, ps)) in gold.sentences.iter().zip(&pred.sentences).enumerate() {
        global.merge(&strict_match(&gs.mwes, &ps.mwes, options.category_strict));

        let gold_seen: Vec<MweInstance> = gs
            .mwes
            .iter()
            .enumerate()
            .filter(|(mi, _)| partition.seen.contains(&(si, *mi)))
            .map(|(_, m)| m.clone())
            .collect();
        let gold_unseen: Vec<MweInstance> = gs
            .mwes
            .iter()
            .enumerate()
            .filter(|(mi, _)| partition.unseen.contains(&(si, *mi)))
            .map(|(_, m)| m.clone())
            .collect();

        let mut pred_seen = Vec::new();
        let mut pred_unseen = Vec::new();
        for mwe in &ps.mwes {
            let key = lemma_multiset(ps, mwe, &mut diagnostics);
            if inventory.contains(&key) {
                pred_seen.push(mwe.clone());
            } else {
                pred_unseen.push(mwe.clone());
            }
        }

        seen.merge(&strict_match(&gold_seen, &pred_seen, options.category_strict));
        unseen.merge(&strict_match(
            &gold_unseen,
            &pred_unseen,
            options.category_strict,
        ));
    }

    Ok(LanguageEval {
        global: ScopeScores::from_counts(global),
        seen: ScopeScores::from_counts(seen),
        unseen: ScopeScores::from_counts(unseen),
        gold_seen: partition.seen.len(),
        gold_unseen: partition.unseen.len(),
        diagnostics,
    })
}

/// Relative F1 change in percent: `100 * (new - baseline) / baseline`.
/// `None` when the baseline is not positive (undefined, reported as absent).
pub fn improvement_delta(baseline_f1: f64, new_f1: f64) -> Option<f64> {
    if baseline_f1 <= 0.0 {
        None
    } else {
        Some(100.0 * (new_f1 - baseline_f1) / baseline_f1)
    }
}

/// Per-language rows plus an unweighted average, rendered as aligned text
/// and as comma-separated values.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<(String, LanguageEval)>,
}

impl EvalReport {
    pub fn push(&mut self, language: impl Into<String>, eval: LanguageEval) {
        self.rows.push((language.into(), eval));
    }

    /// Unweighted arithmetic means of the per-language scores, per scope:
    /// (global P/R/F1, seen P/R/F1, unseen P/R/F1).
    pub fn average(&self) -> Option<[(f64, f64, f64); 3]> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mut acc = [(0.0, 0.0, 0.0); 3];
        for (_, eval) in &self.rows {
            for (slot, scores) in [&eval.global, &eval.seen, &eval.unseen].iter().enumerate() {
                acc[slot].0 += scores.precision;
                acc[slot].1 += scores.recall;
                acc[slot].2 += scores.f1;
            }
        }
        Some(acc.map(|(p, r, f)| (p / n, r / n, f / n)))
    }

    /// Aligned plain-text table: P, R, F1 columns for the global and unseen
    /// scopes, as percentages.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}\n",
            "Language", "P", "R", "F1", "P", "R", "F1"
        ));
        out.push_str(&format!(
            "{:<12} {:>26}   {:>26}\n",
            "", "Global MWE-Based", "Unseen MWE-Based"
        ));
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        for (lang, eval) in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}\n",
                lang,
                pct(eval.global.precision),
                pct(eval.global.recall),
                pct(eval.global.f1),
                pct(eval.unseen.precision),
                pct(eval.unseen.recall),
                pct(eval.unseen.f1),
            ));
        }
        if let Some([global, _seen, unseen]) = self.average() {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8}   {:>8} {:>8} {:>8}\n",
                "AVG",
                pct(global.0),
                pct(global.1),
                pct(global.2),
                pct(unseen.0),
                pct(unseen.1),
                pct(unseen.2),
            ));
        }
        for (lang, eval) in &self.rows {
            out.push_str(&format!(
                "# {lang}: gold seen {} / unseen {}\n",
                eval.gold_seen, eval.gold_unseen
            ));
        }
        out
    }

    /// Machine-readable rows: one line per (language, scope).
    pub fn render_csv(&self) -> String {
        let mut out = String::from("language,scope,tp,fp,fn,precision,recall,f1\n");
        for (lang, eval) in &self.rows {
            for (scope, scores) in [
                ("global", &eval.global),
                ("seen", &eval.seen),
                ("unseen", &eval.unseen),
            ] {
                out.push_str(&format!(
                    "{lang},{scope},{},{},{},{},{},{}\n",
                    scores.counts.tp,
                    scores.counts.fp,
                    scores.counts.fn_,
                    scores.precision,
                    scores.recall,
                    scores.f1
                ));
            }
        }
        out
    }
}

/// Builds a prediction corpus that mirrors `gold`'s sentences and tokens but
/// carries `instances[i]` as sentence i's annotations.
pub fn with_predictions(gold: &Corpus, instances: Vec<Vec<MweInstance>>) -> Corpus {
    assert_eq!(gold.sentences.len(), instances.len());
    let sentences = gold
        .sentences
        .iter()
        .zip(instances)
        .map(|(s, mwes)| {
            let mut out = Sentence {
                sentence_id: s.sentence_id.clone(),
                metadata_lines: s.metadata_lines.clone(),
                tokens: s.tokens.clone(),
                mwes,
                raw_lines: s.raw_lines.clone(),
            };
            out.canonical_renumber();
            out
        })
        .collect();
    Corpus { sentences }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cupt::{MweCategory, Token};

    fn inst(id: u32, positions: Vec<usize>) -> MweInstance {
        MweInstance::new(id, Some(MweCategory::Vid), positions)
    }

    #[test]
    fn exact_match_counts() {
        let c = strict_match(&[inst(1, vec![3, 5])], &[inst(1, vec![3, 5])], false);
        assert_eq!(c, MatchCounts::new(1, 0, 0));
    }

    #[test]
    fn partial_overlap_is_not_strict() {
        let c = strict_match(&[inst(1, vec![3, 5])], &[inst(1, vec![3])], false);
        assert_eq!(c, MatchCounts::new(0, 1, 1));
    }

    #[test]
    fn mixed_assignment() {
        let gold = [inst(1, vec![1, 2]), inst(2, vec![4, 6])];
        let pred = [inst(1, vec![1, 2]), inst(2, vec![4, 5])];
        let c = strict_match(&gold, &pred, false);
        assert_eq!(c, MatchCounts::new(1, 1, 1));
    }

    #[test]
    fn category_strict_mode_distinguishes_categories() {
        let gold = [MweInstance::new(1, Some(MweCategory::Vid), vec![1, 2])];
        let pred = [MweInstance::new(1, Some(MweCategory::LvcFull), vec![1, 2])];
        assert_eq!(strict_match(&gold, &pred, false), MatchCounts::new(1, 0, 0));
        assert_eq!(strict_match(&gold, &pred, true), MatchCounts::new(0, 1, 1));
    }

    #[test]
    fn prf_worked_examples() {
        assert_eq!(prf(&MatchCounts::new(7, 0, 0)), (1.0, 1.0, 1.0));
        let (p, r, f) = prf(&MatchCounts::new(2, 1, 2));
        assert!((p - 2.0 / 3.0).abs() < 1e-15);
        assert!((r - 0.5).abs() < 1e-15);
        assert!((f - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(prf(&MatchCounts::new(0, 0, 5)), (0.0, 0.0, 0.0));
        assert_eq!(prf(&MatchCounts::new(0, 0, 0)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn swapping_gold_and_pred_swaps_p_and_r() {
        let gold = [inst(1, vec![1, 2]), inst(2, vec![4]), inst(3, vec![6, 8])];
        let pred = [inst(1, vec![1, 2]), inst(2, vec![5])];
        let ab = prf(&strict_match(&gold, &pred, false));
        let ba = prf(&strict_match(&pred, &gold, false));
        assert_eq!(ab.0, ba.1);
        assert_eq!(ab.1, ba.0);
        assert!((ab.2 - ba.2).abs() < 1e-15);
    }

    #[test]
    fn removing_errors_never_hurts() {
        let base = MatchCounts::new(3, 2, 4);
        let fewer_fp = MatchCounts::new(3, 1, 4);
        let fewer_fn = MatchCounts::new(3, 2, 3);
        assert!(prf(&fewer_fp).0 >= prf(&base).0);
        assert!(prf(&fewer_fn).1 >= prf(&base).1);
    }

    fn sentence_with(forms: &[&str], mwes: Vec<MweInstance>) -> Sentence {
        let mut s = Sentence {
            sentence_id: format!("s-{}", forms.join("-")),
            metadata_lines: vec![],
            tokens: forms
                .iter()
                .enumerate()
                .map(|(i, f)| Token::new(i + 1, f, f, "NOUN"))
                .collect(),
            mwes,
            raw_lines: vec![],
        };
        s.sync_cells();
        s
    }

    #[test]
    fn unseen_partition_by_lemma_multiset() {
        let train = Corpus {
            sentences: vec![sentence_with(&["face", "o", "vizita"], vec![inst(1, vec![1, 3])])],
        };
        // Same lemmas, different order and positions: still seen.
        let test = Corpus {
            sentences: vec![
                sentence_with(&["vizita", "nu", "face"], vec![inst(1, vec![1, 3])]),
                sentence_with(&["alt", "ceva"], vec![inst(1, vec![1, 2])]),
            ],
        };
        let mut diags = Vec::new();
        let partition = unseen_partition(&test, &train, &mut diags);
        assert!(partition.seen.contains(&(0, 0)));
        assert!(partition.unseen.contains(&(1, 0)));
        assert_eq!(partition.seen.len() + partition.unseen.len(), 2);
    }

    #[test]
    fn missing_lemma_falls_back_to_form_with_diagnostic() {
        let mut s = sentence_with(&["Vorbe"], vec![inst(1, vec![1])]);
        s.tokens[0].lemma = "_".to_string();
        let corpus = Corpus { sentences: vec![s] };
        let mut diags = Vec::new();
        let inventory = reference_inventory(&corpus, &mut diags);
        assert!(inventory.contains(&vec!["vorbe".to_string()]));
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn evaluate_perfect_and_empty_predictions() {
        let gold = Corpus {
            sentences: vec![
                sentence_with(&["a", "b", "c"], vec![inst(1, vec![1, 2])]),
                sentence_with(&["d", "e"], vec![inst(1, vec![2])]),
            ],
        };
        let train = Corpus {
            sentences: vec![sentence_with(&["a", "b"], vec![inst(1, vec![1, 2])])],
        };

        let perfect = evaluate(&gold, &gold, &train, &EvalOptions::default()).unwrap();
        assert_eq!(perfect.global.f1, 1.0);
        assert_eq!(perfect.unseen.f1, 1.0);
        assert_eq!(perfect.gold_seen, 1);
        assert_eq!(perfect.gold_unseen, 1);

        let empty = with_predictions(&gold, vec![vec![], vec![]]);
        let none = evaluate(&gold, &empty, &train, &EvalOptions::default()).unwrap();
        assert_eq!(none.global.precision, 0.0);
        assert_eq!(none.global.recall, 0.0);
        assert_eq!(none.global.f1, 0.0);
    }

    #[test]
    fn evaluate_rejects_misaligned_corpora() {
        let gold = Corpus {
            sentences: vec![sentence_with(&["a", "b"], vec![])],
        };
        let pred = Corpus {
            sentences: vec![sentence_with(&["a", "b", "c"], vec![])],
        };
        let err = evaluate(&gold, &pred, &gold, &EvalOptions::default()).unwrap_err();
        assert!(err.to_string().contains("divergent"));
    }

    #[test]
    fn improvement_delta_examples() {
        let d = improvement_delta(30.07, 43.70).unwrap();
        assert!((d - 45.33).abs() < 0.05, "delta {d}");
        let d = improvement_delta(19.54, 37.28).unwrap();
        assert!((d - 90.79).abs() < 0.05, "delta {d}");
        assert_eq!(improvement_delta(50.0, 50.0), Some(0.0));
        assert_eq!(improvement_delta(0.0, 10.0), None);
    }

    #[test]
    fn report_average_is_unweighted() {
        let gold = Corpus {
            sentences: vec![sentence_with(&["a", "b"], vec![inst(1, vec![1, 2])])],
        };
        let eval = evaluate(&gold, &gold, &gold, &EvalOptions::default()).unwrap();
        let mut report = EvalReport::default();
        report.push("x", eval.clone());
        report.push("y", eval);
        let [global, _, _] = report.average().unwrap();
        assert_eq!(global.2, 1.0);
        let text = report.render_text();
        assert!(text.contains("AVG"));
        let csv = report.render_csv();
        assert!(csv.starts_with("language,scope,tp,fp,fn,precision,recall,f1\n"));
        assert!(csv.contains("x,global,1,0,0,1,1,1"));
    }
}
