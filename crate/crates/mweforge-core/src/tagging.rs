//! Span annotations <-> per-token label sequences.
//!
//! The label alphabet is IOB with per-category suffixes plus a gap label:
//! `O`, `o-` (token inside a discontinuous expression's gap), `B-<cat>`,
//! `I-<cat>`, and bare `B`/`I` for instances that carry no category. A flat
//! sequence cannot express overlapping instances; encoding keeps the
//! instance with the earlier first token (ties to the longer span) and drops
//! the rest, reporting each drop as a diagnostic.

use std::collections::{BTreeSet, HashMap};

use thiserror::Error;

use crate::cupt::{MweCategory, MweInstance, Sentence};
use crate::diag::Diagnostic;

pub const LABEL_OUTSIDE: &str = "O";
pub const LABEL_GAP: &str = "o-";

/// One label per syntactic word.
pub type TagSequence = Vec<String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TagError {
    #[error("position {position}: inside label {label:?} with no open expression")]
    OrphanInside { position: usize, label: String },
    #[error("position {position}: gap label with no open expression")]
    DanglingGap { position: usize },
    #[error("position {position}: unknown label {label:?}")]
    UnknownLabel { position: usize, label: String },
}

/// How [`decode_tags`] treats ill-formed sequences: `Strict` rejects them,
/// `Tolerant` repairs an orphan inside-label by opening a new instance there
/// and ignores stray gap labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Strict,
    Tolerant,
}

pub fn begin_label(category: Option<&MweCategory>) -> String {
    match category {
        Some(cat) => format!("B-{}", cat.as_str()),
        None => "B".to_string(),
    }
}

pub fn inside_label(category: Option<&MweCategory>) -> String {
    match category {
        Some(cat) => format!("I-{}", cat.as_str()),
        None => "I".to_string(),
    }
}

enum ParsedLabel {
    Outside,
    Gap,
    Begin(Option<MweCategory>),
    Inside(Option<MweCategory>),
}

fn parse_label(label: &str) -> Option<ParsedLabel> {
    match label {
        LABEL_OUTSIDE => Some(ParsedLabel::Outside),
        LABEL_GAP => Some(ParsedLabel::Gap),
        "B" => Some(ParsedLabel::Begin(None)),
        "I" => Some(ParsedLabel::Inside(None)),
        _ => {
            if let Some(cat) = label.strip_prefix("B-") {
                Some(ParsedLabel::Begin(Some(MweCategory::parse(cat))))
            } else {
                label
                    .strip_prefix("I-")
                    .map(|cat| ParsedLabel::Inside(Some(MweCategory::parse(cat))))
            }
        }
    }
}

/// Deterministic label alphabet for a category set: `O`, `o-`, then a
/// `B-`/`I-` pair per category in lexicographic order. Index 0 is always `O`.
pub fn label_vocabulary(categories: &BTreeSet<String>) -> Vec<String> {
    let mut labels = vec![LABEL_OUTSIDE.to_string(), LABEL_GAP.to_string()];
    for cat in categories {
        labels.push(format!("B-{cat}"));
        labels.push(format!("I-{cat}"));
    }
    labels
}

/// Label alphabet with a stable index per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new(labels: Vec<String>) -> Self {
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Self { labels, index }
    }

    /// Vocabulary for a category set, optionally extended with the bare
    /// `B`/`I` pair used by uncategorized instances.
    pub fn for_categories(categories: &BTreeSet<String>, with_uncategorized: bool) -> Self {
        let mut labels = label_vocabulary(categories);
        if with_uncategorized {
            labels.push("B".to_string());
            labels.push("I".to_string());
        }
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }
}

/// Encodes a sentence's annotations into one label per token.
///
/// Deterministic: instances are considered by (first token, longer span
/// first); an instance is kept only if the sequence still decodes back to
/// exactly the kept set. Dropped instances are reported, one diagnostic
/// each, and `decode_tags(encode_tags(s))` recovers the kept set exactly.
pub fn encode_tags(sentence: &Sentence) -> (TagSequence, Vec<Diagnostic>) {
    let n = sentence.tokens.len();
    let mut diagnostics = Vec::new();

    let mut candidates: Vec<&MweInstance> = sentence.mwes.iter().collect();
    candidates.sort_by(|a, b| {
        a.first_position()
            .cmp(&b.first_position())
            .then(b.last_position().cmp(&a.last_position()))
            .then(b.token_positions.len().cmp(&a.token_positions.len()))
            .then(a.mwe_id.cmp(&b.mwe_id))
    });

    let mut kept: Vec<&MweInstance> = Vec::new();
    for candidate in candidates {
        // Positions must resolve to token indices to be encodable at all.
        let resolvable = candidate
            .token_positions
            .iter()
            .all(|&p| sentence.position_index(p).is_some());
        if resolvable {
            kept.push(candidate);
            let labels = build_labels(sentence, &kept, n);
            let decoded = decode_tags(&labels, DecodeMode::Tolerant)
                .expect("tolerant decode cannot fail");
            if spans_of(&decoded) == kept_spans(sentence, &kept) {
                continue;
            }
            kept.pop();
        }
        diagnostics.push(Diagnostic::new(
            format!("sentence {}", sentence.sentence_id),
            format!(
                "dropped MWE {} ({}) at positions {:?}: not representable in a flat label sequence",
                candidate.mwe_id,
                candidate
                    .category
                    .as_ref()
                    .map(|c| c.as_str())
                    .unwrap_or("_"),
                candidate.token_positions
            ),
        ));
    }

    (build_labels(sentence, &kept, n), diagnostics)
}

/// (sorted positions, category) multiset for round-trip comparison; instance
/// ids are ignored because decoding renumbers canonically.
fn spans_of(instances: &[MweInstance]) -> Vec<(Vec<usize>, Option<MweCategory>)> {
    let mut spans: Vec<_> = instances
        .iter()
        .map(|m| (m.token_positions.clone(), m.category.clone()))
        .collect();
    spans.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cat_key(&a.1).cmp(&cat_key(&b.1))));
    spans
}

fn kept_spans(
    sentence: &Sentence,
    kept: &[&MweInstance],
) -> Vec<(Vec<usize>, Option<MweCategory>)> {
    // Encoded labels live on token indices; express positions the same way.
    let mut spans: Vec<_> = kept
        .iter()
        .map(|m| {
            let positions: Vec<usize> = m
                .token_positions
                .iter()
                .map(|&p| sentence.position_index(p).expect("resolvable") + 1)
                .collect();
            (positions, m.category.clone())
        })
        .collect();
    spans.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| cat_key(&a.1).cmp(&cat_key(&b.1))));
    spans
}

fn cat_key(cat: &Option<MweCategory>) -> String {
    cat.as_ref().map(|c| c.as_str().to_string()).unwrap_or_default()
}

fn build_labels(sentence: &Sentence, kept: &[&MweInstance], n: usize) -> TagSequence {
    let mut labels = vec![LABEL_OUTSIDE.to_string(); n];
    for mwe in kept {
        for (i, &pos) in mwe.token_positions.iter().enumerate() {
            let idx = sentence.position_index(pos).expect("resolvable");
            labels[idx] = if i == 0 {
                begin_label(mwe.category.as_ref())
            } else {
                inside_label(mwe.category.as_ref())
            };
        }
    }
    // Unoccupied tokens strictly inside a kept instance's extent become gaps.
    for mwe in kept {
        let first = sentence
            .position_index(mwe.first_position())
            .expect("resolvable");
        let last = sentence
            .position_index(mwe.last_position())
            .expect("resolvable");
        for label in labels.iter_mut().take(last).skip(first + 1) {
            if label == LABEL_OUTSIDE {
                *label = LABEL_GAP.to_string();
            }
        }
    }
    labels
}

/// Decodes a label sequence into instances with canonical ids (1..n by first
/// position). Positions are 1-based token indices.
///
/// `O` closes every open instance; `o-` keeps them open; a begin label closes
/// any open instance of the same category before opening a new one; an
/// inside label extends the most recently opened instance of its category.
pub fn decode_tags(labels: &[String], mode: DecodeMode) -> Result<Vec<MweInstance>, TagError> {
    let mut open: Vec<(Option<MweCategory>, Vec<usize>)> = Vec::new();
    let mut closed: Vec<(Option<MweCategory>, Vec<usize>)> = Vec::new();

    for (idx, label) in labels.iter().enumerate() {
        let position = idx + 1;
        let parsed = match parse_label(label) {
            Some(p) => p,
            None => match mode {
                DecodeMode::Strict => {
                    return Err(TagError::UnknownLabel {
                        position,
                        label: label.clone(),
                    })
                }
                DecodeMode::Tolerant => ParsedLabel::Outside,
            },
        };
        match parsed {
            ParsedLabel::Outside => closed.append(&mut open),
            ParsedLabel::Gap => {
                if open.is_empty() {
                    match mode {
                        DecodeMode::Strict => return Err(TagError::DanglingGap { position }),
                        DecodeMode::Tolerant => {}
                    }
                }
            }
            ParsedLabel::Begin(cat) => {
                if let Some(i) = open.iter().rposition(|(c, _)| *c == cat) {
                    let done = open.remove(i);
                    closed.push(done);
                }
                open.push((cat, vec![position]));
            }
            ParsedLabel::Inside(cat) => {
                if let Some(i) = open.iter().rposition(|(c, _)| *c == cat) {
                    open[i].1.push(position);
                } else {
                    match mode {
                        DecodeMode::Strict => {
                            return Err(TagError::OrphanInside {
                                position,
                                label: label.clone(),
                            })
                        }
                        // Repair rule: open a fresh instance at this token.
                        DecodeMode::Tolerant => open.push((cat, vec![position])),
                    }
                }
            }
        }
    }
    closed.append(&mut open);
    closed.sort_by(|a, b| a.1.cmp(&b.1));
    Ok(closed
        .into_iter()
        .enumerate()
        .map(|(i, (category, positions))| MweInstance::new((i + 1) as u32, category, positions))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cupt::Token;

    fn sentence(n: usize, mwes: Vec<MweInstance>) -> Sentence {
        Sentence {
            sentence_id: "t".to_string(),
            metadata_lines: vec![],
            tokens: (1..=n).map(|i| Token::new(i, "w", "w", "NOUN")).collect(),
            mwes,
            raw_lines: vec![],
        }
    }

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn gap_encoding() {
        let s = sentence(5, vec![MweInstance::new(1, Some(MweCategory::Vid), vec![2, 4])]);
        let (tags, diags) = encode_tags(&s);
        assert_eq!(tags, labels(&["O", "B-VID", "o-", "I-VID", "O"]));
        assert!(diags.is_empty());
        let decoded = decode_tags(&tags, DecodeMode::Strict).unwrap();
        assert_eq!(decoded, s.mwes);
    }

    #[test]
    fn no_mwes_is_all_outside() {
        let s = sentence(3, vec![]);
        let (tags, _) = encode_tags(&s);
        assert_eq!(tags, labels(&["O", "O", "O"]));
        assert!(decode_tags(&tags, DecodeMode::Strict).unwrap().is_empty());
    }

    #[test]
    fn two_disjoint_mwes() {
        let s = sentence(
            5,
            vec![
                MweInstance::new(1, Some(MweCategory::LvcFull), vec![1, 2]),
                MweInstance::new(2, Some(MweCategory::Vid), vec![4, 5]),
            ],
        );
        let (tags, diags) = encode_tags(&s);
        assert_eq!(
            tags,
            labels(&["B-LVC.full", "I-LVC.full", "O", "B-VID", "I-VID"])
        );
        assert!(diags.is_empty());
        assert_eq!(decode_tags(&tags, DecodeMode::Strict).unwrap(), s.mwes);
    }

    #[test]
    fn tolerant_repairs_orphan_inside() {
        let tags = labels(&["I-VID", "O"]);
        let decoded = decode_tags(&tags, DecodeMode::Tolerant).unwrap();
        assert_eq!(
            decoded,
            vec![MweInstance::new(1, Some(MweCategory::Vid), vec![1])]
        );
        // Re-encoding the repaired instance is consistent.
        let s = sentence(2, decoded);
        let (tags2, _) = encode_tags(&s);
        assert_eq!(tags2, labels(&["B-VID", "O"]));
    }

    #[test]
    fn strict_rejects_orphans_and_dangling_gaps() {
        assert!(matches!(
            decode_tags(&labels(&["I-VID"]), DecodeMode::Strict).unwrap_err(),
            TagError::OrphanInside { position: 1, .. }
        ));
        assert!(matches!(
            decode_tags(&labels(&["o-", "O"]), DecodeMode::Strict).unwrap_err(),
            TagError::DanglingGap { position: 1 }
        ));
    }

    #[test]
    fn overlap_keeps_earlier_then_longer() {
        // Same first token: the longer span wins.
        let s = sentence(
            4,
            vec![
                MweInstance::new(1, Some(MweCategory::Vid), vec![1, 2]),
                MweInstance::new(2, Some(MweCategory::LvcFull), vec![1, 2, 3]),
            ],
        );
        let (tags, diags) = encode_tags(&s);
        assert_eq!(tags, labels(&["B-LVC.full", "I-LVC.full", "I-LVC.full", "O"]));
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("dropped MWE 1"));
    }

    #[test]
    fn interleaved_different_categories_coexist() {
        let s = sentence(
            3,
            vec![
                MweInstance::new(1, Some(MweCategory::Vid), vec![1, 3]),
                MweInstance::new(2, Some(MweCategory::LvcFull), vec![2]),
            ],
        );
        let (tags, diags) = encode_tags(&s);
        assert_eq!(tags, labels(&["B-VID", "B-LVC.full", "I-VID"]));
        assert!(diags.is_empty());
        let decoded = decode_tags(&tags, DecodeMode::Strict).unwrap();
        assert_eq!(decoded.len(), 2);
        assert_eq!(decoded[0].token_positions, vec![1, 3]);
        assert_eq!(decoded[1].token_positions, vec![2]);
    }

    #[test]
    fn same_category_nesting_drops_the_inner_instance() {
        let s = sentence(
            3,
            vec![
                MweInstance::new(1, Some(MweCategory::Vid), vec![1, 3]),
                MweInstance::new(2, Some(MweCategory::Vid), vec![2]),
            ],
        );
        let (tags, diags) = encode_tags(&s);
        assert_eq!(tags, labels(&["B-VID", "o-", "I-VID"]));
        assert_eq!(diags.len(), 1);
        let decoded = decode_tags(&tags, DecodeMode::Strict).unwrap();
        assert_eq!(decoded.len(), 1);
        assert_eq!(decoded[0].token_positions, vec![1, 3]);
    }

    #[test]
    fn single_token_mwe_is_a_lone_begin() {
        let s = sentence(2, vec![MweInstance::new(1, Some(MweCategory::Irv), vec![2])]);
        let (tags, _) = encode_tags(&s);
        assert_eq!(tags, labels(&["O", "B-IRV"]));
        assert_eq!(decode_tags(&tags, DecodeMode::Strict).unwrap(), s.mwes);
    }

    #[test]
    fn vocabulary_ordering() {
        let single: BTreeSet<String> = ["VID".to_string()].into();
        assert_eq!(
            label_vocabulary(&single),
            labels(&["O", "o-", "B-VID", "I-VID"])
        );
        assert_eq!(label_vocabulary(&BTreeSet::new()), labels(&["O", "o-"]));
        let two: BTreeSet<String> = ["LVC.full".to_string(), "VID".to_string()].into();
        assert_eq!(
            label_vocabulary(&two),
            labels(&["O", "o-", "B-LVC.full", "I-LVC.full", "B-VID", "I-VID"])
        );
    }

    #[test]
    fn vocab_indexing_is_stable() {
        let two: BTreeSet<String> = ["LVC.full".to_string(), "VID".to_string()].into();
        let vocab = LabelVocab::for_categories(&two, false);
        assert_eq!(vocab.index_of("O"), Some(0));
        assert_eq!(vocab.index_of("o-"), Some(1));
        assert_eq!(vocab.index_of("B-VID"), Some(4));
        assert_eq!(vocab.label(5), "I-VID");
        let again = LabelVocab::for_categories(&two, false);
        assert_eq!(vocab, again);
    }

    #[test]
    fn uncategorized_labels_round_trip() {
        let s = sentence(3, vec![MweInstance::new(1, None, vec![1, 3])]);
        let (tags, _) = encode_tags(&s);
        assert_eq!(tags, labels(&["B", "o-", "I"]));
        assert_eq!(decode_tags(&tags, DecodeMode::Strict).unwrap(), s.mwes);
    }
}
