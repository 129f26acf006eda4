//! PARSEME `.cupt` corpus reading, writing, and statistics.
//!
//! The format is CoNLL-U Plus: UTF-8 text, tab-separated columns, `#`
//! comment/metadata lines, blank-line sentence separators, and a trailing
//! `PARSEME:MWE` column holding `*` (no annotation), `_` (untagged), or a
//! `;`-separated membership list such as `1:VID;2`. The first token of an
//! annotated expression carries `id:CATEGORY`; later tokens repeat the bare
//! id.
//!
//! Multiword-token ranges (`3-4`) and empty nodes (`5.1`) are preserved
//! verbatim and never take part in MWE positions: PARSEME annotates
//! syntactic words.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::diag::Diagnostic;

/// Number of columns in a standard `.cupt` file (10 CoNLL-U + the MWE column).
pub const DEFAULT_COLUMNS: usize = 11;

/// Header announcing the column layout, carried by the first sentence.
pub const GLOBAL_COLUMNS_LINE: &str =
    "# global.columns = ID FORM LEMMA UPOS XPOS FEATS HEAD DEPREL DEPS MISC PARSEME:MWE";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CuptError {
    #[error("line {line}: expected {expected} tab-separated columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unparseable token id {text:?}")]
    BadId { line: usize, text: String },
    #[error("line {line}: token position {position} does not increase within the sentence")]
    NonIncreasingPosition { line: usize, position: usize },
    #[error("line {line}: empty form column")]
    EmptyForm { line: usize },
    #[error("line {line}: malformed MWE cell {cell:?}")]
    MalformedCell { line: usize, cell: String },
    #[error("line {line}: MWE {id} is assigned a category twice")]
    DuplicateCategory { line: usize, id: u32 },
    #[error("line {line}: token listed twice for MWE {id}")]
    DuplicatePosition { line: usize, id: u32 },
    #[error("sentence {sentence}: MWE {id} references missing token position {position}")]
    MissingPosition {
        sentence: String,
        id: u32,
        position: usize,
    },
}

/// The PARSEME 1.2 VMWE categories, plus a catch-all for strings outside the
/// inventory (those are preserved verbatim and reported as diagnostics).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum MweCategory {
    /// Verbal idiom.
    Vid,
    /// Light-verb construction, full.
    LvcFull,
    /// Light-verb construction, causative.
    LvcCause,
    /// Inherently reflexive verb.
    Irv,
    /// Verb-particle construction, full.
    VpcFull,
    /// Verb-particle construction, semi-compositional.
    VpcSemi,
    /// Multi-verb construction.
    Mvc,
    /// Inherently adpositional verb.
    Iav,
    /// Inherently clitic verb (language-specific).
    LsIcv,
    /// Any other category string, preserved verbatim.
    Other(String),
}

impl MweCategory {
    pub fn parse(s: &str) -> Self {
        match s {
            "VID" => Self::Vid,
            "LVC.full" => Self::LvcFull,
            "LVC.cause" => Self::LvcCause,
            "IRV" => Self::Irv,
            "VPC.full" => Self::VpcFull,
            "VPC.semi" => Self::VpcSemi,
            "MVC" => Self::Mvc,
            "IAV" => Self::Iav,
            "LS.ICV" => Self::LsIcv,
            other => Self::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::Vid => "VID",
            Self::LvcFull => "LVC.full",
            Self::LvcCause => "LVC.cause",
            Self::Irv => "IRV",
            Self::VpcFull => "VPC.full",
            Self::VpcSemi => "VPC.semi",
            Self::Mvc => "MVC",
            Self::Iav => "IAV",
            Self::LsIcv => "LS.ICV",
            Self::Other(s) => s,
        }
    }

    pub fn is_known(&self) -> bool {
        !matches!(self, Self::Other(_))
    }
}

impl fmt::Display for MweCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One syntactic word. Columns beyond ID/FORM/LEMMA/UPOS are kept verbatim in
/// `other_cols`; the raw MWE cell is kept so the `*` vs `_` (untagged)
/// distinction survives a round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// 1-based position within the sentence (the CoNLL-U ID column).
    pub position: usize,
    pub form: String,
    pub lemma: String,
    pub upos: String,
    /// Remaining CoNLL-U columns (XPOS..MISC for the standard layout).
    pub other_cols: Vec<String>,
    /// Raw MWE column value as read; rewritten from `mwes` on output.
    pub mwe_cell: String,
}

impl Token {
    /// A token with placeholder columns, used by generators.
    pub fn new(position: usize, form: &str, lemma: &str, upos: &str) -> Self {
        Self {
            position,
            form: form.to_string(),
            lemma: lemma.to_string(),
            upos: upos.to_string(),
            other_cols: vec!["_".to_string(); DEFAULT_COLUMNS - 5],
            mwe_cell: "*".to_string(),
        }
    }
}

/// One annotated VMWE: identifier, optional category, and the ordered (and
/// possibly discontinuous) token positions it covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MweInstance {
    /// Identifier unique within the sentence.
    pub mwe_id: u32,
    /// Category from the first-mentioned token; `None` when never given.
    pub category: Option<MweCategory>,
    /// 1-based token positions, ascending, no duplicates.
    pub token_positions: Vec<usize>,
}

impl MweInstance {
    pub fn new(mwe_id: u32, category: Option<MweCategory>, positions: Vec<usize>) -> Self {
        Self {
            mwe_id,
            category,
            token_positions: positions,
        }
    }

    pub fn first_position(&self) -> usize {
        *self.token_positions.first().expect("empty MWE")
    }

    pub fn last_position(&self) -> usize {
        *self.token_positions.last().expect("empty MWE")
    }
}

/// A verbatim non-token line inside the token block (multiword-token range or
/// empty node), anchored after `after_token` syntactic words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawLine {
    pub after_token: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sentence {
    /// Identifier from `# source_sent_id` / `# sent_id` metadata, or a
    /// generated fallback.
    pub sentence_id: String,
    /// Comment lines, verbatim and in order.
    pub metadata_lines: Vec<String>,
    pub tokens: Vec<Token>,
    pub mwes: Vec<MweInstance>,
    /// Range/empty-node lines, verbatim.
    pub raw_lines: Vec<RawLine>,
}

impl Sentence {
    /// Maps a 1-based token position to its index in `tokens`.
    pub fn position_index(&self, position: usize) -> Option<usize> {
        // Positions are consecutive in well-formed files; fall back to a scan.
        if position >= 1 && position <= self.tokens.len() {
            let guess = position - 1;
            if self.tokens[guess].position == position {
                return Some(guess);
            }
        }
        self.tokens.iter().position(|t| t.position == position)
    }

    /// Rewrites every token's raw MWE cell from `mwes`. Untagged (`_`) cells
    /// without memberships are left untouched.
    pub fn sync_cells(&mut self) {
        let cells = encode_cells(self);
        for (token, cell) in self.tokens.iter_mut().zip(cells) {
            match cell {
                Some(c) => token.mwe_cell = c,
                None => {
                    if token.mwe_cell != "_" {
                        token.mwe_cell = "*".to_string();
                    }
                }
            }
        }
    }

    /// Reassigns MWE ids 1..n ordered by first token position, so generated
    /// output is deterministic regardless of construction order.
    pub fn canonical_renumber(&mut self) {
        self.mwes
            .sort_by_key(|m| (m.first_position(), m.token_positions.len(), m.mwe_id));
        for (i, mwe) in self.mwes.iter_mut().enumerate() {
            mwe.mwe_id = (i + 1) as u32;
        }
        self.sync_cells();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn concat(parts: &[&Corpus]) -> Corpus {
        Corpus {
            sentences: parts
                .iter()
                .flat_map(|c| c.sentences.iter().cloned())
                .collect(),
        }
    }

    /// All category names appearing on annotated instances, sorted.
    pub fn category_names(&self) -> BTreeSet<String> {
        let mut set = BTreeSet::new();
        for s in &self.sentences {
            for m in &s.mwes {
                if let Some(cat) = &m.category {
                    set.insert(cat.as_str().to_string());
                }
            }
        }
        set
    }

    pub fn has_uncategorized_mwes(&self) -> bool {
        self.sentences
            .iter()
            .any(|s| s.mwes.iter().any(|m| m.category.is_none()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub token_count: usize,
    /// `token_count / sentence_count`, 0 for an empty corpus.
    pub avg_sentence_length: f64,
    pub mwe_count: usize,
    /// Instance count per category name; uncategorized instances under `_`.
    pub per_category_counts: BTreeMap<String, usize>,
}

impl CorpusStats {
    /// Plain-text rendering; the average length is shown to one decimal.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("sentences: {}\n", self.sentence_count));
        out.push_str(&format!("tokens: {}\n", self.token_count));
        out.push_str(&format!("avg_sentence_length: {:.1}\n", self.avg_sentence_length));
        out.push_str(&format!("mwes: {}\n", self.mwe_count));
        for (cat, n) in &self.per_category_counts {
            out.push_str(&format!("mwes[{cat}]: {n}\n"));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// When on, ids that never receive a category produce a diagnostic.
    pub strict_categories: bool,
    /// Treat the final column as an opaque string instead of an MWE cell
    /// (used for label files that share the `.cupt` column structure).
    pub opaque_final_column: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            strict_categories: true,
            opaque_final_column: false,
        }
    }
}

/// Result of a parse: the corpus plus non-fatal findings.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub corpus: Corpus,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn parse_cupt(text: &str) -> Result<Parsed, CuptError> {
    parse_cupt_with(text, &ParseOptions::default())
}

pub fn parse_cupt_with(text: &str, options: &ParseOptions) -> Result<Parsed, CuptError> {
    let mut sentences = Vec::new();
    let mut diagnostics = Vec::new();
    let mut expected_columns = DEFAULT_COLUMNS;

    let mut metadata: Vec<String> = Vec::new();
    let mut tokens: Vec<(usize, Token)> = Vec::new(); // (line number, token)
    let mut raw_lines: Vec<RawLine> = Vec::new();

    let flush = |metadata: &mut Vec<String>,
                     tokens: &mut Vec<(usize, Token)>,
                     raw_lines: &mut Vec<RawLine>,
                     sentences: &mut Vec<Sentence>,
                     diagnostics: &mut Vec<Diagnostic>,
                     options: &ParseOptions|
     -> Result<(), CuptError> {
        if metadata.is_empty() && tokens.is_empty() && raw_lines.is_empty() {
            return Ok(());
        }
        let sentence_id = extract_sentence_id(metadata, sentences.len());
        let mwes = if options.opaque_final_column {
            Vec::new()
        } else {
            decode_cells(tokens, &sentence_id, options, diagnostics)?
        };
        sentences.push(Sentence {
            sentence_id,
            metadata_lines: std::mem::take(metadata),
            tokens: tokens.drain(..).map(|(_, t)| t).collect(),
            mwes,
            raw_lines: std::mem::take(raw_lines),
        });
        Ok(())
    };

    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            flush(
                &mut metadata,
                &mut tokens,
                &mut raw_lines,
                &mut sentences,
                &mut diagnostics,
                options,
            )?;
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(cols) = parse_global_columns(rest) {
                expected_columns = cols;
            }
            metadata.push(line.to_string());
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != expected_columns {
            return Err(CuptError::ColumnCount {
                line: line_no,
                expected: expected_columns,
                found: cols.len(),
            });
        }
        let id_field = cols[0];
        if id_field.contains('-') || id_field.contains('.') {
            // Multiword-token range or empty node: preserved, never indexed.
            raw_lines.push(RawLine {
                after_token: tokens.len(),
                text: line.to_string(),
            });
            continue;
        }
        let position: usize = id_field.parse().map_err(|_| CuptError::BadId {
            line: line_no,
            text: id_field.to_string(),
        })?;
        if position == 0 {
            return Err(CuptError::BadId {
                line: line_no,
                text: id_field.to_string(),
            });
        }
        if let Some((_, last)) = tokens.last() {
            if position <= last.position {
                return Err(CuptError::NonIncreasingPosition {
                    line: line_no,
                    position,
                });
            }
        }
        if cols[1].is_empty() {
            return Err(CuptError::EmptyForm { line: line_no });
        }
        let token = Token {
            position,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            upos: cols[3].to_string(),
            other_cols: cols[4..cols.len() - 1].iter().map(|s| s.to_string()).collect(),
            mwe_cell: cols[cols.len() - 1].to_string(),
        };
        tokens.push((line_no, token));
    }
    flush(
        &mut metadata,
        &mut tokens,
        &mut raw_lines,
        &mut sentences,
        &mut diagnostics,
        options,
    )?;

    Ok(Parsed {
        corpus: Corpus { sentences },
        diagnostics,
    })
}

fn parse_global_columns(comment_rest: &str) -> Option<usize> {
    let trimmed = comment_rest.trim_start();
    let rest = trimmed.strip_prefix("global.columns")?;
    let rest = rest.trim_start().strip_prefix('=')?;
    Some(rest.split_whitespace().count())
}

fn extract_sentence_id(metadata: &[String], index: usize) -> String {
    for key in ["source_sent_id", "sent_id"] {
        for line in metadata {
            let body = line.trim_start_matches('#').trim_start();
            if let Some(rest) = body.strip_prefix(key) {
                if let Some(value) = rest.trim_start().strip_prefix('=') {
                    let value = value.trim();
                    if !value.is_empty() {
                        return value.to_string();
                    }
                }
            }
        }
    }
    format!("s{}", index + 1)
}

fn decode_cells(
    tokens: &[(usize, Token)],
    sentence_id: &str,
    options: &ParseOptions,
    diagnostics: &mut Vec<Diagnostic>,
) -> Result<Vec<MweInstance>, CuptError> {
    let mut by_id: BTreeMap<u32, MweInstance> = BTreeMap::new();
    for (line_no, token) in tokens {
        let cell = token.mwe_cell.as_str();
        if cell == "*" || cell == "_" {
            continue;
        }
        for part in cell.split(';') {
            if part.is_empty() {
                return Err(CuptError::MalformedCell {
                    line: *line_no,
                    cell: cell.to_string(),
                });
            }
            let (id_str, category) = match part.split_once(':') {
                Some((id, cat)) if !cat.is_empty() => (id, Some(MweCategory::parse(cat))),
                Some(_) => {
                    return Err(CuptError::MalformedCell {
                        line: *line_no,
                        cell: cell.to_string(),
                    })
                }
                None => (part, None),
            };
            let id: u32 = id_str.parse().map_err(|_| CuptError::MalformedCell {
                line: *line_no,
                cell: cell.to_string(),
            })?;
            let entry = by_id.entry(id).or_insert_with(|| MweInstance {
                mwe_id: id,
                category: None,
                token_positions: Vec::new(),
            });
            if let Some(cat) = category {
                if entry.category.is_some() {
                    return Err(CuptError::DuplicateCategory {
                        line: *line_no,
                        id,
                    });
                }
                if !entry.token_positions.is_empty() {
                    diagnostics.push(Diagnostic::new(
                        format!("sentence {sentence_id}"),
                        format!("MWE {id}: category given after the first-mentioned token"),
                    ));
                }
                if !cat.is_known() {
                    diagnostics.push(Diagnostic::new(
                        format!("sentence {sentence_id}"),
                        format!("MWE {id}: category {:?} outside the known inventory", cat.as_str()),
                    ));
                }
                entry.category = Some(cat);
            }
            if entry.token_positions.contains(&token.position) {
                return Err(CuptError::DuplicatePosition {
                    line: *line_no,
                    id,
                });
            }
            entry.token_positions.push(token.position);
        }
    }
    if options.strict_categories {
        for (id, mwe) in &by_id {
            if mwe.category.is_none() {
                diagnostics.push(Diagnostic::new(
                    format!("sentence {sentence_id}"),
                    format!("MWE {id}: continuation never introduced with a category"),
                ));
            }
        }
    }
    // Token order means positions are already ascending.
    Ok(by_id.into_values().collect())
}

/// Per-token MWE cells computed from `mwes`: `None` means "no membership".
/// Memberships are listed in ascending id order; the category tag goes on the
/// instance's first position.
fn encode_cells(sentence: &Sentence) -> Vec<Option<String>> {
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); sentence.tokens.len()];
    let mut ordered: Vec<&MweInstance> = sentence.mwes.iter().collect();
    ordered.sort_by_key(|m| m.mwe_id);
    for mwe in ordered {
        for (i, &pos) in mwe.token_positions.iter().enumerate() {
            let Some(idx) = sentence.position_index(pos) else {
                continue; // write_cupt validates before calling
            };
            let piece = if i == 0 {
                match &mwe.category {
                    Some(cat) => format!("{}:{}", mwe.mwe_id, cat.as_str()),
                    None => mwe.mwe_id.to_string(),
                }
            } else {
                mwe.mwe_id.to_string()
            };
            cells[idx].push(piece);
        }
    }
    cells
        .into_iter()
        .map(|parts| {
            if parts.is_empty() {
                None
            } else {
                Some(parts.join(";"))
            }
        })
        .collect()
}

/// Serialises a corpus back to `.cupt` text. Output re-parses to an equal
/// corpus, and is byte-identical to the input for corpora produced by
/// [`parse_cupt`] on canonically formatted files.
pub fn write_cupt(corpus: &Corpus) -> Result<String, CuptError> {
    let mut out = String::new();
    for sentence in &corpus.sentences {
        let positions: BTreeSet<usize> = sentence.tokens.iter().map(|t| t.position).collect();
        for mwe in &sentence.mwes {
            for &pos in &mwe.token_positions {
                if !positions.contains(&pos) {
                    return Err(CuptError::MissingPosition {
                        sentence: sentence.sentence_id.clone(),
                        id: mwe.mwe_id,
                        position: pos,
                    });
                }
            }
        }
        for line in &sentence.metadata_lines {
            out.push_str(line);
            out.push('\n');
        }
        let cells = encode_cells(sentence);
        let mut raw_iter = sentence.raw_lines.iter().peekable();
        for (idx, token) in sentence.tokens.iter().enumerate() {
            while raw_iter.peek().is_some_and(|r| r.after_token == idx) {
                out.push_str(&raw_iter.next().unwrap().text);
                out.push('\n');
            }
            let cell = match &cells[idx] {
                Some(c) => c.clone(),
                None => {
                    if token.mwe_cell == "_" {
                        "_".to_string()
                    } else {
                        "*".to_string()
                    }
                }
            };
            out.push_str(&token.position.to_string());
            out.push('\t');
            out.push_str(&token.form);
            out.push('\t');
            out.push_str(&token.lemma);
            out.push('\t');
            out.push_str(&token.upos);
            for col in &token.other_cols {
                out.push('\t');
                out.push_str(col);
            }
            out.push('\t');
            out.push_str(&cell);
            out.push('\n');
        }
        for raw in raw_iter {
            out.push_str(&raw.text);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let sentence_count = corpus.sentences.len();
    let token_count: usize = corpus.sentences.iter().map(|s| s.tokens.len()).sum();
    let mut per_category_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut mwe_count = 0;
    for sentence in &corpus.sentences {
        for mwe in &sentence.mwes {
            mwe_count += 1;
            let key = mwe
                .category
                .as_ref()
                .map(|c| c.as_str().to_string())
                .unwrap_or_else(|| "_".to_string());
            *per_category_counts.entry(key).or_default() += 1;
        }
    }
    let avg_sentence_length = if sentence_count == 0 {
        0.0
    } else {
        token_count as f64 / sentence_count as f64
    };
    CorpusStats {
        sentence_count,
        token_count,
        avg_sentence_length,
        mwe_count,
        per_category_counts,
    }
}

/// Checks alignment between two corpora (same sentence count, ids, and token
/// counts); returns the first divergent sentence id otherwise.
pub fn check_alignment(a: &Corpus, b: &Corpus) -> Result<(), String> {
    if a.sentences.len() != b.sentences.len() {
        return Err(format!(
            "corpora have {} vs {} sentences",
            a.sentences.len(),
            b.sentences.len()
        ));
    }
    for (sa, sb) in a.sentences.iter().zip(&b.sentences) {
        if sa.sentence_id != sb.sentence_id || sa.tokens.len() != sb.tokens.len() {
            return Err(format!("first divergent sentence: {}", sa.sentence_id));
        }
    }
    Ok(())
}

/// Maps position-indexed instances through the lemma column, lowercased.
/// Tokens whose lemma is `_` fall back to the lowercased form, with a
/// diagnostic.
pub fn lemma_multiset(
    sentence: &Sentence,
    mwe: &MweInstance,
    diagnostics: &mut Vec<Diagnostic>,
) -> Vec<String> {
    let mut lemmas: Vec<String> = mwe
        .token_positions
        .iter()
        .filter_map(|&pos| sentence.position_index(pos))
        .map(|idx| {
            let token = &sentence.tokens[idx];
            if token.lemma == "_" {
                diagnostics.push(Diagnostic::new(
                    format!("sentence {}", sentence.sentence_id),
                    format!(
                        "token {} has no lemma; falling back to the form",
                        token.position
                    ),
                ));
                token.form.to_lowercase()
            } else {
                token.lemma.to_lowercase()
            }
        })
        .collect();
    lemmas.sort();
    lemmas
}
