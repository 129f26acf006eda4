//! Monolingual and multilingual training.
//!
//! Each step records a fresh tape, runs the forward pass (encode, optional
//! lateral inhibition, token classification, language discrimination on the
//! sentence summary), computes the two cross-entropy losses, and updates all
//! parameters with Adam. Reversal sits between the encoder summary and the
//! discriminator, so the discriminator is always trained at full weight
//! while the encoder receives `-lambda` times the discriminator gradient —
//! or nothing at all when the adversarial part is disabled.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cupt::Corpus;
use crate::diag::Diagnostic;
use crate::eval::with_predictions;
use crate::layers::{Model, ModelConfig, StagedModel, SummaryMode};
use crate::tagging::{decode_tags, encode_tags, DecodeMode, LabelVocab};
use crate::tape::{AutodiffError, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("training corpus for {0} has no sentences")]
    EmptyCorpus(String),
    #[error("label {label:?} missing from the label vocabulary")]
    UnknownLabel { label: String },
    #[error("language index {index} out of range for {count} languages")]
    LanguageIndexOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// The five experiment variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Monolingual,
    Multilingual,
    MultilingualLi,
    MultilingualAdv,
    MultilingualLiAdv,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Monolingual,
        Method::Multilingual,
        Method::MultilingualLi,
        Method::MultilingualAdv,
        Method::MultilingualLiAdv,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Monolingual => "monolingual",
            Method::Multilingual => "multilingual",
            Method::MultilingualLi => "multilingual+LI",
            Method::MultilingualAdv => "multilingual+Adv",
            Method::MultilingualLiAdv => "multilingual+LI+Adv",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn li_enabled(&self) -> bool {
        matches!(self, Method::MultilingualLi | Method::MultilingualLiAdv)
    }

    pub fn adv_enabled(&self) -> bool {
        matches!(self, Method::MultilingualAdv | Method::MultilingualLiAdv)
    }

    pub fn is_monolingual(&self) -> bool {
        matches!(self, Method::Monolingual)
    }
}

/// Training hyperparameters. The defaults are the reference setting: 10
/// epochs, batch 32, Adam at 3e-5, sequences capped at 150 tokens,
/// surrogate sharpness k = 10, reversal scale lambda = 0.01.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_seq_len: usize,
    pub k: f64,
    pub lambda: f64,
    pub li_enabled: bool,
    pub adv_enabled: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 3e-5,
            max_seq_len: 150,
            k: 10.0,
            lambda: 0.01,
            li_enabled: false,
            adv_enabled: false,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.k > 0.0) {
            return bad("k must be positive");
        }
        if self.lambda < 0.0 {
            return bad("lambda must be non-negative");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return bad("adam_beta1 must lie in (0, 1)");
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("adam_beta2 must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }

    pub fn apply_method(&mut self, method: Method) {
        self.li_enabled = method.li_enabled();
        self.adv_enabled = method.adv_enabled();
    }

    /// Applies one `key = value` override; keys are the field names.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let parse_bool = |v: &str| match v {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(TrainError::Config(format!("bad boolean {v:?} for {key}"))),
        };
        let bad_num = || TrainError::Config(format!("bad value {value:?} for {key}"));
        match key {
            "epochs" => self.epochs = value.parse().map_err(|_| bad_num())?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad_num())?,
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad_num())?,
            "max_seq_len" => self.max_seq_len = value.parse().map_err(|_| bad_num())?,
            "k" => self.k = value.parse().map_err(|_| bad_num())?,
            "lambda" => self.lambda = value.parse().map_err(|_| bad_num())?,
            "li_enabled" => self.li_enabled = parse_bool(value)?,
            "adv_enabled" => self.adv_enabled = parse_bool(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad_num())?,
            "adam_beta1" => self.adam_beta1 = value.parse().map_err(|_| bad_num())?,
            "adam_beta2" => self.adam_beta2 = value.parse().map_err(|_| bad_num())?,
            "adam_epsilon" => self.adam_epsilon = value.parse().map_err(|_| bad_num())?,
            _ => return Err(TrainError::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file (`#` starts a comment line).
    pub fn from_kv_text(text: &str) -> Result<Self, TrainError> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            config.apply_kv(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nmax_seq_len = {}\nk = {}\nlambda = {}\nli_enabled = {}\nadv_enabled = {}\nseed = {}\nadam_beta1 = {}\nadam_beta2 = {}\nadam_epsilon = {}\n",
            self.epochs,
            self.batch_size,
            self.learning_rate,
            self.max_seq_len,
            self.k,
            self.lambda,
            self.li_enabled,
            self.adv_enabled,
            self.seed,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
        )
    }
}

/// Token-form vocabulary; id 0 is the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    forms: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK: &str = "<unk>";

impl TokenVocab {
    pub fn from_forms(forms: Vec<String>) -> Self {
        let index = forms
            .iter()
            .enumerate()
            .map(|(i, f)| (f.clone(), i))
            .collect();
        Self { forms, index }
    }

    /// First-seen order over the given corpora, after the unknown slot.
    pub fn build(corpora: &[&Corpus]) -> Self {
        let mut vocab = Self::from_forms(vec![UNK.to_string()]);
        for corpus in corpora {
            for sentence in &corpus.sentences {
                for token in &sentence.tokens {
                    if !vocab.index.contains_key(&token.form) {
                        vocab.index.insert(token.form.clone(), vocab.forms.len());
                        vocab.forms.push(token.form.clone());
                    }
                }
            }
        }
        vocab
    }

    pub fn id_of(&self, form: &str) -> usize {
        self.index.get(form).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn forms(&self) -> &[String] {
        &self.forms
    }
}

/// Adam moments, one pair per parameter tensor, in the model's canonical
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[&Tensor<S>], beta1: S, beta2: S, epsilon: S) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            beta1,
            beta2,
            epsilon,
        }
    }

    pub fn for_config(shapes: &[&Tensor<S>], config: &TrainConfig) -> Self {
        Self::new(
            shapes,
            S::from_f64_lit(config.adam_beta1),
            S::from_f64_lit(config.adam_beta2),
            S::from_f64_lit(config.adam_epsilon),
        )
    }
}

/// One Adam update with bias correction over parallel parameter/gradient
/// lists. Deterministic; shapes must agree.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
    lr: S,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "adam_step got {} params, {} grads, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step".to_string(),
                lhs: p.shape_string(),
                rhs: grads[i].shape_string(),
            }
            .into());
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = S::one() - state.beta1.powi(t);
    let bc2 = S::one() - state.beta2.powi(t);
    let one = S::one();
    for i in 0..params.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = grads[i].data();
        let p = params[i].data_mut();
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (one - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (one - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// A sentence converted to model inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedSentence {
    pub ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub language: usize,
}

/// Converts a corpus to prepared sentences: tokens to vocabulary ids, spans
/// to label indices. Sentences beyond `max_seq_len` are truncated (counted
/// in the diagnostics) and gold instances reaching past the cut are dropped
/// from the labels — evaluation still sees them in the original corpus.
pub fn prepare_corpus(
    corpus: &Corpus,
    language: usize,
    vocab: &TokenVocab,
    labels: &LabelVocab,
    max_seq_len: usize,
    diagnostics: &mut Vec<Diagnostic>,
) -> Result<Vec<PreparedSentence>, TrainError> {
    let mut prepared = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        if sentence.tokens.is_empty() {
            continue;
        }
        let mut work = sentence.clone();
        if work.tokens.len() > max_seq_len {
            diagnostics.push(Diagnostic::new(
                format!("sentence {}", work.sentence_id),
                format!(
                    "truncated from {} to {max_seq_len} tokens",
                    work.tokens.len()
                ),
            ));
            work.tokens.truncate(max_seq_len);
            work.raw_lines.retain(|r| r.after_token <= max_seq_len);
            let kept: Vec<_> = work
                .mwes
                .iter()
                .filter(|m| {
                    m.token_positions
                        .iter()
                        .all(|&p| work.position_index(p).is_some())
                })
                .cloned()
                .collect();
            for dropped in work.mwes.iter().filter(|m| !kept.contains(m)) {
                diagnostics.push(Diagnostic::new(
                    format!("sentence {}", work.sentence_id),
                    format!(
                        "gold MWE {} extends past the length cap; dropped from training labels",
                        dropped.mwe_id
                    ),
                ));
            }
            work.mwes = kept;
        }
        let (tags, mut drops) = encode_tags(&work);
        diagnostics.append(&mut drops);
        let label_ids = tags
            .iter()
            .map(|l| {
                labels
                    .index_of(l)
                    .ok_or_else(|| TrainError::UnknownLabel { label: l.clone() })
            })
            .collect::<Result<Vec<_>, _>>()?;
        prepared.push(PreparedSentence {
            ids: work.tokens.iter().map(|t| vocab.id_of(&t.form)).collect(),
            labels: label_ids,
            language,
        });
    }
    Ok(prepared)
}

/// A padded batch. Padded positions are masked out and never contribute to
/// either loss; the language index is constant per sentence row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<usize>>,
    pub languages: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl Batch {
    fn from_sentences(sentences: &[PreparedSentence]) -> Self {
        let width = sentences.iter().map(|s| s.ids.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(sentences.len());
        let mut mask = Vec::with_capacity(sentences.len());
        let mut labels = Vec::with_capacity(sentences.len());
        let mut languages = Vec::with_capacity(sentences.len());
        let mut lengths = Vec::with_capacity(sentences.len());
        for s in sentences {
            let n = s.ids.len();
            let mut ids = s.ids.clone();
            ids.resize(width, 0);
            let mut labs = s.labels.clone();
            labs.resize(width, 0);
            let mut m = vec![true; n];
            m.resize(width, false);
            token_ids.push(ids);
            labels.push(labs);
            mask.push(m);
            languages.push(s.language);
            lengths.push(n);
        }
        Self {
            token_ids,
            mask,
            labels,
            languages,
            lengths,
        }
    }

    pub fn sentences(&self) -> usize {
        self.languages.len()
    }

    pub fn real_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    fn row_ids(&self, row: usize) -> &[usize] {
        &self.token_ids[row][..self.lengths[row]]
    }

    fn row_labels(&self, row: usize) -> &[usize] {
        &self.labels[row][..self.lengths[row]]
    }
}

/// Splits prepared sentences into batches in order; the trailing batch may
/// be short. Deterministic for a given input order.
pub fn make_batches(items: &[PreparedSentence], batch_size: usize) -> Vec<Batch> {
    items
        .chunks(batch_size.max(1))
        .map(Batch::from_sentences)
        .collect()
}

/// Everything the backward pass and the history need from one forward pass.
pub struct ForwardOutcome<S> {
    pub loss_task: Var,
    pub loss_lang: Var,
    pub loss_task_value: S,
    pub loss_lang_value: S,
    pub token_predictions: Vec<Vec<usize>>,
    pub language_predictions: Vec<usize>,
}

/// Runs the forward pass for a batch on `tape`: per sentence, encode,
/// optionally gate, classify tokens, and discriminate the language from the
/// summary. The task loss is the token-weighted mean over the batch; the
/// language loss is the sentence mean. With the adversarial part disabled
/// the language loss is still computed but contributes nothing to updates.
pub fn forward_pass<S: Scalar>(
    tape: &Tape<S>,
    staged: &StagedModel<S>,
    batch: &Batch,
    li_enabled: bool,
    lambda: S,
    language_count: usize,
) -> Result<ForwardOutcome<S>, TrainError> {
    let total_tokens = batch.real_tokens();
    assert!(total_tokens > 0, "batch with no tokens");
    let mut task_terms = Vec::with_capacity(batch.sentences());
    let mut lang_terms = Vec::with_capacity(batch.sentences());
    let mut token_predictions = Vec::with_capacity(batch.sentences());
    let mut language_predictions = Vec::with_capacity(batch.sentences());

    let inv_sentences = S::one() / S::from_usize_lit(batch.sentences());
    for row in 0..batch.sentences() {
        let ids = batch.row_ids(row);
        let gold = batch.row_labels(row);
        let lang = batch.languages[row];
        if lang >= language_count {
            return Err(TrainError::LanguageIndexOutOfRange {
                index: lang,
                count: language_count,
            });
        }
        let (logits, pooled) = staged.sentence_logits(tape, ids, li_enabled)?;
        let (ce, probs) = tape.softmax_cross_entropy(logits, gold)?;
        token_predictions.push(probs.argmax_rows());
        let weight = S::from_usize_lit(ids.len()) / S::from_usize_lit(total_tokens);
        task_terms.push((ce, weight));

        let lang_logits = staged.language_logits(tape, pooled, lambda)?;
        let (ce_lang, lang_probs) = tape.softmax_cross_entropy(lang_logits, &[lang])?;
        language_predictions.push(lang_probs.argmax_rows()[0]);
        lang_terms.push((ce_lang, inv_sentences));
    }

    let loss_task = tape.weighted_sum(&task_terms)?;
    let loss_lang = tape.weighted_sum(&lang_terms)?;
    Ok(ForwardOutcome {
        loss_task,
        loss_lang,
        loss_task_value: tape.value(loss_task).item(),
        loss_lang_value: tape.value(loss_lang).item(),
        token_predictions,
        language_predictions,
    })
}

/// Backward pass plus Adam updates.
///
/// With the adversarial part enabled the total loss is `L_y + L_ld`; the
/// reversal layer inside the discriminator path turns the encoder's share of
/// the discriminator gradient into `-lambda` times itself, while the
/// classifier sees only `L_y` and the discriminator only `L_ld`.
pub fn backward_pass<S: Scalar>(
    tape: &Tape<S>,
    outcome: &ForwardOutcome<S>,
    staged: &StagedModel<S>,
    model: &mut Model<S>,
    adam: &mut AdamState<S>,
    lr: S,
    adv_enabled: bool,
) -> Result<(), TrainError> {
    let total = if adv_enabled {
        tape.add(outcome.loss_task, outcome.loss_lang)?
    } else {
        outcome.loss_task
    };
    tape.backward(total)?;
    let grads: Vec<Tensor<S>> = staged
        .all
        .iter()
        .map(|&v| tape.grad(v))
        .collect::<Result<_, _>>()?;
    let mut params = model.tensors_mut();
    adam_step(&mut params, &grads, adam, lr)
}

/// One history row per epoch: training losses and discriminator accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow<S> {
    pub epoch: usize,
    pub loss_task: S,
    pub loss_lang: S,
    pub disc_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History<S> {
    pub rows: Vec<HistoryRow<S>>,
}

impl<S: Scalar> History<S> {
    pub fn render_csv(&self) -> String {
        let mut out = String::from("epoch,L_y,L_ld,discriminator_accuracy\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.epoch, row.loss_task, row.loss_lang, row.disc_accuracy
            ));
        }
        out
    }
}

/// A trained model with everything needed to run it on new text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<S> {
    pub model: Model<S>,
    pub token_vocab: TokenVocab,
    pub label_vocab: LabelVocab,
    pub languages: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub trained: TrainedModel<S>,
    pub history: History<S>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Trains on one corpus per language. The per-epoch order is a seeded
/// shuffle of the concatenated multilingual training set; the final-epoch
/// model is returned along with the loss/accuracy history.
pub fn train<S: Scalar>(
    corpora: &[(String, Corpus)],
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<TrainOutcome<S>, TrainError> {
    config.validate()?;
    if corpora.is_empty() {
        return Err(TrainError::Config("no training corpora given".to_string()));
    }
    let mut diagnostics = Vec::new();
    for (name, corpus) in corpora {
        if corpus.sentences.is_empty() {
            return Err(TrainError::EmptyCorpus(name.clone()));
        }
    }
    if corpora.len() == 1 && config.adv_enabled {
        diagnostics.push(Diagnostic::new(
            "training",
            "adversarial loss is degenerate with a single language",
        ));
    }

    let all_refs: Vec<&Corpus> = corpora.iter().map(|(_, c)| c).collect();
    let token_vocab = TokenVocab::build(&all_refs);
    let mut categories = std::collections::BTreeSet::new();
    let mut uncategorized = false;
    for corpus in &all_refs {
        categories.extend(corpus.category_names());
        uncategorized |= corpus.has_uncategorized_mwes();
    }
    let label_vocab = LabelVocab::for_categories(&categories, uncategorized);
    let languages: Vec<String> = corpora.iter().map(|(n, _)| n.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: Model<S> = Model::init(
        token_vocab.len(),
        label_vocab.len(),
        languages.len(),
        model_config,
        S::from_f64_lit(config.k),
        &mut rng,
    );

    let mut items = Vec::new();
    for (idx, (_, corpus)) in corpora.iter().enumerate() {
        items.extend(prepare_corpus(
            corpus,
            idx,
            &token_vocab,
            &label_vocab,
            config.max_seq_len,
            &mut diagnostics,
        )?);
    }
    if items.is_empty() {
        return Err(TrainError::Config(
            "no usable sentences after preparation".to_string(),
        ));
    }

    let shapes: Vec<&Tensor<S>> = model.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut adam = AdamState::for_config(&shapes, config);
    drop(shapes);

    let lr = S::from_f64_lit(config.learning_rate);
    let lambda = S::from_f64_lit(config.lambda);
    let mut history = History::default();

    for epoch in 0..config.epochs {
        items.shuffle(&mut rng);
        let mut task_sum = S::zero();
        let mut lang_sum = S::zero();
        let mut tokens = 0usize;
        let mut sentences = 0usize;
        let mut correct_langs = 0usize;
        for batch in make_batches(&items, config.batch_size) {
            let tape = Tape::new();
            let staged = model.stage(&tape);
            let outcome = forward_pass(
                &tape,
                &staged,
                &batch,
                config.li_enabled,
                lambda,
                languages.len(),
            )?;
            let batch_tokens = batch.real_tokens();
            task_sum = task_sum
                + outcome.loss_task_value * S::from_usize_lit(batch_tokens);
            lang_sum = lang_sum
                + outcome.loss_lang_value * S::from_usize_lit(batch.sentences());
            tokens += batch_tokens;
            sentences += batch.sentences();
            correct_langs += outcome
                .language_predictions
                .iter()
                .zip(&batch.languages)
                .filter(|(p, g)| p == g)
                .count();
            backward_pass(
                &tape,
                &outcome,
                &staged,
                &mut model,
                &mut adam,
                lr,
                config.adv_enabled,
            )?;
        }
        history.rows.push(HistoryRow {
            epoch,
            loss_task: task_sum / S::from_usize_lit(tokens),
            loss_lang: lang_sum / S::from_usize_lit(sentences),
            disc_accuracy: correct_langs as f64 / sentences as f64,
        });
    }

    Ok(TrainOutcome {
        trained: TrainedModel {
            model,
            token_vocab,
            label_vocab,
            languages,
        },
        history,
        diagnostics,
    })
}

/// Tags a corpus with the trained model and returns a prediction corpus
/// mirroring the input's sentences and tokens. Tokens past `max_seq_len`
/// are left unannotated; label sequences decode tolerantly.
pub fn predict_corpus<S: Scalar>(
    trained: &TrainedModel<S>,
    corpus: &Corpus,
    max_seq_len: usize,
    li_enabled: bool,
) -> Result<Corpus, TrainError> {
    let mut all_instances = Vec::with_capacity(corpus.sentences.len());
    for sentence in &corpus.sentences {
        if sentence.tokens.is_empty() {
            all_instances.push(Vec::new());
            continue;
        }
        let cap = sentence.tokens.len().min(max_seq_len);
        let ids: Vec<usize> = sentence.tokens[..cap]
            .iter()
            .map(|t| trained.token_vocab.id_of(&t.form))
            .collect();
        let tape = Tape::new();
        let staged = trained.model.stage(&tape);
        let (logits, _) = staged.sentence_logits(&tape, &ids, li_enabled)?;
        let picks = tape.value(logits).softmax_rows().argmax_rows();
        let labels: Vec<String> = picks
            .iter()
            .map(|&i| trained.label_vocab.label(i).to_string())
            .collect();
        let decoded = decode_tags(&labels, DecodeMode::Tolerant)
            .expect("tolerant decode cannot fail");
        // Decoded positions are 1-based indices into the capped token list;
        // map them back to the sentence's real token positions.
        let instances = decoded
            .into_iter()
            .map(|mut m| {
                m.token_positions = m
                    .token_positions
                    .iter()
                    .map(|&p| sentence.tokens[p - 1].position)
                    .collect();
                m
            })
            .collect();
        all_instances.push(instances);
    }
    Ok(with_predictions(corpus, all_instances))
}

/// Training-set tagging accuracy of the trained model over prepared
/// sentences (used by smoke tests and experiment logs).
pub fn tagging_accuracy<S: Scalar>(
    trained: &TrainedModel<S>,
    items: &[PreparedSentence],
    li_enabled: bool,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for item in items {
        let tape = Tape::new();
        let staged = trained.model.stage(&tape);
        let (logits, _) = staged.sentence_logits(&tape, &item.ids, li_enabled)?;
        let picks = tape.value(logits).softmax_rows().argmax_rows();
        correct += picks
            .iter()
            .zip(&item.labels)
            .filter(|(p, g)| p == g)
            .count();
        total += item.labels.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoint I/O: a flat, versioned textual record of named tensors plus the
// vocabularies. Values print as shortest round-trip decimals, so a saved and
// reloaded model is bit-identical.
// ---------------------------------------------------------------------------

const CHECKPOINT_HEADER: &str = "mweforge-checkpoint v1";

pub fn save_checkpoint<S: Scalar>(trained: &TrainedModel<S>) -> String {
    let mut out = String::new();
    out.push_str(CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("radius {}\n", trained.model.encoder.radius));
    out.push_str(&format!(
        "summary {}\n",
        trained.model.encoder.summary.as_str()
    ));
    out.push_str(&format!("k {}\n", trained.model.li.k));
    out.push_str(&format!("languages {}\n", trained.languages.len()));
    for lang in &trained.languages {
        out.push_str(lang);
        out.push('\n');
    }
    out.push_str(&format!("labels {}\n", trained.label_vocab.len()));
    for label in trained.label_vocab.labels() {
        out.push_str(label);
        out.push('\n');
    }
    out.push_str(&format!("vocab {}\n", trained.token_vocab.len()));
    for form in trained.token_vocab.forms() {
        out.push_str(form);
        out.push('\n');
    }
    for (name, tensor) in trained.model.named_tensors() {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("tensor {name} {}\n", dims.join(" ")));
        let cols = tensor.cols().max(1);
        for (i, value) in tensor.data().iter().enumerate() {
            if i > 0 {
                out.push(if i % cols == 0 { '\n' } else { ' ' });
            }
            out.push_str(&format!("{value}"));
        }
        if !tensor.is_empty() {
            out.push('\n');
        }
    }
    out.push_str("end\n");
    out
}

pub fn load_checkpoint<S: Scalar>(text: &str) -> Result<TrainedModel<S>, TrainError> {
    let bad = |msg: String| TrainError::Checkpoint(msg);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file".to_string()))?;
    if header != CHECKPOINT_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }

    let mut radius = None;
    let mut summary = None;
    let mut k: Option<S> = None;
    let mut languages = Vec::new();
    let mut labels = Vec::new();
    let mut forms = Vec::new();
    let mut tensors: HashMap<String, Tensor<S>> = HashMap::new();

    while let Some(line) = lines.next() {
        if line == "end" {
            break;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("unparseable line {line:?}")))?;
        match key {
            "radius" => {
                radius = Some(rest.parse::<usize>().map_err(|_| bad(format!("bad radius {rest:?}")))?)
            }
            "summary" => {
                summary = Some(
                    SummaryMode::parse(rest)
                        .ok_or_else(|| bad(format!("bad summary mode {rest:?}")))?,
                )
            }
            "k" => {
                k = Some(
                    rest.parse::<S>()
                        .map_err(|_| bad(format!("bad k value {rest:?}")))?,
                )
            }
            "languages" | "labels" | "vocab" => {
                let count: usize = rest
                    .parse()
                    .map_err(|_| bad(format!("bad count {rest:?}")))?;
                let target = match key {
                    "languages" => &mut languages,
                    "labels" => &mut labels,
                    _ => &mut forms,
                };
                for _ in 0..count {
                    let entry = lines
                        .next()
                        .ok_or_else(|| bad(format!("truncated {key} section")))?;
                    target.push(entry.to_string());
                }
            }
            "tensor" => {
                let mut parts = rest.split(' ');
                let name = parts
                    .next()
                    .ok_or_else(|| bad("tensor line without a name".to_string()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {name}"))))
                    .collect::<Result<_, _>>()?;
                let expect: usize = shape.iter().product();
                let mut data = Vec::with_capacity(expect);
                while data.len() < expect {
                    let row = lines
                        .next()
                        .ok_or_else(|| bad(format!("truncated tensor {name}")))?;
                    for field in row.split(' ') {
                        let value = field
                            .parse::<S>()
                            .map_err(|_| bad(format!("bad value in tensor {name}")))?;
                        data.push(value);
                    }
                }
                if data.len() != expect {
                    return Err(bad(format!("tensor {name} has wrong element count")));
                }
                tensors.insert(name, Tensor::new(shape, data));
            }
            _ => return Err(bad(format!("unknown section {key:?}"))),
        }
    }

    let radius = radius.ok_or_else(|| bad("missing radius".to_string()))?;
    let summary = summary.ok_or_else(|| bad("missing summary mode".to_string()))?;
    let k = k.ok_or_else(|| bad("missing k".to_string()))?;
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))
    };

    let embedding = take("encoder.embedding")?;
    let mut mixers = Vec::with_capacity(2 * radius + 1);
    for i in 0..(2 * radius + 1) {
        mixers.push(take(&format!("encoder.mixer.{i}"))?);
    }
    let model = Model {
        encoder: crate::layers::ToyEncoder {
            embedding,
            mixers,
            radius,
            summary,
        },
        li: crate::layers::LateralInhibitionLayer {
            w: take("li.w")?,
            b: take("li.b")?,
            k,
        },
        head: crate::layers::LinearHead {
            w: take("head.w")?,
            b: take("head.b")?,
        },
        discriminator: crate::layers::LanguageDiscriminator {
            hidden_w: take("ld.hidden_w")?,
            hidden_b: take("ld.hidden_b")?,
            out_w: take("ld.out_w")?,
            out_b: take("ld.out_b")?,
        },
    };
    if !tensors.is_empty() {
        let mut names: Vec<&String> = tensors.keys().collect();
        names.sort();
        return Err(bad(format!("unexpected tensors: {names:?}")));
    }

    Ok(TrainedModel {
        model,
        token_vocab: TokenVocab::from_forms(forms),
        label_vocab: LabelVocab::new(labels),
        languages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cupt::{MweCategory, MweInstance, Sentence, Token};

    fn toy_sentence(id: &str, forms: &[&str], mwes: Vec<MweInstance>) -> Sentence {
        let mut s = Sentence {
            sentence_id: id.to_string(),
            metadata_lines: vec![format!("# source_sent_id = {id}")],
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

    fn toy_corpus(prefix: &str, n: usize) -> Corpus {
        let sentences = (0..n)
            .map(|i| {
                let w1 = format!("{prefix}a{}", i % 5);
                let w2 = format!("{prefix}b{}", i % 7);
                let w3 = format!("{prefix}c{}", i % 3);
                let mwes = if i % 2 == 0 {
                    vec![MweInstance::new(1, Some(MweCategory::Vid), vec![1, 2])]
                } else {
                    vec![]
                };
                toy_sentence(&format!("{prefix}-{i}"), &[&w1, &w2, &w3], mwes)
            })
            .collect();
        Corpus { sentences }
    }

    #[test]
    fn method_names_are_the_five_variants() {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "monolingual",
                "multilingual",
                "multilingual+LI",
                "multilingual+Adv",
                "multilingual+LI+Adv"
            ]
        );
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()), Some(m));
        }
        assert_eq!(Method::parse("nonsense"), None);
    }

    #[test]
    fn config_defaults_match_reference_setting() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.learning_rate, 3e-5);
        assert_eq!(c.max_seq_len, 150);
        assert_eq!(c.k, 10.0);
        assert_eq!(c.lambda, 0.01);
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_epsilon), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn config_kv_round_trip() {
        let mut c = TrainConfig::default();
        c.epochs = 3;
        c.lambda = 1.5;
        c.li_enabled = true;
        let text = c.to_kv_text();
        let parsed = TrainConfig::from_kv_text(&text).unwrap();
        assert_eq!(parsed, c);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::from_kv_text("nonsense = 1\n").is_err());
        assert!(TrainConfig::from_kv_text("epochs = many\n").is_err());
        assert!(TrainConfig::from_kv_text("learning_rate = -1\n").is_err());
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(1.0);
        let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &[g], &mut state, 3e-5).unwrap();
        let update = 1.0 - p.item();
        assert!((update - 3e-5).abs() < 1e-9, "update {update}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f64>::vector(vec![1.0, -2.0]);
        let before = p.clone();
        let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
        // Put something into the moments first, then decay with zero grads.
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::<f64>::vector(vec![0.5, -0.5, 1.5]);
            let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
            for step in 0..5 {
                let g = Tensor::vector(vec![0.1 * step as f64, -0.2, 0.3]);
                adam_step(&mut [&mut p], &[g], &mut state, 0.01).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_shape_mismatch_errors() {
        let mut p = Tensor::<f64>::vector(vec![1.0]);
        let mut state = AdamState::new(&[&p], 0.9, 0.999, 1e-8);
        let err = adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state, 0.01).unwrap_err();
        assert!(err.to_string().contains("shape"));
    }

    #[test]
    fn batching_arithmetic() {
        let items: Vec<PreparedSentence> = (0..70)
            .map(|i| PreparedSentence {
                ids: vec![i % 7, 1, 2],
                labels: vec![0, 0, 0],
                language: 0,
            })
            .collect();
        let batches = make_batches(&items, 32);
        let sizes: Vec<usize> = batches.iter().map(|b| b.sentences()).collect();
        assert_eq!(sizes, vec![32, 32, 6]);
    }

    #[test]
    fn truncation_drops_out_of_range_gold() {
        let mut long = toy_sentence(
            "long",
            &["a", "b", "c", "d", "e", "f"],
            vec![
                MweInstance::new(1, Some(MweCategory::Vid), vec![1, 2]),
                MweInstance::new(2, Some(MweCategory::Vid), vec![4, 6]),
            ],
        );
        long.sync_cells();
        let corpus = Corpus {
            sentences: vec![long],
        };
        let vocab = TokenVocab::build(&[&corpus]);
        let labels = LabelVocab::for_categories(&corpus.category_names(), false);
        let mut diags = Vec::new();
        let items = prepare_corpus(&corpus, 0, &vocab, &labels, 4, &mut diags).unwrap();
        assert_eq!(items[0].ids.len(), 4);
        // Only the in-range instance remains; B-VID at index 0.
        assert_eq!(items[0].labels[0], labels.index_of("B-VID").unwrap());
        assert!(diags.iter().any(|d| d.message.contains("truncated")));
        assert!(diags.iter().any(|d| d.message.contains("length cap")));
    }

    #[test]
    fn training_is_deterministic_and_loss_decreases() {
        let corpora = vec![
            ("x".to_string(), toy_corpus("x", 30)),
            ("y".to_string(), toy_corpus("y", 30)),
        ];
        let mut config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.05,
            max_seq_len: 10,
            seed: 11,
            ..TrainConfig::default()
        };
        config.apply_method(Method::MultilingualLiAdv);
        let model_config = ModelConfig {
            embed_dim: 8,
            ..ModelConfig::default()
        };
        let a = train::<f64>(&corpora, &config, &model_config).unwrap();
        let b = train::<f64>(&corpora, &config, &model_config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.trained.model, b.trained.model);
        let first = &a.history.rows[0];
        let last = a.history.rows.last().unwrap();
        assert!(last.loss_task < first.loss_task);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let corpora = vec![("x".to_string(), toy_corpus("x", 10))];
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let model_config = ModelConfig::default();
        let outcome = train::<f64>(&corpora, &config, &model_config).unwrap();
        assert!(outcome.history.rows.is_empty());

        // Same seed, fresh init: identical parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fresh: Model<f64> = Model::init(
            outcome.trained.token_vocab.len(),
            outcome.trained.label_vocab.len(),
            1,
            &model_config,
            10.0,
            &mut rng,
        );
        assert_eq!(outcome.trained.model, fresh);
    }

    #[test]
    fn single_language_lang_loss_is_zero() {
        let corpora = vec![("only".to_string(), toy_corpus("o", 12))];
        let mut config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.01,
            seed: 3,
            ..TrainConfig::default()
        };
        config.apply_method(Method::MultilingualAdv);
        let outcome = train::<f64>(&corpora, &config, &ModelConfig::default()).unwrap();
        // ln(1) = 0 for a one-language discriminator.
        assert!(outcome.history.rows[0].loss_lang.abs() < 1e-12);
        assert!(outcome
            .diagnostics
            .iter()
            .any(|d| d.message.contains("single language")));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let corpora = vec![("bad".to_string(), Corpus::default())];
        let err = train::<f64>(&corpora, &TrainConfig::default(), &ModelConfig::default())
            .unwrap_err();
        assert!(matches!(err, TrainError::EmptyCorpus(_)));
    }

    #[test]
    fn untrained_uniform_head_loss_is_ln_c() {
        let corpora = vec![("x".to_string(), toy_corpus("x", 8))];
        let config = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let outcome = train::<f64>(&corpora, &config, &ModelConfig::default()).unwrap();
        let trained = outcome.trained;
        let mut diags = Vec::new();
        let items = prepare_corpus(
            &corpora[0].1,
            0,
            &trained.token_vocab,
            &trained.label_vocab,
            150,
            &mut diags,
        )
        .unwrap();
        let batch = &make_batches(&items, 8)[0];
        let tape = Tape::new();
        let staged = trained.model.stage(&tape);
        let outcome = forward_pass(&tape, &staged, batch, false, 0.01, 1).unwrap();
        let expect = (trained.label_vocab.len() as f64).ln();
        assert!(
            (outcome.loss_task_value - expect).abs() < 1e-12,
            "loss {} vs ln(c) {expect}",
            outcome.loss_task_value
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let corpora = vec![
            ("x".to_string(), toy_corpus("x", 10)),
            ("y".to_string(), toy_corpus("y", 10)),
        ];
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 0.02,
            seed: 9,
            ..TrainConfig::default()
        };
        let outcome = train::<f64>(&corpora, &config, &ModelConfig::default()).unwrap();
        let text = save_checkpoint(&outcome.trained);
        let loaded = load_checkpoint::<f64>(&text).unwrap();
        assert_eq!(loaded, outcome.trained);
        assert_eq!(save_checkpoint(&loaded), text);
    }

    #[test]
    fn prediction_produces_aligned_corpus() {
        let corpora = vec![("x".to_string(), toy_corpus("x", 20))];
        let config = TrainConfig {
            epochs: 6,
            batch_size: 4,
            learning_rate: 0.08,
            seed: 5,
            ..TrainConfig::default()
        };
        let outcome = train::<f64>(&corpora, &config, &ModelConfig::default()).unwrap();
        let pred = predict_corpus(&outcome.trained, &corpora[0].1, 150, false).unwrap();
        assert_eq!(pred.sentences.len(), corpora[0].1.sentences.len());
        for (g, p) in corpora[0].1.sentences.iter().zip(&pred.sentences) {
            assert_eq!(g.tokens.len(), p.tokens.len());
        }
    }
}
