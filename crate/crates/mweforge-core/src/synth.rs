//! Seeded synthetic corpora with controllable seen/unseen structure.
//!
//! Each language gets a disjoint vocabulary and a set of 2–3 lexeme
//! patterns implanted as annotated expressions, contiguous or gapped. Train
//! and dev use only the "seen" patterns; the test split mixes in held-out
//! patterns built from lexemes that are never annotated in train/dev, so a
//! known fraction of test gold is unseen by lemma multiset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cupt::{
    Corpus, MweCategory, MweInstance, Sentence, Token, GLOBAL_COLUMNS_LINE,
};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub languages: usize,
    /// Sentences per language, before the split.
    pub sentences: usize,
    pub seed: u64,
    /// Vocabulary size per language.
    pub vocab_size: usize,
    /// Patterns available to train/dev/test vs test-only.
    pub seen_patterns: usize,
    pub unseen_patterns: usize,
    /// Probability that an implanted expression is discontinuous.
    pub gap_prob: f64,
    /// Probability that a test-split expression uses a held-out pattern.
    pub unseen_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            languages: 3,
            sentences: 300,
            seed: 42,
            vocab_size: 200,
            seen_patterns: 8,
            unseen_patterns: 4,
            gap_prob: 0.3,
            unseen_prob: 0.35,
        }
    }
}

/// One generated language with its three splits.
#[derive(Debug, Clone)]
pub struct LanguageData {
    pub name: String,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

struct Pattern {
    lexemes: Vec<usize>,
    category: MweCategory,
}

const CATEGORY_CYCLE: [&str; 5] = ["VID", "LVC.full", "IRV", "VPC.full", "MVC"];

pub fn generate(config: &SynthConfig) -> Vec<LanguageData> {
    assert!(config.languages >= 1, "need at least one language");
    assert!(config.vocab_size >= 40, "vocabulary too small for patterns");
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::with_capacity(config.languages);
    for lang in 0..config.languages {
        // Independent, reproducible stream per language.
        let lang_seed: u64 = master.gen();
        out.push(generate_language(config, lang, lang_seed));
    }
    out
}

fn generate_language(config: &SynthConfig, lang: usize, seed: u64) -> LanguageData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = format!("l{lang}");

    let forms: Vec<String> = (0..config.vocab_size)
        .map(|i| format!("{name}w{i:03}"))
        .collect();

    // Pattern lexemes come from a reserved range so they are never fillers;
    // held-out patterns use lexemes that train/dev never annotate.
    let mut next_lexeme = 0usize;
    let mut make_patterns = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Pattern> {
        (0..count)
            .map(|i| {
                let len = if rng.gen_bool(0.5) { 2 } else { 3 };
                let lexemes: Vec<usize> = (0..len)
                    .map(|_| {
                        let l = next_lexeme;
                        next_lexeme += 1;
                        l
                    })
                    .collect();
                Pattern {
                    lexemes,
                    category: MweCategory::parse(CATEGORY_CYCLE[i % CATEGORY_CYCLE.len()]),
                }
            })
            .collect()
    };
    let seen = make_patterns(config.seen_patterns, &mut rng);
    let unseen = make_patterns(config.unseen_patterns, &mut rng);
    let filler_start = next_lexeme;
    assert!(filler_start + 10 < config.vocab_size, "vocabulary exhausted");

    let n = config.sentences;
    let train_n = (n * 60) / 100;
    let dev_n = (n * 15) / 100;
    let test_n = n - train_n - dev_n;

    let train = build_split(config, &name, "train", train_n, &forms, &seen, &[], filler_start, &mut rng);
    let dev = build_split(config, &name, "dev", dev_n, &forms, &seen, &[], filler_start, &mut rng);
    let test = build_split(
        config,
        &name,
        "test",
        test_n,
        &forms,
        &seen,
        &unseen,
        filler_start,
        &mut rng,
    );

    LanguageData {
        name,
        train,
        dev,
        test,
    }
}

#[allow(clippy::too_many_arguments)]
fn build_split(
    config: &SynthConfig,
    lang: &str,
    split: &str,
    count: usize,
    forms: &[String],
    seen: &[Pattern],
    unseen: &[Pattern],
    filler_start: usize,
    rng: &mut ChaCha8Rng,
) -> Corpus {
    let sentences = (0..count)
        .map(|i| {
            let mut sentence = build_sentence(config, forms, seen, unseen, filler_start, rng);
            sentence.sentence_id = format!("synth-{lang}-{split}-{i}");
            let text: String = sentence
                .tokens
                .iter()
                .map(|t| t.form.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            let mut metadata = Vec::new();
            if i == 0 {
                metadata.push(GLOBAL_COLUMNS_LINE.to_string());
            }
            metadata.push(format!("# source_sent_id = {}", sentence.sentence_id));
            metadata.push(format!("# text = {text}"));
            sentence.metadata_lines = metadata;
            sentence
        })
        .collect();
    Corpus { sentences }
}

fn build_sentence(
    config: &SynthConfig,
    forms: &[String],
    seen: &[Pattern],
    unseen: &[Pattern],
    filler_start: usize,
    rng: &mut ChaCha8Rng,
) -> Sentence {
    let mwe_count = {
        let roll: f64 = rng.gen();
        if roll < 0.2 {
            0
        } else if roll < 0.85 {
            1
        } else {
            2
        }
    };

    let filler_pos = &["NOUN", "ADJ", "ADV"];
    let filler = |rng: &mut ChaCha8Rng, tokens: &mut Vec<(usize, &'static str)>, n: usize| {
        for _ in 0..n {
            let lexeme = rng.gen_range(filler_start..forms.len());
            tokens.push((lexeme, filler_pos[lexeme % filler_pos.len()]));
        }
    };

    // (lexeme index, upos) stream plus the implanted instances' slots.
    let mut tokens: Vec<(usize, &'static str)> = Vec::new();
    let mut instances: Vec<(Vec<usize>, MweCategory)> = Vec::new();

    let lead = rng.gen_range(1..4);
    filler(rng, &mut tokens, lead);
    for _ in 0..mwe_count {
        let pattern = if !unseen.is_empty() && rng.gen_bool(config.unseen_prob) {
            &unseen[rng.gen_range(0..unseen.len())]
        } else {
            &seen[rng.gen_range(0..seen.len())]
        };
        let gapped = rng.gen_bool(config.gap_prob);
        let mut positions = Vec::with_capacity(pattern.lexemes.len());
        for (ci, &lexeme) in pattern.lexemes.iter().enumerate() {
            if ci == 1 && gapped {
                let gap = rng.gen_range(1..3);
                filler(rng, &mut tokens, gap);
            }
            positions.push(tokens.len() + 1);
            tokens.push((lexeme, if ci == 0 { "VERB" } else { "NOUN" }));
        }
        instances.push((positions, pattern.category.clone()));
        let trail = rng.gen_range(1..3);
        filler(rng, &mut tokens, trail);
    }
    if mwe_count == 0 {
        let body = rng.gen_range(3..7);
        filler(rng, &mut tokens, body);
    }

    let tokens: Vec<Token> = tokens
        .iter()
        .enumerate()
        .map(|(i, (lexeme, upos))| {
            let form = &forms[*lexeme];
            let mut token = Token::new(i + 1, form, form, upos);
            // A tiny plausible dependency skeleton: first token is the root.
            let (head, deprel) = if i == 0 { (0, "root") } else { (1, "dep") };
            token.other_cols = vec![
                "_".to_string(),
                "_".to_string(),
                head.to_string(),
                deprel.to_string(),
                "_".to_string(),
                "_".to_string(),
            ];
            token
        })
        .collect();

    let mwes = instances
        .into_iter()
        .enumerate()
        .map(|(i, (positions, category))| {
            MweInstance::new((i + 1) as u32, Some(category), positions)
        })
        .collect();

    let mut sentence = Sentence {
        sentence_id: String::new(),
        metadata_lines: vec![],
        tokens,
        mwes,
        raw_lines: vec![],
    };
    sentence.canonical_renumber();
    sentence
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cupt::{parse_cupt, write_cupt};
    use crate::eval::unseen_partition;

    #[test]
    fn generates_parseable_corpora() {
        let config = SynthConfig {
            languages: 3,
            sentences: 60,
            seed: 7,
            ..SynthConfig::default()
        };
        let data = generate(&config);
        assert_eq!(data.len(), 3);
        for lang in &data {
            for corpus in [&lang.train, &lang.dev, &lang.test] {
                assert!(!corpus.sentences.is_empty());
                let text = write_cupt(corpus).unwrap();
                let reparsed = parse_cupt(&text).unwrap();
                assert_eq!(&reparsed.corpus, corpus);
                assert!(reparsed.diagnostics.is_empty());
            }
        }
    }

    #[test]
    fn same_seed_is_identical() {
        let config = SynthConfig {
            sentences: 40,
            seed: 123,
            ..SynthConfig::default()
        };
        let a = generate(&config);
        let b = generate(&config);
        for (la, lb) in a.iter().zip(&b) {
            assert_eq!(
                write_cupt(&la.train).unwrap(),
                write_cupt(&lb.train).unwrap()
            );
            assert_eq!(write_cupt(&la.test).unwrap(), write_cupt(&lb.test).unwrap());
        }
    }

    #[test]
    fn test_split_has_enough_unseen_gold() {
        let config = SynthConfig {
            sentences: 200,
            seed: 99,
            ..SynthConfig::default()
        };
        for lang in generate(&config) {
            let reference = Corpus::concat(&[&lang.train, &lang.dev]);
            let mut diags = Vec::new();
            let partition = unseen_partition(&lang.test, &reference, &mut diags);
            let total = partition.seen.len() + partition.unseen.len();
            assert!(total > 0);
            let share = partition.unseen.len() as f64 / total as f64;
            assert!(share >= 0.2, "unseen share {share} in {}", lang.name);
        }
    }

    #[test]
    fn vocabularies_are_disjoint() {
        let config = SynthConfig {
            languages: 2,
            sentences: 30,
            seed: 5,
            ..SynthConfig::default()
        };
        let data = generate(&config);
        let forms_of = |c: &Corpus| -> std::collections::HashSet<String> {
            c.sentences
                .iter()
                .flat_map(|s| s.tokens.iter().map(|t| t.form.clone()))
                .collect()
        };
        let a = forms_of(&data[0].train);
        let b = forms_of(&data[1].train);
        assert!(a.is_disjoint(&b));
    }
}
