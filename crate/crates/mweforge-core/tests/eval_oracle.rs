//! The production scorer must agree exactly with an independent brute-force
//! scorer on randomized inputs. The oracle here shares no code with the
//! production path: matching is an exhaustive backtracking assignment and
//! unseen-ness is a linear scan over the reference corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mweforge_core::cupt::{Corpus, MweCategory, MweInstance, Sentence, Token};
use mweforge_core::eval::{evaluate, strict_match, EvalOptions, MatchCounts};

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

fn same_instance(a: &MweInstance, b: &MweInstance, category_strict: bool) -> bool {
    let mut pa = a.token_positions.clone();
    let mut pb = b.token_positions.clone();
    pa.sort_unstable();
    pb.sort_unstable();
    if pa != pb {
        return false;
    }
    if category_strict {
        let ca = a.category.as_ref().map(|c| c.as_str());
        let cb = b.category.as_ref().map(|c| c.as_str());
        if ca != cb {
            return false;
        }
    }
    true
}

/// Maximum one-to-one assignment by exhaustive backtracking.
fn best_assignment(
    gold: &[&MweInstance],
    pred: &[&MweInstance],
    used: &mut Vec<bool>,
    at: usize,
    category_strict: bool,
) -> usize {
    if at == pred.len() {
        return 0;
    }
    // Option 1: leave pred[at] unmatched.
    let mut best = best_assignment(gold, pred, used, at + 1, category_strict);
    // Option 2: match it against any unused equal gold instance.
    for (gi, g) in gold.iter().enumerate() {
        if !used[gi] && same_instance(g, pred[at], category_strict) {
            used[gi] = true;
            let with = 1 + best_assignment(gold, pred, used, at + 1, category_strict);
            used[gi] = false;
            best = best.max(with);
        }
    }
    best
}

fn oracle_match(gold: &[MweInstance], pred: &[MweInstance], category_strict: bool) -> MatchCounts {
    let gold_refs: Vec<&MweInstance> = gold.iter().collect();
    let pred_refs: Vec<&MweInstance> = pred.iter().collect();
    let mut used = vec![false; gold.len()];
    let tp = best_assignment(&gold_refs, &pred_refs, &mut used, 0, category_strict);
    MatchCounts::new(tp, pred.len() - tp, gold.len() - tp)
}

fn oracle_lemmas(sentence: &Sentence, mwe: &MweInstance) -> Vec<String> {
    let mut lemmas: Vec<String> = mwe
        .token_positions
        .iter()
        .map(|&p| {
            let token = sentence
                .tokens
                .iter()
                .find(|t| t.position == p)
                .expect("position resolves");
            if token.lemma == "_" {
                token.form.to_lowercase()
            } else {
                token.lemma.to_lowercase()
            }
        })
        .collect();
    lemmas.sort();
    lemmas
}

fn oracle_is_seen(key: &[String], reference: &Corpus) -> bool {
    for sentence in &reference.sentences {
        for mwe in &sentence.mwes {
            if oracle_lemmas(sentence, mwe) == key {
                return true;
            }
        }
    }
    false
}

struct OracleScores {
    global: MatchCounts,
    unseen: MatchCounts,
}

fn oracle_evaluate(
    gold: &Corpus,
    pred: &Corpus,
    reference: &Corpus,
    category_strict: bool,
) -> OracleScores {
    let mut global = MatchCounts::default();
    let mut unseen = MatchCounts::default();
    for (gs, ps) in gold.sentences.iter().zip(&pred.sentences) {
        global.merge(&oracle_match(&gs.mwes, &ps.mwes, category_strict));
        let gold_unseen: Vec<MweInstance> = gs
            .mwes
            .iter()
            .filter(|m| !oracle_is_seen(&oracle_lemmas(gs, m), reference))
            .cloned()
            .collect();
        let pred_unseen: Vec<MweInstance> = ps
            .mwes
            .iter()
            .filter(|m| !oracle_is_seen(&oracle_lemmas(ps, m), reference))
            .cloned()
            .collect();
        unseen.merge(&oracle_match(&gold_unseen, &pred_unseen, category_strict));
    }
    OracleScores { global, unseen }
}

// ---------------------------------------------------------------------------
// Random test-case construction
// ---------------------------------------------------------------------------

fn random_instances(rng: &mut ChaCha8Rng, n_tokens: usize, max_mwes: usize) -> Vec<MweInstance> {
    let cats = [
        Some(MweCategory::Vid),
        Some(MweCategory::LvcFull),
        Some(MweCategory::Irv),
        None,
    ];
    let count = rng.gen_range(0..=max_mwes);
    (0..count)
        .map(|i| {
            let size = rng.gen_range(1..=3.min(n_tokens));
            let mut positions = std::collections::BTreeSet::new();
            while positions.len() < size {
                positions.insert(rng.gen_range(1..=n_tokens));
            }
            MweInstance::new(
                (i + 1) as u32,
                cats[rng.gen_range(0..cats.len())].clone(),
                positions.into_iter().collect(),
            )
        })
        .collect()
}

fn random_sentence(rng: &mut ChaCha8Rng, id: usize, vocab: usize, max_mwes: usize) -> Sentence {
    let n = rng.gen_range(2..9);
    let tokens: Vec<Token> = (1..=n)
        .map(|i| {
            let w = format!("w{}", rng.gen_range(0..vocab));
            let mut t = Token::new(i, &w, &w, "NOUN");
            if rng.gen_bool(0.05) {
                t.lemma = "_".to_string();
            }
            t
        })
        .collect();
    let mut s = Sentence {
        sentence_id: format!("r{id}"),
        metadata_lines: vec![],
        tokens,
        mwes: random_instances(rng, n, max_mwes),
        raw_lines: vec![],
    };
    s.sync_cells();
    s
}

fn random_corpus(rng: &mut ChaCha8Rng, sentences: usize, vocab: usize) -> Corpus {
    Corpus {
        sentences: (0..sentences)
            .map(|i| random_sentence(rng, i, vocab, 4))
            .collect(),
    }
}

/// A prediction corpus over the same sentences: a mix of copied gold
/// instances (some with mutated categories) and freshly random ones.
fn perturbed_predictions(rng: &mut ChaCha8Rng, gold: &Corpus) -> Corpus {
    let sentences = gold
        .sentences
        .iter()
        .map(|s| {
            let mut mwes = Vec::new();
            for m in &s.mwes {
                if rng.gen_bool(0.6) {
                    let mut copy = m.clone();
                    if rng.gen_bool(0.2) {
                        copy.category = Some(MweCategory::Mvc);
                    }
                    mwes.push(copy);
                }
            }
            let n = s.tokens.len();
            mwes.extend(random_instances(rng, n, 2));
            for (i, m) in mwes.iter_mut().enumerate() {
                m.mwe_id = (i + 1) as u32;
            }
            let mut out = s.clone();
            out.mwes = mwes;
            out.sync_cells();
            out
        })
        .collect();
    Corpus { sentences }
}

// ---------------------------------------------------------------------------
// Agreement checks
// ---------------------------------------------------------------------------

#[test]
fn strict_match_agrees_with_backtracking_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(424_242);
    for case in 0..1_000 {
        let n = rng.gen_range(2..12);
        let gold = random_instances(&mut rng, n, 6);
        let pred = random_instances(&mut rng, n, 6);
        for strict in [false, true] {
            let ours = strict_match(&gold, &pred, strict);
            let oracle = oracle_match(&gold, &pred, strict);
            assert_eq!(ours, oracle, "case {case}, strict {strict}");
        }
    }
}

#[test]
fn evaluate_agrees_with_brute_force_scorer() {
    let mut rng = ChaCha8Rng::seed_from_u64(171_717);
    for case in 0..120 {
        let vocab = rng.gen_range(4..14);
        let gold_sentences = rng.gen_range(1..8);
        let gold = random_corpus(&mut rng, gold_sentences, vocab);
        let pred = perturbed_predictions(&mut rng, &gold);
        let ref_sentences = rng.gen_range(1..6);
        let reference = random_corpus(&mut rng, ref_sentences, vocab);
        for strict in [false, true] {
            let ours = evaluate(&gold, &pred, &reference, &EvalOptions { category_strict: strict })
                .unwrap();
            let oracle = oracle_evaluate(&gold, &pred, &reference, strict);
            assert_eq!(ours.global.counts, oracle.global, "case {case} global");
            assert_eq!(ours.unseen.counts, oracle.unseen, "case {case} unseen");
            // Same counts and same arithmetic: scores must agree exactly.
            let op = mweforge_core::eval::prf(&oracle.global);
            assert_eq!(
                (ours.global.precision, ours.global.recall, ours.global.f1),
                op,
                "case {case} scores"
            );
        }
    }
}

#[test]
fn randomized_symmetry_of_gold_and_pred() {
    let mut rng = ChaCha8Rng::seed_from_u64(33_333);
    for _ in 0..300 {
        let n = rng.gen_range(2..10);
        let a = random_instances(&mut rng, n, 5);
        let b = random_instances(&mut rng, n, 5);
        let ab = strict_match(&a, &b, false);
        let ba = strict_match(&b, &a, false);
        assert_eq!(ab.tp, ba.tp);
        assert_eq!(ab.fp, ba.fn_);
        assert_eq!(ab.fn_, ba.fp);
    }
}
