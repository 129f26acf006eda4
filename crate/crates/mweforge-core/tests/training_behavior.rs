//! End-to-end training behavior on small seeded synthetic corpora.

use mweforge_core::cupt::Corpus;
use mweforge_core::layers::ModelConfig;
use mweforge_core::synth::{generate, SynthConfig};
use mweforge_core::train::{train, Method, TrainConfig};

fn smoke_corpora(languages: usize, sentences: usize, seed: u64) -> Vec<(String, Corpus)> {
    let config = SynthConfig {
        languages,
        sentences,
        seed,
        ..SynthConfig::default()
    };
    generate(&config)
        .into_iter()
        .map(|lang| (lang.name, lang.train))
        .collect()
}

#[test]
fn all_five_variants_decrease_training_loss() {
    // 50-sentence corpora per language; every variant must strictly reduce
    // the task loss from the first epoch to the last.
    let corpora = smoke_corpora(2, 50, 2024);
    for method in Method::ALL {
        let mut config = TrainConfig {
            epochs: 4,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 5,
            ..TrainConfig::default()
        };
        config.apply_method(method);
        let subset: Vec<(String, Corpus)> = if method.is_monolingual() {
            corpora[..1].to_vec()
        } else {
            corpora.clone()
        };
        let outcome = train::<f64>(
            &subset,
            &config,
            &ModelConfig {
                embed_dim: 12,
                ..ModelConfig::default()
            },
        )
        .unwrap();
        let first = outcome.history.rows.first().unwrap().loss_task;
        let last = outcome.history.rows.last().unwrap().loss_task;
        assert!(
            last < first,
            "{}: loss went {first} -> {last}",
            method.as_str()
        );
    }
}

#[test]
fn history_is_bit_identical_across_runs() {
    let corpora = smoke_corpora(2, 40, 77);
    let mut config = TrainConfig {
        epochs: 3,
        batch_size: 8,
        learning_rate: 0.05,
        seed: 9,
        ..TrainConfig::default()
    };
    config.apply_method(Method::MultilingualLiAdv);
    let model_config = ModelConfig {
        embed_dim: 10,
        ..ModelConfig::default()
    };
    let a = train::<f64>(&corpora, &config, &model_config).unwrap();
    let b = train::<f64>(&corpora, &config, &model_config).unwrap();
    assert_eq!(a.history.render_csv(), b.history.render_csv());
    assert_eq!(a.trained.model, b.trained.model);
}

#[test]
fn generic_core_also_trains_in_single_precision() {
    let corpora = smoke_corpora(1, 30, 4);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 0.05,
        seed: 1,
        ..TrainConfig::default()
    };
    let outcome = train::<f32>(
        &corpora,
        &config,
        &ModelConfig {
            embed_dim: 8,
            ..ModelConfig::default()
        },
    )
    .unwrap();
    let first = outcome.history.rows.first().unwrap().loss_task;
    let last = outcome.history.rows.last().unwrap().loss_task;
    assert!(last < first);
}
