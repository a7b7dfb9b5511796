mod common;

use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seqrep::corpus::TokenSequence;
use seqrep::hmm::{forward_backward, HmmModel};
use seqrep::train::{init_model, train_hmm, train_hmm_from, TrainConfig};

fn to_seqs(raw: Vec<Vec<u32>>) -> Vec<TokenSequence> {
    raw.into_iter().map(|ids| TokenSequence::from_ids(ids).unwrap()).collect()
}

fn per_token_ll(model: &HmmModel, data: &[TokenSequence]) -> f64 {
    let tokens: usize = data.iter().map(|s| s.len()).sum();
    let total: f64 = data.iter().map(|s| forward_backward(model, s).unwrap().log_likelihood).sum();
    total / tokens as f64
}

/// Three classes with mostly disjoint emission supports and sticky-but-mixing
/// transitions.
fn generator() -> HmmModel {
    let v = 20;
    let emission = (0..3)
        .map(|c| {
            let mut row = vec![0.005; v];
            for w in (c * 7)..((c * 7 + 7).min(v)) {
                row[w] = 1.0;
            }
            let s: f64 = row.iter().sum();
            row.into_iter().map(|x| x / s).collect()
        })
        .collect();
    HmmModel::from_rows(
        vec![0.5, 0.3, 0.2],
        vec![vec![0.1, 0.7, 0.2], vec![0.2, 0.1, 0.7], vec![0.6, 0.3, 0.1]],
        emission,
    )
    .unwrap()
}

#[test]
fn online_em_recovers_a_generating_model() {
    let gen = generator();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let train = to_seqs(sample_hmm(&gen, &mut rng, 50_000, 5..=15));
    let held_out = to_seqs(sample_hmm(&gen, &mut rng, 2_000, 5..=15));
    let config = TrainConfig {
        n_classes: 3,
        epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let model = init_model(3, 20, config.seed).unwrap();
    let report = train_hmm_from(model, &train, &config).unwrap();
    let reference = per_token_ll(&gen, &held_out);
    let fitted = per_token_ll(&report.model, &held_out);
    println!("held-out ll/token: generator {reference:.5}, trained {fitted:.5}");
    assert!((fitted - reference).abs() < 0.05);

    let values: Vec<f64> = report.progress.iter().map(|p| p.avg_log_likelihood).collect();
    assert!(values.len() >= 10);
    let tenth = values.len() / 10;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    assert!(mean(&values[values.len() - tenth..]) >= mean(&values[..tenth]));
}

#[test]
fn batch_em_never_decreases_likelihood() {
    let gen = generator();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = to_seqs(sample_hmm(&gen, &mut rng, 300, 3..=10));
    let config = TrainConfig {
        n_classes: 3,
        k: Some(3),
        alpha: 1.0,
        t0: 0.0,
        minibatch: data.len(),
        burn_in: 0,
        epochs: 1,
        smoothing: 0.0,
        ..TrainConfig::default()
    };
    let mut model = init_model(3, 20, 1).unwrap();
    let mut previous = per_token_ll(&model, &data);
    for iteration in 0..25 {
        model = train_hmm_from(model, &data, &config).unwrap().model;
        let current = per_token_ll(&model, &data);
        assert!(current >= previous - 1e-8, "iteration {iteration}: {previous} -> {current}");
        previous = current;
    }
}

#[test]
fn permuting_classes_keeps_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = to_seqs(sample_hmm(&generator(), &mut rng, 500, 2..=12));
    let config = TrainConfig {
        n_classes: 3,
        minibatch: 50,
        ..TrainConfig::default()
    };
    let model = train_hmm_from(init_model(3, 20, 3).unwrap(), &data, &config).unwrap().model;
    for perm in [[1, 2, 0], [2, 1, 0], [0, 2, 1]] {
        let permuted = model.permute_classes(&perm).unwrap();
        for s in data.iter().take(50) {
            let a = forward_backward(&model, s).unwrap().log_likelihood;
            let b = forward_backward(&permuted, s).unwrap().log_likelihood;
            assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }
}

#[test]
fn identical_runs_serialize_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let data = to_seqs(sample_hmm(&generator(), &mut rng, 400, 2..=9));
    let vocab_forms: Vec<Vec<String>> = vec![(0..20).map(|w| format!("w{w}")).collect()];
    let vocab = seqrep::corpus::Vocabulary::build(vocab_forms.iter(), 1).unwrap();
    assert_eq!(vocab.len(), 21);
    let data: Vec<TokenSequence> = data
        .into_iter()
        .map(|s| TokenSequence::from_ids(s.ids.iter().map(|&w| w + 1).collect()).unwrap())
        .collect();
    let config = TrainConfig {
        n_classes: 4,
        minibatch: 37,
        epochs: 2,
        shuffle: true,
        seed: 9,
        ..TrainConfig::default()
    };
    let render = || {
        let mut out = Vec::new();
        train_hmm(&data, &vocab, &config).unwrap().model.write_to(&mut out).unwrap();
        out
    };
    assert_eq!(render(), render());
}
