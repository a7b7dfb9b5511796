mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrep::corpus::{TokenSequence, Vocabulary};
use seqrep::hmm::HmmModel;
use seqrep::representations::{
    build_type_table, posterior_token_features, viterbi_features, RepKind, RepresentationSource, SequenceReps,
};

/// "a" is emitted only by class 0, "b" only by class 1, "x" by both; classes
/// are sticky, so the class of "x" follows its left neighbour.
fn contrast_fixture() -> (HmmModel, Vocabulary) {
    let vocab = Vocabulary::build([vec!["a", "b", "x", "x"]], 1).unwrap();
    let (a, b, x) = (vocab.id("a") as usize, vocab.id("b") as usize, vocab.id("x") as usize);
    let mut rows = vec![vec![0.0; vocab.len()]; 2];
    rows[0][a] = 0.5;
    rows[0][x] = 0.5;
    rows[1][b] = 0.5;
    rows[1][x] = 0.5;
    let model = HmmModel::from_rows(vec![0.5, 0.5], vec![vec![0.9, 0.1], vec![0.1, 0.9]], rows).unwrap();
    (model, vocab)
}

#[test]
fn type_rows_ignore_context_while_token_rows_do_not() {
    let (model, vocab) = contrast_fixture();
    let corpus = vec![vocab.encode(&["a", "x"]).unwrap(), vocab.encode(&["b", "x"]).unwrap()];
    let table = build_type_table(&model, &vocab, &corpus, 2).unwrap();
    let src = RepresentationSource::new(model, vocab, Some(table)).unwrap();

    let dense = |kind, forms: &[&str]| match src.represent(Some(kind), forms).unwrap() {
        SequenceReps::Dense { rows, .. } => rows,
        other => panic!("unexpected {other:?}"),
    };
    let tok_a = dense(RepKind::PosteriorToken, &["a", "x"]);
    let tok_b = dense(RepKind::PosteriorToken, &["b", "x"]);
    assert!((tok_a.row(1)[0] - 0.9).abs() < 1e-12);
    assert!((tok_b.row(1)[0] - 0.1).abs() < 1e-12);
    assert_ne!(tok_a.row(1), tok_b.row(1));

    let typ_a = dense(RepKind::PosteriorType, &["a", "x"]);
    let typ_b = dense(RepKind::PosteriorType, &["b", "x"]);
    assert_eq!(typ_a.row(1), typ_b.row(1));
    // The type row of "x" averages its two occurrences.
    assert!((typ_a.row(1)[0] - 0.5).abs() < 1e-12);

    let same_word = dense(RepKind::PosteriorType, &["x", "a", "x"]);
    assert_eq!(same_word.row(0), same_word.row(2));
}

#[test]
fn type_table_matches_oracle_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for _ in 0..10 {
        let n = rng.random_range(2..=3);
        let v = 4;
        let model = random_model(&mut rng, n, v);
        let forms: Vec<String> = (0..v).map(|w| format!("w{w}")).collect();
        let vocab = Vocabulary::build([&forms[1..]], 1).unwrap();
        assert_eq!(vocab.len(), v);
        let sentences: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let len = rng.random_range(1..=5);
                random_ids(&mut rng, v, len)
            })
            .collect();
        let corpus: Vec<TokenSequence> = sentences.iter().map(|s| TokenSequence::from_ids(s.clone()).unwrap()).collect();
        let table = build_type_table(&model, &vocab, &corpus, n).unwrap();

        let mut sums = vec![vec![0.0; n]; v];
        let mut counts = vec![0u64; v];
        for s in &sentences {
            let oracle = enumerate_hmm(&model, s);
            for (k, &w) in s.iter().enumerate() {
                counts[w as usize] += 1;
                for c in 0..n {
                    sums[w as usize][c] += oracle.posteriors[k][c];
                }
            }
        }
        for w in 0..v {
            let form = vocab.form(w as u32);
            assert_eq!(table.count(form), counts[w]);
            if counts[w] == 0 {
                assert!(table.get(form).is_none());
                continue;
            }
            let row = table.get(form).unwrap();
            for c in 0..n {
                assert!((row[c] - sums[w][c] / counts[w] as f64).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn single_and_double_occurrence_rows() {
    let (model, vocab) = contrast_fixture();
    let once = vec![vocab.encode(&["a", "x", "b"]).unwrap()];
    let table = build_type_table(&model, &vocab, &once, 2).unwrap();
    let p = posterior_token_features(&model, &once[0], 2).unwrap();
    assert_eq!(table.get("x").unwrap(), p.row(1));

    let twice = vec![vocab.encode(&["a", "x"]).unwrap(), vocab.encode(&["x", "b", "b"]).unwrap()];
    let table = build_type_table(&model, &vocab, &twice, 2).unwrap();
    let p = posterior_token_features(&model, &twice[0], 2).unwrap();
    let q = posterior_token_features(&model, &twice[1], 2).unwrap();
    let row = table.get("x").unwrap();
    for c in 0..2 {
        assert!((row[c] - (p.row(1)[c] + q.row(0)[c]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn viterbi_features_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let model = random_model(&mut rng, n, 5);
        let len = rng.random_range(1..=5);
        let ids = random_ids(&mut rng, 5, len);
        let got = viterbi_features(&model, &TokenSequence::from_ids(ids.clone()).unwrap()).unwrap();
        assert_eq!(got, enumerate_hmm(&model, &ids).best_path);
    }
}

#[test]
fn token_posteriors_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let n = rng.random_range(1..=4);
        let model = random_model(&mut rng, n, 5);
        let len = rng.random_range(1..=5);
        let ids = random_ids(&mut rng, 5, len);
        let got = posterior_token_features(&model, &TokenSequence::from_ids(ids.clone()).unwrap(), n).unwrap();
        let oracle = enumerate_hmm(&model, &ids);
        for (row, expected) in got.rows().zip(&oracle.posteriors) {
            for (x, y) in row.iter().zip(expected) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
