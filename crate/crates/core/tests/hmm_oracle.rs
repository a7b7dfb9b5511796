mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrep::corpus::TokenSequence;
use seqrep::hmm::{
    forward_backward, joint_log_probability, kbest_forward_backward, posteriors, viterbi, HmmModel,
};

fn seq(ids: &[u32]) -> TokenSequence {
    TokenSequence::from_ids(ids.to_vec()).unwrap()
}

fn fixture() -> HmmModel {
    HmmModel::from_rows(
        vec![0.6, 0.4],
        vec![vec![0.7, 0.3], vec![0.4, 0.6]],
        vec![vec![0.1, 0.4, 0.5], vec![0.6, 0.3, 0.1]],
    )
    .unwrap()
}

// Reference values computed once with exact rational arithmetic over all 8
// class paths.
#[test]
fn two_class_three_token_fixture() {
    let model = fixture();
    let s = seq(&[0, 1, 2]);
    let inf = forward_backward(&model, &s).unwrap();
    assert!((inf.log_likelihood - (-3.392_872_132_916_165_3)).abs() < 1e-12);
    let expected_rows = [
        [0.231_702_963_227_418_8, 0.768_297_036_772_581_2],
        [0.624_062_834_701_892_2, 0.375_937_165_298_107_83],
        [0.863_977_151_017_493_7, 0.136_022_848_982_506_24],
    ];
    for (k, row) in expected_rows.iter().enumerate() {
        for c in 0..2 {
            assert!((inf.posteriors.row(k)[c] - row[c]).abs() < 1e-12);
        }
    }
    let expected_pairs = [
        [0.189_932_167_083_184_58, 0.041_770_796_144_234_2, 0.434_130_667_618_707_6, 0.334_166_369_153_873_6],
        [0.574_794_716_172_795_4, 0.049_268_118_529_096_75, 0.289_182_434_844_698_3, 0.086_754_730_453_409_49],
    ];
    for (table, expected) in inf.pairwise.tables.iter().zip(&expected_pairs) {
        for (x, y) in table.to_dense(2).iter().zip(expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(viterbi(&model, &s).unwrap(), vec![1, 0, 0]);
    let joint = joint_log_probability(&model, &s, &[0, 1, 0]).unwrap();
    assert!((joint - (-6.830_794_237_846_009)).abs() < 1e-12);
    let best = joint_log_probability(&model, &s, &[1, 0, 0]).unwrap();
    assert!((best - (-4.309_519_943_887_134)).abs() < 1e-12);
}

#[test]
fn exact_inference_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(20140601);
    for _ in 0..50 {
        let n = rng.random_range(1..=4);
        let v = rng.random_range(1..=5);
        let len = rng.random_range(1..=6);
        let model = random_model(&mut rng, n, v);
        let ids = random_ids(&mut rng, v, len);
        let oracle = enumerate_hmm(&model, &ids);
        let inf = forward_backward(&model, &seq(&ids)).unwrap();

        assert!((inf.log_likelihood - oracle.log_likelihood).abs() < 1e-10);
        for k in 0..len {
            for c in 0..n {
                assert!((inf.posteriors.row(k)[c] - oracle.posteriors[k][c]).abs() < 1e-10);
            }
        }
        assert_eq!(inf.pairwise.tables.len(), len - 1);
        for (table, expected) in inf.pairwise.tables.iter().zip(&oracle.pairwise) {
            for (x, y) in table.to_dense(n).iter().zip(expected) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        assert_eq!(viterbi(&model, &seq(&ids)).unwrap(), oracle.best_path);

        let (post_only, ll) = posteriors(&model, &seq(&ids)).unwrap();
        assert_eq!(post_only, inf.posteriors);
        assert_eq!(ll, inf.log_likelihood);

        // Summing the joint over every path gives the likelihood.
        let total: f64 = oracle
            .path_probs
            .iter()
            .map(|(path, _)| joint_log_probability(&model, &seq(&ids), path).unwrap().exp())
            .sum();
        let lik = inf.log_likelihood.exp();
        assert!(((total - lik) / lik).abs() < 1e-10);
    }
}

#[test]
fn viterbi_ties_follow_smallest_id_backtrace() {
    // Two classes with identical parameters: every path ties.
    let model = HmmModel::from_rows(
        vec![0.5, 0.5],
        vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        vec![vec![0.3, 0.7], vec![0.3, 0.7]],
    )
    .unwrap();
    let ids = [1, 0, 1, 1];
    assert_eq!(viterbi(&model, &seq(&ids)).unwrap(), enumerate_hmm(&model, &ids).best_path);
    assert_eq!(viterbi(&model, &seq(&ids)).unwrap(), vec![0, 0, 0, 0]);
}

#[test]
fn kbest_with_full_width_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..30 {
        let n = rng.random_range(1..=8);
        let v = rng.random_range(1..=6);
        let len = rng.random_range(1..=12);
        let model = random_model(&mut rng, n, v);
        let s = seq(&random_ids(&mut rng, v, len));
        let exact = forward_backward(&model, &s).unwrap();
        let sparse = kbest_forward_backward(&model, &s, n).unwrap();
        assert_eq!(exact.log_likelihood.to_bits(), sparse.log_likelihood.to_bits());
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(exact.posteriors.as_flat()), bits(sparse.posteriors.as_flat()));
        for (a, b) in exact.pairwise.tables.iter().zip(&sparse.pairwise.tables) {
            assert_eq!(bits(&a.to_dense(n)), bits(&b.to_dense(n)));
        }
    }
}

fn check_pairwise_consistency(inf: &seqrep::hmm::Inference, n: usize, tol: f64) {
    for (k, table) in inf.pairwise.tables.iter().enumerate() {
        let dense = table.to_dense(n);
        assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for c in 0..n {
            let left: f64 = (0..n).map(|b| dense[c * n + b]).sum();
            let right: f64 = (0..n).map(|a| dense[a * n + c]).sum();
            assert!((left - inf.posteriors.row(k)[c]).abs() < tol, "left marginal at {k}");
            assert!((right - inf.posteriors.row(k + 1)[c]).abs() < tol, "right marginal at {k}");
        }
    }
    for row in inf.posteriors.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&x| x >= 0.0));
    }
}

#[test]
fn pairwise_marginals_agree_with_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let n = rng.random_range(2..=10);
        let v = rng.random_range(2..=8);
        let len = rng.random_range(2..=15);
        let model = random_model(&mut rng, n, v);
        let s = seq(&random_ids(&mut rng, v, len));
        check_pairwise_consistency(&forward_backward(&model, &s).unwrap(), n, 1e-8);
        for k in 1..=n {
            let inf = kbest_forward_backward(&model, &s, k).unwrap();
            check_pairwise_consistency(&inf, n, 1e-8);
            for row in inf.posteriors.rows() {
                assert!(row.iter().filter(|&&x| x > 0.0).count() <= k);
            }
        }
    }
}

fn mean_tv(model: &HmmModel, s: &TokenSequence, k: usize, exact: &seqrep::hmm::Inference) -> f64 {
    let approx = kbest_forward_backward(model, s, k).unwrap();
    let len = s.len();
    (0..len)
        .map(|i| total_variation(approx.posteriors.row(i), exact.posteriors.row(i)))
        .sum::<f64>()
        / len as f64
}

#[test]
fn approximation_error_shrinks_as_k_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let n = rng.random_range(3..=6);
        let v = rng.random_range(3..=8);
        let len = rng.random_range(3..=8);
        let model = random_model(&mut rng, n, v);
        let s = seq(&random_ids(&mut rng, v, len));
        let exact = forward_backward(&model, &s).unwrap();
        let errors: Vec<f64> = (1..=n).map(|k| mean_tv(&model, &s, k, &exact)).collect();
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "errors {errors:?}");
        }
        assert_eq!(*errors.last().unwrap(), 0.0);
    }
}

#[test]
fn kbest_regression_n4_k2() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = random_model(&mut rng, 4, 6);
    let s = seq(&random_ids(&mut rng, 6, 5));
    let exact = forward_backward(&model, &s).unwrap();
    let approx = kbest_forward_backward(&model, &s, 2).unwrap();
    let tv: Vec<f64> = (0..5)
        .map(|i| total_variation(approx.posteriors.row(i), exact.posteriors.row(i)))
        .collect();
    // Pinned from the first run of this implementation.
    let pinned = [
        0.126_647_029_977_767_4,
        0.206_502_026_701_956_28,
        0.375_110_303_045_152_25,
        0.151_503_369_867_643_5,
        0.438_446_253_451_323_15,
    ];
    for (got, want) in tv.iter().zip(&pinned) {
        assert!((got - want).abs() < 1e-12, "{tv:?}");
    }
    let gap = exact.log_likelihood - approx.log_likelihood;
    assert!((gap - 1.504_547_704_793_861_1).abs() < 1e-10);
}
