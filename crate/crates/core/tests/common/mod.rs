//! Brute-force reference computations shared by the integration tests. They
//! enumerate every hidden path or labeling, so they only suit tiny instances.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use seqrep::corpus::{Domain, LabeledSequence, Tagset, Vocabulary};
use seqrep::crf::{CrfModel, FeatureTemplate};
use seqrep::hmm::HmmModel;
use seqrep::representations::{DenseRows, RepKind, SequenceReps};

pub fn random_distribution(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / sum).collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, n: usize, v: usize) -> HmmModel {
    let initial = random_distribution(rng, n);
    let transition = (0..n).map(|_| random_distribution(rng, n)).collect();
    let emission = (0..n).map(|_| random_distribution(rng, v)).collect();
    HmmModel::from_rows(initial, transition, emission).unwrap()
}

/// Sharper rows (a few dominant entries), closer to what trained models look
/// like.
pub fn peaked_model(rng: &mut ChaCha8Rng, n: usize, v: usize) -> HmmModel {
    let mut peaked = |len: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>().powi(4) + 1e-4).collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / sum).collect()
    };
    let initial = peaked(n);
    let transition = (0..n).map(|_| peaked(n)).collect();
    let emission = (0..n).map(|_| peaked(v)).collect();
    HmmModel::from_rows(initial, transition, emission).unwrap()
}

pub fn random_ids(rng: &mut ChaCha8Rng, v: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..v as u32)).collect()
}

/// Calls `f` with every vector in `{0..base}^len`, in lexicographic order.
pub fn for_each_assignment(base: usize, len: usize, mut f: impl FnMut(&[usize])) {
    let mut cur = vec![0usize; len];
    loop {
        f(&cur);
        let mut pos = len;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            cur[pos] += 1;
            if cur[pos] < base {
                break;
            }
            cur[pos] = 0;
        }
    }
}

pub struct HmmEnumeration {
    pub log_likelihood: f64,
    /// `posteriors[k][c]`
    pub posteriors: Vec<Vec<f64>>,
    /// `pairwise[k - 1][prev * n + next]`
    pub pairwise: Vec<Vec<f64>>,
    pub best_path: Vec<usize>,
    pub best_prob: f64,
    /// Joint probability of every path, in enumeration order.
    pub path_probs: Vec<(Vec<usize>, f64)>,
}

/// Direct product of the parameters along each path.
pub fn path_probability(model: &HmmModel, ids: &[u32], path: &[usize]) -> f64 {
    let mut p = model.initial()[path[0]] * model.emission(path[0], ids[0]);
    for k in 1..path.len() {
        p *= model.transition(path[k - 1], path[k]) * model.emission(path[k], ids[k]);
    }
    p
}

pub fn enumerate_hmm(model: &HmmModel, ids: &[u32]) -> HmmEnumeration {
    let n = model.n_classes();
    let len = ids.len();
    let mut z = 0.0;
    let mut post = vec![vec![0.0; n]; len];
    let mut pairs = vec![vec![0.0; n * n]; len.saturating_sub(1)];
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut path_probs = Vec::new();
    for_each_assignment(n, len, |path| {
        let p = path_probability(model, ids, path);
        z += p;
        for (k, &c) in path.iter().enumerate() {
            post[k][c] += p;
        }
        for k in 1..len {
            pairs[k - 1][path[k - 1] * n + path[k]] += p;
        }
        // Among equally probable paths prefer the one that is smallest when
        // read from the end, which is what a smallest-id backtrace returns.
        let better = match &best {
            None => true,
            Some((bp, bprob)) => {
                p > *bprob || (p == *bprob && path.iter().rev().lt(bp.iter().rev()))
            }
        };
        if better {
            best = Some((path.to_vec(), p));
        }
        path_probs.push((path.to_vec(), p));
    });
    for row in post.iter_mut().chain(pairs.iter_mut()) {
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    let (best_path, best_prob) = best.unwrap();
    HmmEnumeration {
        log_likelihood: z.ln(),
        posteriors: post,
        pairwise: pairs,
        best_path,
        best_prob,
        path_probs,
    }
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

fn draw(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples `count` sequences with lengths uniform in `lengths` from `model`.
pub fn sample_hmm(
    model: &HmmModel,
    rng: &mut ChaCha8Rng,
    count: usize,
    lengths: std::ops::RangeInclusive<usize>,
) -> Vec<Vec<u32>> {
    let n = model.n_classes();
    let emission: Vec<Vec<f64>> = (0..n).map(|c| model.emission_row(c)).collect();
    (0..count)
        .map(|_| {
            let len = rng.random_range(lengths.clone());
            let mut class = draw(rng, model.initial());
            let mut ids = Vec::with_capacity(len);
            for pos in 0..len {
                if pos > 0 {
                    class = draw(rng, model.transition_row(class));
                }
                ids.push(draw(rng, &emission[class]) as u32);
            }
            ids
        })
        .collect()
}

/// A CRF with random weights and random representations on random data.
pub struct CrfInstance {
    pub model: CrfModel,
    pub data: Vec<LabeledSequence>,
    pub reps: Vec<SequenceReps>,
}

pub fn random_reps(rng: &mut ChaCha8Rng, template: &FeatureTemplate, len: usize) -> SequenceReps {
    let n = template.n_classes;
    match template.rep {
        None => SequenceReps::Baseline,
        Some(RepKind::Viterbi) => SequenceReps::Viterbi((0..len).map(|_| rng.random_range(0..n)).collect()),
        Some(kind) => {
            let values = (0..len)
                .flat_map(|_| {
                    let halves = kind.dense_width(n) / n;
                    (0..halves).flat_map(|_| random_distribution(rng, n)).collect::<Vec<_>>()
                })
                .collect();
            SequenceReps::Dense { kind, rows: DenseRows::new(kind.dense_width(n), values).unwrap() }
        }
    }
}

/// Between 2 and 4 tags, five word types and any template kind.
pub fn random_instance(rng: &mut ChaCha8Rng, max_len: usize, n_seqs: usize) -> CrfInstance {
    let t = rng.random_range(2..=4);
    let tagset = Tagset::new(&(0..t).map(|i| format!("T{i}")).collect::<Vec<_>>()).unwrap();
    let words = ["a", "b", "c", "d", "e"];
    let choice = rng.random_range(0..5);
    let n = rng.random_range(2..=3);
    let template = match choice {
        0 => FeatureTemplate::baseline(),
        1 => FeatureTemplate { window: rng.random_range(0..=2), ..FeatureTemplate::with_rep(RepKind::Viterbi, n) },
        k => FeatureTemplate::with_rep(RepKind::ALL[k - 1], n),
    };
    let mut data = Vec::new();
    let mut reps = Vec::new();
    for _ in 0..n_seqs {
        let len = rng.random_range(1..=max_len);
        let forms: Vec<String> = (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect();
        let tags = (0..len).map(|_| rng.random_range(0..t as u32)).collect();
        data.push(LabeledSequence::new(forms, tags, Domain::Source).unwrap());
        reps.push(random_reps(rng, &template, len));
    }
    let vocab = Vocabulary::build(data.iter().map(|s| s.forms.iter()), 1).unwrap();
    let mut model = CrfModel::zeros(template, tagset, vocab).unwrap();
    let weights = (0..model.n_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
    model.set_weights(weights).unwrap();
    CrfInstance { model, data, reps }
}

/// Every tag sequence of length `len` over `t` tags.
pub fn labelings(t: usize, len: usize) -> Vec<Vec<u32>> {
    let mut all = Vec::new();
    for_each_assignment(t, len, |a| all.push(a.iter().map(|&x| x as u32).collect()));
    all
}
