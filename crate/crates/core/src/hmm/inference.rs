//! Exact inference: scaled forward-backward, Viterbi, and path scoring.

use super::{note_degenerate, HmmModel, MESSAGE_FLOOR};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Per-token distributions over latent classes, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n_classes: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    pub(crate) fn from_flat(n_classes: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len() % n_classes.max(1), 0);
        PosteriorMatrix { n_classes, data }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.n_classes..(k + 1) * self.n_classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_classes)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }
}

/// Joint posterior of two adjacent classes, `p(Ck-1 = prev[i], Ck = next[j] |
/// w)`, restricted to the listed class ids. Cells outside the listed ids are
/// zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTable {
    pub prev: Vec<u32>,
    pub next: Vec<u32>,
    /// Row-major over `prev × next`.
    pub values: Vec<f64>,
}

impl PairTable {
    pub fn get(&self, prev: usize, next: usize) -> f64 {
        let i = self.prev.binary_search(&(prev as u32));
        let j = self.next.binary_search(&(next as u32));
        match (i, j) {
            (Ok(i), Ok(j)) => self.values[i * self.next.len() + j],
            _ => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let width = self.next.len();
        self.values.iter().enumerate().map(move |(idx, &v)| {
            (self.prev[idx / width] as usize, self.next[idx % width] as usize, v)
        })
    }

    pub fn to_dense(&self, n_classes: usize) -> Vec<f64> {
        let mut dense = vec![0.0; n_classes * n_classes];
        for (a, b, v) in self.iter() {
            dense[a * n_classes + b] = v;
        }
        dense
    }
}

/// One [`PairTable`] per adjacent pair of positions (empty for K = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePosteriors {
    pub n_classes: usize,
    pub tables: Vec<PairTable>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub posteriors: PosteriorMatrix,
    pub pairwise: PairwisePosteriors,
    pub log_likelihood: f64,
}

/// Scales `message` to sum to one and returns the log of the removed mass.
/// An all-zero (or non-finite) message is floored first.
pub(crate) fn normalize_message(message: &mut [f64]) -> f64 {
    let mut sum: f64 = message.iter().sum();
    if !(sum > 0.0 && sum.is_finite()) {
        note_degenerate();
        for x in message.iter_mut() {
            if !x.is_finite() {
                *x = 0.0;
            }
            *x += MESSAGE_FLOOR;
        }
        sum = message.iter().sum();
    }
    for x in message.iter_mut() {
        *x /= sum;
    }
    sum.ln()
}

/// Log of the joint probability of `seq` and the class path `classes`.
pub fn joint_log_probability(model: &HmmModel, seq: &TokenSequence, classes: &[usize]) -> Result<f64> {
    model.check_sequence(&seq.ids)?;
    if classes.len() != seq.len() {
        return Err(Error::Shape(format!(
            "{} classes for a sequence of length {}",
            classes.len(),
            seq.len()
        )));
    }
    if let Some(&bad) = classes.iter().find(|&&c| c >= model.n_classes()) {
        return Err(Error::InvalidArgument(format!("class id {bad} out of range")));
    }
    let mut logp = model.initial()[classes[0]].ln();
    for k in 1..classes.len() {
        logp += model.transition(classes[k - 1], classes[k]).ln();
    }
    for (&c, &w) in classes.iter().zip(&seq.ids) {
        logp += model.emission(c, w).ln();
    }
    Ok(logp)
}

/// Exact posteriors, pairwise marginals and log-likelihood.
pub fn forward_backward(model: &HmmModel, seq: &TokenSequence) -> Result<Inference> {
    model.check_sequence(&seq.ids)?;
    Ok(exact(model, &seq.ids, true))
}

/// Exact per-token posteriors and log-likelihood, skipping pairwise tables.
pub fn posteriors(model: &HmmModel, seq: &TokenSequence) -> Result<(PosteriorMatrix, f64)> {
    model.check_sequence(&seq.ids)?;
    let inf = exact(model, &seq.ids, false);
    Ok((inf.posteriors, inf.log_likelihood))
}

// The k-best pass in `kbest.rs` performs the same floating-point operations in
// the same order when nothing is truncated; keep the two in step.
fn exact(model: &HmmModel, ids: &[u32], with_pairs: bool) -> Inference {
    let n = model.n_classes();
    let len = ids.len();

    let mut alpha = vec![0.0; len * n];
    let mut log_likelihood = 0.0;
    {
        let col = model.emission_column(ids[0]);
        for c in 0..n {
            alpha[c] = model.initial()[c] * col[c];
        }
        log_likelihood += normalize_message(&mut alpha[..n]);
    }
    for k in 1..len {
        let (done, rest) = alpha.split_at_mut(k * n);
        let prev = &done[(k - 1) * n..];
        let cur = &mut rest[..n];
        for (cp, &a) in prev.iter().enumerate() {
            let row = model.transition_row(cp);
            for c in 0..n {
                cur[c] += a * row[c];
            }
        }
        let col = model.emission_column(ids[k]);
        for c in 0..n {
            cur[c] *= col[c];
        }
        log_likelihood += normalize_message(cur);
    }

    // beta[k] is proportional to p(w_{k+1..} | C_k); the last row stays at one.
    let mut beta = vec![0.0; len * n];
    beta[(len - 1) * n..].fill(1.0);
    let mut weighted = vec![0.0; n];
    for k in (0..len - 1).rev() {
        let (head, tail) = beta.split_at_mut((k + 1) * n);
        let next = &tail[..n];
        let col = model.emission_column(ids[k + 1]);
        for c in 0..n {
            weighted[c] = col[c] * next[c];
        }
        let cur = &mut head[k * n..];
        for c in 0..n {
            let row = model.transition_row(c);
            let mut acc = 0.0;
            for cn in 0..n {
                acc += row[cn] * weighted[cn];
            }
            cur[c] = acc;
        }
        normalize_message(cur);
    }

    let mut post = vec![0.0; len * n];
    for k in 0..len {
        let row = &mut post[k * n..(k + 1) * n];
        for c in 0..n {
            row[c] = alpha[k * n + c] * beta[k * n + c];
        }
        normalize_message(row);
    }

    let mut tables = Vec::new();
    if with_pairs {
        let all: Vec<u32> = (0..n as u32).collect();
        tables.reserve(len.saturating_sub(1));
        for k in 1..len {
            let col = model.emission_column(ids[k]);
            for c in 0..n {
                weighted[c] = col[c] * beta[k * n + c];
            }
            let mut values = vec![0.0; n * n];
            for cp in 0..n {
                let a = alpha[(k - 1) * n + cp];
                let row = model.transition_row(cp);
                for c in 0..n {
                    values[cp * n + c] = a * row[c] * weighted[c];
                }
            }
            normalize_message(&mut values);
            tables.push(PairTable {
                prev: all.clone(),
                next: all.clone(),
                values,
            });
        }
    }

    Inference {
        posteriors: PosteriorMatrix::from_flat(n, post),
        pairwise: PairwisePosteriors { n_classes: n, tables },
        log_likelihood,
    }
}

/// Most probable class path. Ties go to the smaller class id, both when
/// choosing a predecessor and when choosing the final class.
pub fn viterbi(model: &HmmModel, seq: &TokenSequence) -> Result<Vec<usize>> {
    model.check_sequence(&seq.ids)?;
    let n = model.n_classes();
    let len = seq.len();
    let log_trans: Vec<f64> = (0..n * n).map(|i| model.transition(i / n, i % n).ln()).collect();

    let mut score: Vec<f64> = model
        .emission_column(seq.ids[0])
        .iter()
        .zip(model.initial())
        .map(|(&b, &p)| p.ln() + b.ln())
        .collect();
    let mut next_score = vec![0.0; n];
    let mut back = vec![0u32; len * n];
    for k in 1..len {
        let col = model.emission_column(seq.ids[k]);
        for c in 0..n {
            let mut best = 0usize;
            let mut best_score = score[0] + log_trans[c];
            for cp in 1..n {
                let s = score[cp] + log_trans[cp * n + c];
                if s > best_score {
                    best = cp;
                    best_score = s;
                }
            }
            back[k * n + c] = best as u32;
            next_score[c] = best_score + col[c].ln();
        }
        std::mem::swap(&mut score, &mut next_score);
    }

    let mut last = 0usize;
    for c in 1..n {
        if score[c] > score[last] {
            last = c;
        }
    }
    if score[last] == f64::NEG_INFINITY {
        note_degenerate();
    }
    let mut path = vec![0usize; len];
    path[len - 1] = last;
    for k in (1..len).rev() {
        path[k - 1] = back[k * n + path[k]] as usize;
    }
    Ok(path)
}
