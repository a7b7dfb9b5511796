//! k-best sparse forward-backward.
//!
//! After each forward step only the `k` heaviest classes survive; the message
//! is renormalized over them and the dropped mass is discarded. The backward
//! pass, posteriors and pairwise tables are then computed over the surviving
//! supports, so the outputs are the exact marginals of the chain restricted to
//! those supports. A forward step costs O(k·N) plus an O(N) selection.

use super::inference::{normalize_message, Inference, PairTable, PairwisePosteriors, PosteriorMatrix};
use super::HmmModel;
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// A truncated, renormalized message: at most `k` distinct classes in
/// increasing id order with weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMessage {
    pub classes: Vec<u32>,
    pub weights: Vec<f64>,
    /// Log of the mass kept by truncation (zero when nothing was dropped).
    pub log_scale: f64,
}

impl SparseMessage {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Keeps the `k` largest entries of a normalized dense message. Equal weights
/// are resolved toward the smaller class id. Uses partial selection, not a
/// full sort.
pub fn truncate_top_k(message: &[f64], k: usize) -> SparseMessage {
    let n = message.len();
    if k >= n {
        return SparseMessage {
            classes: (0..n as u32).collect(),
            weights: message.to_vec(),
            log_scale: 0.0,
        };
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    if k > 0 {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            message[b as usize]
                .total_cmp(&message[a as usize])
                .then(a.cmp(&b))
        });
    }
    order.truncate(k);
    order.sort_unstable();
    let mut weights: Vec<f64> = order.iter().map(|&c| message[c as usize]).collect();
    let kept: f64 = weights.iter().sum();
    if kept > 0.0 {
        for w in weights.iter_mut() {
            *w /= kept;
        }
    }
    SparseMessage {
        classes: order,
        weights,
        log_scale: kept.ln(),
    }
}

fn check_k(model: &HmmModel, k: usize) -> Result<()> {
    if k == 0 || k > model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            model.n_classes()
        )));
    }
    Ok(())
}

/// Approximate posteriors, pairwise marginals and log-likelihood with `k`
/// surviving classes per position. The log-likelihood is that of the
/// restricted chain, a lower bound on the exact value. With `k = N` the result
/// is bit-identical to [`super::forward_backward`].
pub fn kbest_forward_backward(model: &HmmModel, seq: &TokenSequence, k: usize) -> Result<Inference> {
    check_k(model, k)?;
    model.check_sequence(&seq.ids)?;
    Ok(sparse(model, &seq.ids, k, true))
}

pub fn kbest_posteriors(model: &HmmModel, seq: &TokenSequence, k: usize) -> Result<(PosteriorMatrix, f64)> {
    check_k(model, k)?;
    model.check_sequence(&seq.ids)?;
    let inf = sparse(model, &seq.ids, k, false);
    Ok((inf.posteriors, inf.log_likelihood))
}

pub(crate) fn sparse(model: &HmmModel, ids: &[u32], k: usize, with_pairs: bool) -> Inference {
    let n = model.n_classes();
    let len = ids.len();
    let truncating = k < n;

    let mut forward: Vec<SparseMessage> = Vec::with_capacity(len);
    let mut log_likelihood = 0.0;
    let mut message = vec![0.0; n];
    {
        let col = model.emission_column(ids[0]);
        for c in 0..n {
            message[c] = model.initial()[c] * col[c];
        }
    }
    for pos in 0..len {
        if pos > 0 {
            message.fill(0.0);
            let prev = &forward[pos - 1];
            for (&cp, &a) in prev.classes.iter().zip(&prev.weights) {
                let row = model.transition_row(cp as usize);
                for c in 0..n {
                    message[c] += a * row[c];
                }
            }
            let col = model.emission_column(ids[pos]);
            for c in 0..n {
                message[c] *= col[c];
            }
        }
        log_likelihood += normalize_message(&mut message);
        let kept = truncate_top_k(&message, k);
        if truncating {
            log_likelihood += kept.log_scale;
        }
        forward.push(kept);
    }

    let mut backward: Vec<Vec<f64>> = vec![Vec::new(); len];
    backward[len - 1] = vec![1.0; forward[len - 1].len()];
    let mut weighted = Vec::with_capacity(k.min(n));
    for pos in (0..len - 1).rev() {
        let next_support = &forward[pos + 1].classes;
        let col = model.emission_column(ids[pos + 1]);
        weighted.clear();
        weighted.extend(
            next_support
                .iter()
                .zip(&backward[pos + 1])
                .map(|(&c, &b)| col[c as usize] * b),
        );
        let mut cur: Vec<f64> = forward[pos]
            .classes
            .iter()
            .map(|&c| {
                let row = model.transition_row(c as usize);
                let mut acc = 0.0;
                for (&cn, &w) in next_support.iter().zip(&weighted) {
                    acc += row[cn as usize] * w;
                }
                acc
            })
            .collect();
        normalize_message(&mut cur);
        backward[pos] = cur;
    }

    let mut post = vec![0.0; len * n];
    let mut scratch = Vec::with_capacity(k.min(n));
    for pos in 0..len {
        let fwd = &forward[pos];
        scratch.clear();
        scratch.extend(fwd.weights.iter().zip(&backward[pos]).map(|(&a, &b)| a * b));
        normalize_message(&mut scratch);
        let row = &mut post[pos * n..(pos + 1) * n];
        for (&c, &u) in fwd.classes.iter().zip(&scratch) {
            row[c as usize] = u;
        }
    }

    let mut tables = Vec::new();
    if with_pairs {
        tables.reserve(len.saturating_sub(1));
        for pos in 1..len {
            let prev = &forward[pos - 1];
            let next = &forward[pos].classes;
            let col = model.emission_column(ids[pos]);
            weighted.clear();
            weighted.extend(next.iter().zip(&backward[pos]).map(|(&c, &b)| col[c as usize] * b));
            let mut values = Vec::with_capacity(prev.len() * next.len());
            for (&cp, &a) in prev.classes.iter().zip(&prev.weights) {
                let row = model.transition_row(cp as usize);
                for (&c, &w) in next.iter().zip(&weighted) {
                    values.push(a * row[c as usize] * w);
                }
            }
            normalize_message(&mut values);
            tables.push(PairTable {
                prev: prev.classes.clone(),
                next: next.clone(),
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
