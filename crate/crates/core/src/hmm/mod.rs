//! First-order discrete HMM over latent word classes, with exact and k-best
//! sparse inference.

mod inference;
mod kbest;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::textio::{fmt_f64, parse_floats};

pub use inference::{
    forward_backward, joint_log_probability, posteriors, viterbi, Inference, PairTable,
    PairwisePosteriors, PosteriorMatrix,
};
pub use kbest::{kbest_forward_backward, kbest_posteriors, truncate_top_k, SparseMessage};

const HMM_MAGIC: &str = "SEQREP-HMM";

/// Tolerance on row sums accepted by [`HmmModel`] constructors.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-9;

/// Floor added to an all-zero message before normalization.
pub const MESSAGE_FLOOR: f64 = 1e-12;

static DEGENERATE_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of all-zero messages (or Viterbi lattices with no finite path)
/// encountered by this process so far.
pub fn degenerate_events() -> u64 {
    DEGENERATE_EVENTS.load(Ordering::Relaxed)
}

pub(crate) fn note_degenerate() {
    DEGENERATE_EVENTS.fetch_add(1, Ordering::Relaxed);
}

/// Default sparsity for k-best inference: `min(N, ceil(3 log2 N))`.
pub fn default_k(n_classes: usize) -> usize {
    if n_classes < 2 {
        return n_classes;
    }
    let k = (3.0 * (n_classes as f64).log2() - 1e-9).ceil() as usize;
    k.min(n_classes)
}

/// HMM parameters: `initial[c] = p(C1 = c)`, `transition(c', c) =
/// p(Ck = c | Ck-1 = c')` and `emission(c, w) = p(Wk = w | Ck = c)`.
///
/// Emissions are stored word-major so that the column for one word is
/// contiguous; inference touches one column per token.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmModel {
    n_classes: usize,
    n_words: usize,
    initial: Vec<f64>,
    transition: Vec<f64>,
    emission: Vec<f64>,
}

impl HmmModel {
    /// Builds a model from row tables: `transition[c']` is the distribution of
    /// the next class, `emission[c]` the distribution over words of class `c`.
    pub fn from_rows(initial: Vec<f64>, transition: Vec<Vec<f64>>, emission: Vec<Vec<f64>>) -> Result<Self> {
        let n = initial.len();
        if n == 0 {
            return Err(Error::InvalidModel("at least one class is required".into()));
        }
        if transition.len() != n || emission.len() != n {
            return Err(Error::Shape(format!(
                "{n} initial entries, {} transition rows, {} emission rows",
                transition.len(),
                emission.len()
            )));
        }
        let v = emission[0].len();
        let mut flat_transition = Vec::with_capacity(n * n);
        for row in &transition {
            if row.len() != n {
                return Err(Error::Shape(format!("transition row of length {} (expected {n})", row.len())));
            }
            flat_transition.extend_from_slice(row);
        }
        let mut by_word = vec![0.0; v * n];
        for (c, row) in emission.iter().enumerate() {
            if row.len() != v {
                return Err(Error::Shape(format!("emission row of length {} (expected {v})", row.len())));
            }
            for (w, &p) in row.iter().enumerate() {
                by_word[w * n + c] = p;
            }
        }
        Self::from_parts(n, v, initial, flat_transition, by_word)
    }

    /// `transition` is row-major `[prev * n + next]`, `emission_by_word` is
    /// `[word * n + class]`.
    pub(crate) fn from_parts(
        n_classes: usize,
        n_words: usize,
        initial: Vec<f64>,
        transition: Vec<f64>,
        emission_by_word: Vec<f64>,
    ) -> Result<Self> {
        let model = HmmModel {
            n_classes,
            n_words,
            initial,
            transition,
            emission: emission_by_word,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let (n, v) = (self.n_classes, self.n_words);
        if n == 0 || v == 0 {
            return Err(Error::InvalidModel(format!("degenerate dimensions N={n}, V={v}")));
        }
        if self.initial.len() != n || self.transition.len() != n * n || self.emission.len() != n * v {
            return Err(Error::Shape("parameter tables do not match N and V".into()));
        }
        check_distribution("initial", 0, self.initial.iter().copied())?;
        for c in 0..n {
            check_distribution("transition", c, self.transition_row(c).iter().copied())?;
            check_distribution("emission", c, (0..v).map(|w| self.emission[w * n + c]))?;
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self, prev: usize, next: usize) -> f64 {
        self.transition[prev * self.n_classes + next]
    }

    pub fn transition_row(&self, prev: usize) -> &[f64] {
        &self.transition[prev * self.n_classes..(prev + 1) * self.n_classes]
    }

    pub fn emission(&self, class: usize, word: u32) -> f64 {
        self.emission[word as usize * self.n_classes + class]
    }

    /// `p(w | c)` for every class `c`.
    pub fn emission_column(&self, word: u32) -> &[f64] {
        let start = word as usize * self.n_classes;
        &self.emission[start..start + self.n_classes]
    }

    pub fn emission_row(&self, class: usize) -> Vec<f64> {
        (0..self.n_words).map(|w| self.emission[w * self.n_classes + class]).collect()
    }

    /// Relabels classes: class `c` of the result is class `perm[c]` of `self`.
    pub fn permute_classes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_classes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument("not a permutation of the classes".into()));
        }
        let initial = perm.iter().map(|&p| self.initial[p]).collect();
        let mut transition = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                transition[a * n + b] = self.transition(perm[a], perm[b]);
            }
        }
        let mut emission = vec![0.0; n * self.n_words];
        for w in 0..self.n_words {
            for c in 0..n {
                emission[w * n + c] = self.emission[w * n + perm[c]];
            }
        }
        Self::from_parts(n, self.n_words, initial, transition, emission)
    }

    pub(crate) fn check_sequence(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if let Some(&bad) = ids.iter().find(|&&w| w as usize >= self.n_words) {
            return Err(Error::InvalidArgument(format!(
                "word id {bad} outside the model vocabulary of size {}",
                self.n_words
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} 1 {} {}", HMM_MAGIC, self.n_classes, self.n_words)?;
        write_row(&mut out, self.initial.iter().copied())?;
        for c in 0..self.n_classes {
            write_row(&mut out, self.transition_row(c).iter().copied())?;
        }
        for c in 0..self.n_classes {
            write_row(&mut out, (0..self.n_words).map(|w| self.emission[w * self.n_classes + c]))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("hmm line 1", "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != HMM_MAGIC || fields[1] != "1" {
            return Err(Error::parse("hmm line 1", format!("bad header {header:?}")));
        }
        let dims: Vec<usize> = fields[2..]
            .iter()
            .map(|f| f.parse().map_err(|_| Error::parse("hmm line 1", "bad dimension")))
            .collect::<Result<_>>()?;
        let (n, v) = (dims[0], dims[1]);

        let mut next_row = |line_no: usize, width: usize| -> Result<Vec<f64>> {
            let location = format!("hmm line {line_no}");
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(&location, "unexpected end of file"))??;
            let row = parse_floats(&line, &location)?;
            if row.len() != width {
                return Err(Error::parse(location, format!("expected {width} values, found {}", row.len())));
            }
            Ok(row)
        };
        let initial = next_row(2, n)?;
        let mut transition = Vec::with_capacity(n * n);
        for c in 0..n {
            transition.extend(next_row(3 + c, n)?);
        }
        let mut emission = vec![0.0; n * v];
        for c in 0..n {
            for (w, p) in next_row(3 + n + c, v)?.into_iter().enumerate() {
                emission[w * n + c] = p;
            }
        }
        Self::from_parts(n, v, initial, transition, emission)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_row<W: Write>(out: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut first = true;
    for x in values {
        if !first {
            out.write_all(b" ")?;
        }
        out.write_all(fmt_f64(x).as_bytes())?;
        first = false;
    }
    out.write_all(b"\n")?;
    Ok(())
}

fn check_distribution(table: &str, row: usize, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut sum = 0.0;
    for x in values {
        if !(x >= 0.0) || !x.is_finite() {
            return Err(Error::InvalidModel(format!("{table} row {row} has entry {x}")));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > STOCHASTIC_TOLERANCE {
        return Err(Error::InvalidModel(format!("{table} row {row} sums to {sum}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn two_class() -> HmmModel {
        HmmModel::from_rows(
            vec![0.6, 0.4],
            vec![vec![0.7, 0.3], vec![0.4, 0.6]],
            vec![vec![0.1, 0.4, 0.5], vec![0.6, 0.3, 0.1]],
        )
        .unwrap()
    }

    #[test]
    fn default_k_values() {
        assert_eq!(default_k(128), 21);
        assert_eq!(default_k(2), 2);
        assert_eq!(default_k(4), 4);
        assert_eq!(default_k(1), 1);
        assert_eq!(default_k(0), 0);
        assert_eq!(default_k(64), 18);
        assert_eq!(default_k(256), 24);
        // ceil(3 * log2(12)) = ceil(10.75) = 11
        assert_eq!(default_k(12), 11);
    }

    #[test]
    fn constructor_rejects_non_stochastic_rows() {
        let bad = HmmModel::from_rows(vec![0.5, 0.6], vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0], vec![1.0]]);
        assert!(matches!(bad, Err(Error::InvalidModel(_))));
        let negative = HmmModel::from_rows(vec![1.0], vec![vec![1.0]], vec![vec![1.5, -0.5]]);
        assert!(negative.is_err());
        let ragged = HmmModel::from_rows(vec![1.0], vec![vec![1.0]], vec![]);
        assert!(matches!(ragged, Err(Error::Shape(_))));
    }

    #[test]
    fn accessors_follow_row_convention() {
        let m = two_class();
        assert_eq!(m.transition(1, 0), 0.4);
        assert_eq!(m.emission(0, 2), 0.5);
        assert_eq!(m.emission_column(1), &[0.4, 0.3]);
        assert_eq!(m.emission_row(1), vec![0.6, 0.3, 0.1]);
    }

    #[test]
    fn serialization_is_exact() {
        let m = HmmModel::from_rows(
            vec![1.0 / 3.0, 2.0 / 3.0],
            vec![vec![0.1, 0.9], vec![1.0 / 7.0, 6.0 / 7.0]],
            vec![vec![0.2, 0.8], vec![1e-300, 1.0 - 1e-300]],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("SEQREP-HMM 1 2 2\n"));
        assert_eq!(text.lines().count(), 1 + 1 + 2 + 2);
        assert_eq!(HmmModel::read_from(&buf[..]).unwrap(), m);
    }

    #[test]
    fn permutation_relabels_consistently() {
        let m = two_class();
        let p = m.permute_classes(&[1, 0]).unwrap();
        assert_eq!(p.initial(), &[0.4, 0.6]);
        assert_eq!(p.transition(0, 0), 0.6);
        assert_eq!(p.emission(0, 0), 0.6);
        assert!(m.permute_classes(&[0, 0]).is_err());
    }
}
