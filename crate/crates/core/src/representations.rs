//! Word representations derived from a trained HMM: the Viterbi class, the
//! per-token posterior, the per-type averaged posterior, and the concatenation
//! of the two posteriors.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::corpus::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::hmm::{kbest_posteriors, posteriors, viterbi, HmmModel, PosteriorMatrix};
use crate::textio::{fmt_f64, parse_f64};
use crate::train::SequenceSource;

const TYPEREP_MAGIC: &str = "SEQREP-TYPEREP";

/// Row sums of dense representations are checked against this.
pub const ROW_TOLERANCE: f64 = 1e-6;

/// Floor applied before taking logs of dense features.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RepKind {
    Viterbi,
    PosteriorToken,
    PosteriorType,
    PosteriorBoth,
}

impl RepKind {
    pub const ALL: [RepKind; 4] = [
        RepKind::Viterbi,
        RepKind::PosteriorToken,
        RepKind::PosteriorType,
        RepKind::PosteriorBoth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RepKind::Viterbi => "viterbi",
            RepKind::PosteriorToken => "posterior-token",
            RepKind::PosteriorType => "posterior-type",
            RepKind::PosteriorBoth => "posterior-both",
        }
    }

    pub fn is_dense(self) -> bool {
        self != RepKind::Viterbi
    }

    pub fn needs_type_table(self) -> bool {
        matches!(self, RepKind::PosteriorType | RepKind::PosteriorBoth)
    }

    /// Width of the dense block for an `n_classes` HMM (0 for Viterbi).
    pub fn dense_width(self, n_classes: usize) -> usize {
        match self {
            RepKind::Viterbi => 0,
            RepKind::PosteriorToken | RepKind::PosteriorType => n_classes,
            RepKind::PosteriorBoth => 2 * n_classes,
        }
    }
}

impl fmt::Display for RepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "viterbi" => Ok(RepKind::Viterbi),
            "posterior-token" | "token" => Ok(RepKind::PosteriorToken),
            "posterior-type" | "type" => Ok(RepKind::PosteriorType),
            "posterior-both" | "both" => Ok(RepKind::PosteriorBoth),
            other => Err(Error::InvalidArgument(format!("unknown representation {other:?}"))),
        }
    }
}

/// Fixed-width real-valued rows, one per token.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRows {
    width: usize,
    values: Vec<f64>,
}

impl DenseRows {
    pub fn new(width: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || values.len() % width != 0 {
            return Err(Error::Shape(format!("{} values do not fill rows of width {width}", values.len())));
        }
        Ok(DenseRows { width, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.width..(k + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.width)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }
}

impl From<PosteriorMatrix> for DenseRows {
    fn from(m: PosteriorMatrix) -> Self {
        DenseRows {
            width: m.n_classes(),
            values: m.into_flat(),
        }
    }
}

/// The representation of every token of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceReps {
    /// Word identity only.
    Baseline,
    Viterbi(Vec<usize>),
    Dense { kind: RepKind, rows: DenseRows },
}

impl SequenceReps {
    pub fn kind(&self) -> Option<RepKind> {
        match self {
            SequenceReps::Baseline => None,
            SequenceReps::Viterbi(_) => Some(RepKind::Viterbi),
            SequenceReps::Dense { kind, .. } => Some(*kind),
        }
    }

    /// Number of tokens covered, `None` for the baseline.
    pub fn len(&self) -> Option<usize> {
        match self {
            SequenceReps::Baseline => None,
            SequenceReps::Viterbi(c) => Some(c.len()),
            SequenceReps::Dense { rows, .. } => Some(rows.len()),
        }
    }
}

pub fn viterbi_features(model: &HmmModel, seq: &TokenSequence) -> Result<Vec<usize>> {
    viterbi(model, seq)
}

/// Per-token posteriors; exact when `k = N`, k-best otherwise.
pub fn posterior_token_features(model: &HmmModel, seq: &TokenSequence, k: usize) -> Result<PosteriorMatrix> {
    if k == model.n_classes() {
        Ok(posteriors(model, seq)?.0)
    } else {
        Ok(kbest_posteriors(model, seq, k)?.0)
    }
}

/// Rowwise concatenation, token rows first.
pub fn both_features(token_rows: &PosteriorMatrix, type_rows: &PosteriorMatrix) -> Result<DenseRows> {
    if token_rows.len() != type_rows.len() {
        return Err(Error::Shape(format!(
            "{} token rows vs {} type rows",
            token_rows.len(),
            type_rows.len()
        )));
    }
    let width = token_rows.n_classes() + type_rows.n_classes();
    let mut values = Vec::with_capacity(width * token_rows.len());
    for (a, b) in token_rows.rows().zip(type_rows.rows()) {
        values.extend_from_slice(a);
        values.extend_from_slice(b);
    }
    DenseRows::new(width, values)
}

/// Averaged posteriors per word type of the HMM vocabulary.
///
/// Only types that occurred at least once are stored. Lookups of any other
/// form return `fallback`, which is the `<unk>` row when that row exists and
/// the corpus-wide mean posterior otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeRepTable {
    n_classes: usize,
    forms: Vec<String>,
    index: HashMap<String, usize>,
    z: Vec<u64>,
    rows: Vec<f64>,
    fallback: Vec<f64>,
}

impl TypeRepTable {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Number of stored types.
    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    /// Occurrence count of a stored form, 0 if absent.
    pub fn count(&self, form: &str) -> u64 {
        self.index.get(form).map_or(0, |&i| self.z[i])
    }

    pub fn get(&self, form: &str) -> Option<&[f64]> {
        self.index.get(form).map(|&i| self.row(i))
    }

    pub fn lookup(&self, form: &str) -> &[f64] {
        self.get(form).unwrap_or(&self.fallback)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_classes..(i + 1) * self.n_classes]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u64, &[f64])> + '_ {
        (0..self.len()).map(move |i| (self.forms[i].as_str(), self.z[i], self.row(i)))
    }

    /// One row per form; identical forms get identical rows wherever they
    /// occur.
    pub fn lookup_sequence<S: AsRef<str>>(&self, forms: &[S]) -> PosteriorMatrix {
        let mut data = Vec::with_capacity(forms.len() * self.n_classes);
        for f in forms {
            data.extend_from_slice(self.lookup(f.as_ref()));
        }
        PosteriorMatrix::from_flat(self.n_classes, data)
    }

    /// Rows for a coded sequence; uses the raw forms when present and the
    /// vocabulary forms otherwise.
    pub fn lookup_type_features(&self, vocab: &Vocabulary, seq: &TokenSequence) -> PosteriorMatrix {
        match &seq.raw {
            Some(raw) => self.lookup_sequence(raw),
            None => {
                let forms: Vec<&str> = seq.ids.iter().map(|&w| vocab.form(w)).collect();
                self.lookup_sequence(&forms)
            }
        }
    }

    /// Header `SEQREP-TYPEREP 1 <V'> <N>`, then `form<TAB>Z<TAB>v1 .. vN` per
    /// stored type, then the fallback row with `Z = 0` under an empty form.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TYPEREP_MAGIC} 1 {} {}", self.len(), self.n_classes)?;
        let fmt_row = |row: &[f64]| row.iter().map(|&x| fmt_f64(x)).collect::<Vec<_>>().join(" ");
        for (form, z, row) in self.iter() {
            writeln!(out, "{form}\t{z}\t{}", fmt_row(row))?;
        }
        writeln!(out, "\t0\t{}", fmt_row(&self.fallback))?;
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::parse("typerep line 1", "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != TYPEREP_MAGIC || fields[1] != "1" {
            return Err(Error::parse("typerep line 1", format!("bad header {header:?}")));
        }
        let count: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse("typerep line 1", "bad type count"))?;
        let n: usize = fields[3]
            .parse()
            .map_err(|_| Error::parse("typerep line 1", "bad class count"))?;
        if n == 0 {
            return Err(Error::parse("typerep line 1", "zero classes"));
        }

        let mut forms = Vec::with_capacity(count);
        let mut index = HashMap::with_capacity(count);
        let mut z = Vec::with_capacity(count);
        let mut rows = Vec::with_capacity(count * n);
        let mut fallback = None;
        for i in 0..=count {
            let location = format!("typerep line {}", i + 2);
            let line = lines.next().ok_or_else(|| Error::parse(&location, "unexpected end of file"))??;
            let mut parts = line.split('\t');
            let (Some(form), Some(zf), Some(vals), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(&location, "expected form, count and values"));
            };
            let zi: u64 = zf.parse().map_err(|_| Error::parse(&location, "bad count"))?;
            let row = vals
                .split(' ')
                .map(|v| parse_f64(v, &location))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != n {
                return Err(Error::parse(&location, format!("expected {n} values, found {}", row.len())));
            }
            check_row(&row, &location)?;
            if i == count {
                if zi != 0 || !form.is_empty() {
                    return Err(Error::parse(&location, "expected the fallback row"));
                }
                fallback = Some(row);
            } else {
                if zi == 0 {
                    return Err(Error::parse(&location, "stored type with zero count"));
                }
                if index.insert(form.to_string(), forms.len()).is_some() {
                    return Err(Error::parse(&location, format!("duplicate form {form:?}")));
                }
                forms.push(form.to_string());
                z.push(zi);
                rows.extend(row);
            }
        }
        if lines.next().transpose()?.is_some_and(|l| !l.is_empty()) {
            return Err(Error::parse("typerep", "trailing content"));
        }
        Ok(TypeRepTable {
            n_classes: n,
            forms,
            index,
            z,
            rows,
            fallback: fallback.expect("loop reads the fallback row"),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn check_row(row: &[f64], location: &str) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(Error::parse(location, format!("row is not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Streaming accumulator of `(Σ u, Z)` per word id. Partial accumulators over
/// disjoint shards combine with [`TypeTableBuilder::merge`].
#[derive(Debug, Clone)]
pub struct TypeTableBuilder {
    n_classes: usize,
    sums: Vec<f64>,
    z: Vec<u64>,
}

impl TypeTableBuilder {
    pub fn new(n_classes: usize, n_words: usize) -> Self {
        TypeTableBuilder {
            n_classes,
            sums: vec![0.0; n_classes * n_words],
            z: vec![0; n_words],
        }
    }

    pub fn add(&mut self, seq: &TokenSequence, rows: &PosteriorMatrix) -> Result<()> {
        if rows.len() != seq.len() || rows.n_classes() != self.n_classes {
            return Err(Error::Shape("posterior rows do not match the sequence".into()));
        }
        for (&w, row) in seq.ids.iter().zip(rows.rows()) {
            let w = w as usize;
            if w >= self.z.len() {
                return Err(Error::Shape(format!("word id {w} outside the vocabulary")));
            }
            self.z[w] += 1;
            for (s, &u) in self.sums[w * self.n_classes..(w + 1) * self.n_classes].iter_mut().zip(row) {
                *s += u;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &TypeTableBuilder) -> Result<()> {
        if other.n_classes != self.n_classes || other.z.len() != self.z.len() {
            return Err(Error::Shape("cannot merge accumulators of different shapes".into()));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.z.iter_mut().zip(&other.z) {
            *a += b;
        }
        Ok(())
    }

    pub fn finish(self, vocab: &Vocabulary) -> Result<TypeRepTable> {
        let n = self.n_classes;
        if vocab.len() != self.z.len() {
            return Err(Error::Shape(format!(
                "vocabulary has {} types, accumulator {}",
                vocab.len(),
                self.z.len()
            )));
        }
        let total: u64 = self.z.iter().sum();
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut forms = Vec::new();
        let mut index = HashMap::new();
        let mut z = Vec::new();
        let mut rows = Vec::new();
        let mut mean = vec![0.0; n];
        for (w, &zw) in self.z.iter().enumerate() {
            if zw == 0 {
                continue;
            }
            let sums = &self.sums[w * n..(w + 1) * n];
            for (m, &s) in mean.iter_mut().zip(sums) {
                *m += s;
            }
            let form = vocab.form(w as u32).to_string();
            index.insert(form.clone(), forms.len());
            forms.push(form);
            z.push(zw);
            rows.extend(sums.iter().map(|&s| s / zw as f64));
        }
        let unk = vocab.unk_id() as usize;
        let fallback = if self.z[unk] > 0 {
            let i = index[vocab.form(unk as u32)];
            rows[i * n..(i + 1) * n].to_vec()
        } else {
            mean.iter().map(|&m| m / total as f64).collect()
        };
        Ok(TypeRepTable {
            n_classes: n,
            forms,
            index,
            z,
            rows,
            fallback,
        })
    }
}

/// Sequences per parallel shard when building a type table.
const SHARD: usize = 256;

/// Averages token posteriors over every occurrence of each type in `corpus`
/// in a single pass. Shards are processed in parallel and merged in corpus
/// order, so the result does not depend on scheduling.
pub fn build_type_table<S>(model: &HmmModel, vocab: &Vocabulary, corpus: &S, k: usize) -> Result<TypeRepTable>
where
    S: SequenceSource + ?Sized,
{
    if vocab.len() != model.n_words() {
        return Err(Error::Shape(format!(
            "vocabulary has {} types, model {}",
            vocab.len(),
            model.n_words()
        )));
    }
    let n = model.n_classes();
    let mut total = TypeTableBuilder::new(n, vocab.len());
    let mut shard = Vec::with_capacity(SHARD * 8);
    let flush = |shard: &mut Vec<TokenSequence>, total: &mut TypeTableBuilder| -> Result<()> {
        let parts: Vec<Result<TypeTableBuilder>> = shard
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut acc = TypeTableBuilder::new(n, vocab.len());
                for seq in chunk {
                    acc.add(seq, &posterior_token_features(model, seq, k)?)?;
                }
                Ok(acc)
            })
            .collect();
        for part in parts {
            total.merge(&part?)?;
        }
        shard.clear();
        Ok(())
    };
    for seq in corpus.sequences() {
        shard.push(seq?);
        if shard.len() == shard.capacity() {
            flush(&mut shard, &mut total)?;
        }
    }
    flush(&mut shard, &mut total)?;
    total.finish(vocab)
}

fn to_log(rows: &mut DenseRows) {
    for x in rows.values.iter_mut() {
        *x = x.max(LOG_FLOOR).ln();
    }
}

/// Everything needed to compute any representation for raw token forms.
#[derive(Debug, Clone)]
pub struct RepresentationSource {
    pub model: HmmModel,
    pub vocab: Vocabulary,
    pub types: Option<TypeRepTable>,
    /// k-best width for token posteriors; `N` means exact.
    pub k: usize,
    /// Emit `ln(max(v, 1e-12))` instead of raw probabilities.
    pub log_features: bool,
    pub lowercase: bool,
}

impl RepresentationSource {
    pub fn new(model: HmmModel, vocab: Vocabulary, types: Option<TypeRepTable>) -> Result<Self> {
        if vocab.len() != model.n_words() {
            return Err(Error::Shape(format!(
                "vocabulary has {} types, model {}",
                vocab.len(),
                model.n_words()
            )));
        }
        if let Some(t) = &types {
            if t.n_classes() != model.n_classes() {
                return Err(Error::Shape("type table and model disagree on N".into()));
            }
        }
        let k = model.n_classes();
        Ok(RepresentationSource {
            model,
            vocab,
            types,
            k,
            log_features: false,
            lowercase: false,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.model.n_classes()
    }

    fn encode<S: AsRef<str>>(&self, forms: &[S]) -> Result<TokenSequence> {
        if self.lowercase {
            let lowered: Vec<String> = forms.iter().map(|f| f.as_ref().to_lowercase()).collect();
            self.vocab.encode(&lowered)
        } else {
            self.vocab.encode(forms)
        }
    }

    fn types(&self) -> Result<&TypeRepTable> {
        self.types
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("representation needs a type table".into()))
    }

    pub fn represent<S: AsRef<str>>(&self, kind: Option<RepKind>, forms: &[S]) -> Result<SequenceReps> {
        let Some(kind) = kind else {
            return Ok(SequenceReps::Baseline);
        };
        let seq = self.encode(forms)?;
        let mut rows: DenseRows = match kind {
            RepKind::Viterbi => return Ok(SequenceReps::Viterbi(viterbi_features(&self.model, &seq)?)),
            RepKind::PosteriorToken => posterior_token_features(&self.model, &seq, self.k)?.into(),
            RepKind::PosteriorType => self.types()?.lookup_type_features(&self.vocab, &seq).into(),
            RepKind::PosteriorBoth => {
                let token = posterior_token_features(&self.model, &seq, self.k)?;
                let types = self.types()?.lookup_type_features(&self.vocab, &seq);
                both_features(&token, &types)?
            }
        };
        if self.log_features {
            to_log(&mut rows);
        }
        Ok(SequenceReps::Dense { kind, rows })
    }
}
