//! Linear-chain CRF tagger over word identity plus an optional HMM
//! representation, trained by L2-regularized conditional maximum likelihood.
//!
//! Weights live in one flat vector: the `T × T` tag-pair block first
//! (`prev * T + next`), then one block of `T` weights per feature row. Feature
//! rows are, in order: the bias, one row per word of the training vocabulary
//! (including `<unk>`), and then either `(2·window + 1) · N` Viterbi-class rows
//! or one row per dense representation dimension.

mod lbfgs;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;

use crate::corpus::{LabeledSequence, Tagset, Vocabulary};
use crate::error::{Error, Result};
use crate::representations::{RepKind, SequenceReps};
use crate::textio::{fmt_f64, parse_f64};

pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult, NonFiniteStart, Termination};

const CRF_MAGIC: &str = "SEQREP-CRF";

/// Largest supported context radius for Viterbi-class features.
pub const MAX_WINDOW: usize = 2;

/// Sequences per parallel work unit in the objective.
const CHUNK: usize = 64;

/// Which features the tagger sees besides bias and word identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureTemplate {
    /// `None` is the word-identity baseline.
    pub rep: Option<RepKind>,
    /// Radius of the Viterbi-class window; ignored for other kinds.
    pub window: usize,
    /// Latent classes of the HMM that produces the representation.
    pub n_classes: usize,
    /// Dense features were log-transformed.
    pub log_features: bool,
    /// Forms are lowercased before HMM lookup.
    pub hmm_lowercase: bool,
}

impl FeatureTemplate {
    pub fn baseline() -> Self {
        FeatureTemplate {
            rep: None,
            window: 0,
            n_classes: 0,
            log_features: false,
            hmm_lowercase: false,
        }
    }

    pub fn with_rep(rep: RepKind, n_classes: usize) -> Self {
        FeatureTemplate {
            rep: Some(rep),
            n_classes,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window > MAX_WINDOW {
            return Err(Error::InvalidArgument(format!(
                "window {} exceeds {MAX_WINDOW}",
                self.window
            )));
        }
        if self.rep.is_some() && self.n_classes == 0 {
            return Err(Error::InvalidArgument("representation needs N ≥ 1".into()));
        }
        Ok(())
    }

    fn extra_rows(&self) -> usize {
        match self.rep {
            None => 0,
            Some(RepKind::Viterbi) => (2 * self.window + 1) * self.n_classes,
            Some(kind) => kind.dense_width(self.n_classes),
        }
    }

    fn dense_width(&self) -> usize {
        self.rep.map_or(0, |k| k.dense_width(self.n_classes))
    }
}

/// Index arithmetic for the flat weight vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tags: usize,
    words: usize,
    template: FeatureTemplate,
}

impl Layout {
    fn n_trans(&self) -> usize {
        self.tags * self.tags
    }

    fn n_rows(&self) -> usize {
        1 + self.words + self.template.extra_rows()
    }

    fn n_weights(&self) -> usize {
        self.n_trans() + self.n_rows() * self.tags
    }

    fn word_row(&self, id: u32) -> usize {
        1 + id as usize
    }

    fn extra_row(&self, i: usize) -> usize {
        1 + self.words + i
    }

    fn class_row(&self, delta: isize, class: usize) -> usize {
        let slot = (delta + self.template.window as isize) as usize;
        self.extra_row(slot * self.template.n_classes + class)
    }

    fn slot(&self, row: usize, tag: usize) -> usize {
        self.n_trans() + row * self.tags + tag
    }
}

/// Features of one sequence coded as weight rows.
#[derive(Debug, Clone)]
struct Encoded {
    len: usize,
    /// `cat[cat_start[k]..cat_start[k + 1]]` are token k's categorical rows.
    cat_start: Vec<usize>,
    cat: Vec<usize>,
    dense: Vec<f64>,
    tags: Vec<usize>,
}

impl Encoded {
    fn cats(&self, k: usize) -> &[usize] {
        &self.cat[self.cat_start[k]..self.cat_start[k + 1]]
    }
}

/// Named features of one token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFeatures {
    /// Indicator features such as `BIAS`, `W=dog`, `HC[0]=5`.
    pub categorical: Vec<String>,
    /// Values of the real-valued features `P_0, P_1, ...`.
    pub dense: Vec<f64>,
}

/// Paths of the files a tagger needs to recompute representations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sidecars {
    pub hmm: Option<String>,
    pub hmm_vocab: Option<String>,
    pub typerep: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfModel {
    template: FeatureTemplate,
    tagset: Tagset,
    train_vocab: Vocabulary,
    weights: Vec<f64>,
    pub sidecars: Sidecars,
}

fn check_reps(template: &FeatureTemplate, len: usize, reps: &SequenceReps) -> Result<()> {
    if reps.kind() != template.rep {
        return Err(Error::InvalidArgument(format!(
            "representation {:?} does not match template {:?}",
            reps.kind(),
            template.rep
        )));
    }
    if let Some(n) = reps.len() {
        if n != len {
            return Err(Error::Shape(format!("{n} representation rows for {len} tokens")));
        }
    }
    match reps {
        SequenceReps::Viterbi(classes) => {
            if let Some(&c) = classes.iter().find(|&&c| c >= template.n_classes) {
                return Err(Error::Shape(format!("class {c} outside [0, {})", template.n_classes)));
            }
        }
        SequenceReps::Dense { rows, .. } => {
            if rows.width() != template.dense_width() {
                return Err(Error::Shape(format!(
                    "dense width {} but template expects {}",
                    rows.width(),
                    template.dense_width()
                )));
            }
        }
        SequenceReps::Baseline => {}
    }
    Ok(())
}

fn encode(layout: &Layout, vocab: &Vocabulary, forms: &[String], reps: &SequenceReps, tags: &[u32]) -> Result<Encoded> {
    let template = &layout.template;
    check_reps(template, forms.len(), reps)?;
    let len = forms.len();
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let mut cat_start = Vec::with_capacity(len + 1);
    let mut cat = Vec::with_capacity(len * (2 + 2 * template.window + 1));
    for (k, form) in forms.iter().enumerate() {
        cat_start.push(cat.len());
        cat.push(0);
        cat.push(layout.word_row(vocab.id(form)));
        if let SequenceReps::Viterbi(classes) = reps {
            let w = template.window as isize;
            for delta in -w..=w {
                let pos = k as isize + delta;
                if pos >= 0 && (pos as usize) < len {
                    cat.push(layout.class_row(delta, classes[pos as usize]));
                }
            }
        }
    }
    cat_start.push(cat.len());
    let dense = match reps {
        SequenceReps::Dense { rows, .. } => rows.as_flat().to_vec(),
        _ => Vec::new(),
    };
    if let Some(&t) = tags.iter().find(|&&t| t as usize >= layout.tags) {
        return Err(Error::InvalidArgument(format!("tag id {t} outside the tagset")));
    }
    Ok(Encoded {
        len,
        cat_start,
        cat,
        dense,
        tags: tags.iter().map(|&t| t as usize).collect(),
    })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-position tag scores, `len × T`.
fn unary_scores(layout: &Layout, w: &[f64], e: &Encoded) -> Vec<f64> {
    let t = layout.tags;
    let dw = layout.template.dense_width();
    let mut u = vec![0.0; e.len * t];
    for k in 0..e.len {
        let row = &mut u[k * t..(k + 1) * t];
        for &r in e.cats(k) {
            let base = layout.slot(r, 0);
            for (x, &wt) in row.iter_mut().zip(&w[base..base + t]) {
                *x += wt;
            }
        }
        for j in 0..dw {
            let v = e.dense[k * dw + j];
            if v != 0.0 {
                let base = layout.slot(layout.extra_row(j), 0);
                for (x, &wt) in row.iter_mut().zip(&w[base..base + t]) {
                    *x += v * wt;
                }
            }
        }
    }
    u
}

/// Forward messages in log space; returns `(alpha, log Z)`.
fn forward(t: usize, trans: &[f64], u: &[f64], len: usize) -> (Vec<f64>, f64) {
    let mut alpha = vec![0.0; len * t];
    alpha[..t].copy_from_slice(&u[..t]);
    for k in 1..len {
        let (done, rest) = alpha.split_at_mut(k * t);
        let prev = &done[(k - 1) * t..];
        for y in 0..t {
            rest[y] = u[k * t + y] + log_sum_exp((0..t).map(|a| prev[a] + trans[a * t + y]));
        }
    }
    let log_z = log_sum_exp(alpha[(len - 1) * t..].iter().copied());
    (alpha, log_z)
}

/// `exp(trans − shift)` with `shift` the largest transition weight.
struct ExpTransitions {
    m: Vec<f64>,
    shift: f64,
}

impl ExpTransitions {
    fn new(trans: &[f64]) -> Self {
        let shift = trans.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ExpTransitions {
            m: trans.iter().map(|x| (x - shift).exp()).collect(),
            shift,
        }
    }
}

fn gold_score(t: usize, trans: &[f64], u: &[f64], tags: &[usize]) -> f64 {
    let mut gold = 0.0;
    for k in 0..tags.len() {
        gold += u[k * t + tags[k]];
        if k > 0 {
            gold += trans[tags[k - 1] * t + tags[k]];
        }
    }
    gold
}

/// Adds this sequence's `gold score − log Z` and, when asked, its gradient
/// (empirical minus expected feature counts) into `grad`.
fn sequence_terms(layout: &Layout, w: &[f64], exp_trans: &ExpTransitions, e: &Encoded, grad: Option<&mut [f64]>) -> f64 {
    let u = unary_scores(layout, w, e);
    match scaled_terms(layout, w, exp_trans, e, &u, grad) {
        Ok(v) => v,
        Err(grad) => log_space_terms(layout, w, e, &u, grad),
    }
}

/// Forward-backward with per-position rescaling in probability space. Gives
/// the gradient buffer back untouched when a scale factor leaves the finite
/// positive range, so the caller can redo the sequence in log space.
fn scaled_terms<'g>(
    layout: &Layout,
    w: &[f64],
    exp_trans: &ExpTransitions,
    e: &Encoded,
    u: &[f64],
    grad: Option<&'g mut [f64]>,
) -> std::result::Result<f64, Option<&'g mut [f64]>> {
    let t = layout.tags;
    let len = e.len;
    let m = &exp_trans.m;
    // psi[k][y] = exp(u[k][y] − shift_k)
    let mut psi = vec![0.0; len * t];
    let mut log_z = exp_trans.shift * (len - 1) as f64;
    let mut shifts = vec![0.0; len];
    for k in 0..len {
        let row = &u[k * t..(k + 1) * t];
        let shift = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        shifts[k] = shift;
        for (p, &x) in psi[k * t..(k + 1) * t].iter_mut().zip(row) {
            *p = (x - shift).exp();
        }
    }
    let mut alpha = vec![0.0; len * t];
    let mut scale = vec![0.0; len];
    for k in 0..len {
        let (done, rest) = alpha.split_at_mut(k * t);
        let cur = &mut rest[..t];
        if k == 0 {
            cur.copy_from_slice(&psi[..t]);
        } else {
            let prev = &done[(k - 1) * t..];
            cur.fill(0.0);
            for (a, &pa) in prev.iter().enumerate() {
                for (c, &mab) in cur.iter_mut().zip(&m[a * t..(a + 1) * t]) {
                    *c += pa * mab;
                }
            }
            for (c, &p) in cur.iter_mut().zip(&psi[k * t..(k + 1) * t]) {
                *c *= p;
            }
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0 && c.is_finite()) {
            return Err(grad);
        }
        for x in cur.iter_mut() {
            *x /= c;
        }
        scale[k] = c;
        log_z += shifts[k] + c.ln();
    }
    if !log_z.is_finite() {
        return Err(grad);
    }
    let trans = &w[..layout.n_trans()];
    let gold = gold_score(t, trans, u, &e.tags);
    let Some(grad) = grad else {
        return Ok(gold - log_z);
    };

    let mut beta = vec![1.0; len * t];
    let mut next = vec![0.0; t];
    for k in (0..len - 1).rev() {
        for y in 0..t {
            next[y] = psi[(k + 1) * t + y] * beta[(k + 1) * t + y] / scale[k + 1];
        }
        for a in 0..t {
            beta[k * t + a] = m[a * t..(a + 1) * t].iter().zip(&next).map(|(x, y)| x * y).sum();
        }
    }

    let dw = layout.template.dense_width();
    let mut coef = vec![0.0; t];
    for k in 0..len {
        for y in 0..t {
            coef[y] = -alpha[k * t + y] * beta[k * t + y];
        }
        coef[e.tags[k]] += 1.0;
        add_unary_gradient(layout, e, k, dw, &coef, grad);
        if k > 0 {
            for y in 0..t {
                next[y] = psi[k * t + y] * beta[k * t + y] / scale[k];
            }
            for a in 0..t {
                let left = alpha[(k - 1) * t + a];
                for (b, g) in grad[a * t..(a + 1) * t].iter_mut().enumerate() {
                    *g -= left * m[a * t + b] * next[b];
                }
            }
            grad[e.tags[k - 1] * t + e.tags[k]] += 1.0;
        }
    }
    Ok(gold - log_z)
}

fn add_unary_gradient(layout: &Layout, e: &Encoded, k: usize, dw: usize, coef: &[f64], grad: &mut [f64]) {
    let t = layout.tags;
    for &r in e.cats(k) {
        let base = layout.slot(r, 0);
        for (g, &c) in grad[base..base + t].iter_mut().zip(coef) {
            *g += c;
        }
    }
    for j in 0..dw {
        let v = e.dense[k * dw + j];
        if v != 0.0 {
            let base = layout.slot(layout.extra_row(j), 0);
            for (g, &c) in grad[base..base + t].iter_mut().zip(coef) {
                *g += v * c;
            }
        }
    }
}

/// The same quantities computed with log-sum-exp throughout.
fn log_space_terms(layout: &Layout, w: &[f64], e: &Encoded, u: &[f64], grad: Option<&mut [f64]>) -> f64 {
    let t = layout.tags;
    let trans = &w[..layout.n_trans()];
    let (alpha, log_z) = forward(t, trans, u, e.len);

    let gold = gold_score(t, trans, u, &e.tags);
    let Some(grad) = grad else {
        return gold - log_z;
    };

    let mut beta = vec![0.0; e.len * t];
    for k in (0..e.len - 1).rev() {
        for a in 0..t {
            beta[k * t + a] =
                log_sum_exp((0..t).map(|y| trans[a * t + y] + u[(k + 1) * t + y] + beta[(k + 1) * t + y]));
        }
    }

    let dw = layout.template.dense_width();
    let mut coef = vec![0.0; t];
    for k in 0..e.len {
        for y in 0..t {
            coef[y] = -(alpha[k * t + y] + beta[k * t + y] - log_z).exp();
        }
        coef[e.tags[k]] += 1.0;
        add_unary_gradient(layout, e, k, dw, &coef, grad);
        if k > 0 {
            for a in 0..t {
                let left = alpha[(k - 1) * t + a] - log_z;
                for b in 0..t {
                    let p = (left + trans[a * t + b] + u[k * t + b] + beta[k * t + b]).exp();
                    grad[a * t + b] -= p;
                }
            }
            grad[e.tags[k - 1] * t + e.tags[k]] += 1.0;
        }
    }
    gold - log_z
}

/// Highest-scoring tag sequence. Ties go to the smaller tag id, comparing
/// from the last position backwards.
fn viterbi_tags(t: usize, trans: &[f64], u: &[f64], len: usize) -> Vec<u32> {
    let mut delta = u[..t].to_vec();
    let mut back = vec![0u32; len * t];
    let mut next = vec![0.0; t];
    for k in 1..len {
        for y in 0..t {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for a in 0..t {
                let s = delta[a] + trans[a * t + y];
                if s > best {
                    best = s;
                    arg = a;
                }
            }
            next[y] = best + u[k * t + y];
            back[k * t + y] = arg as u32;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut last = 0;
    for y in 1..t {
        if delta[y] > delta[last] {
            last = y;
        }
    }
    let mut path = vec![0u32; len];
    path[len - 1] = last as u32;
    for k in (1..len).rev() {
        path[k - 1] = back[k * t + path[k] as usize];
    }
    path
}

impl CrfModel {
    /// A model with every weight zero.
    pub fn zeros(template: FeatureTemplate, tagset: Tagset, train_vocab: Vocabulary) -> Result<Self> {
        template.validate()?;
        if tagset.is_empty() {
            return Err(Error::InvalidArgument("empty tagset".into()));
        }
        let mut model = CrfModel {
            template,
            tagset,
            train_vocab,
            weights: Vec::new(),
            sidecars: Sidecars::default(),
        };
        model.weights = vec![0.0; model.layout().n_weights()];
        Ok(model)
    }

    fn layout(&self) -> Layout {
        Layout {
            tags: self.tagset.len(),
            words: self.train_vocab.len(),
            template: self.template,
        }
    }

    pub fn template(&self) -> &FeatureTemplate {
        &self.template
    }

    pub fn tagset(&self) -> &Tagset {
        &self.tagset
    }

    pub fn train_vocab(&self) -> &Vocabulary {
        &self.train_vocab
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} slots",
                weights.len(),
                self.weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidModel("non-finite weight".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn n_weights(&self) -> usize {
        self.weights.len()
    }

    pub fn transition(&self, prev: u32, next: u32) -> f64 {
        self.weights[prev as usize * self.tagset.len() + next as usize]
    }

    /// Name of every feature row, in slot order.
    pub fn feature_names(&self) -> Vec<String> {
        let layout = self.layout();
        (0..layout.n_rows()).map(|r| self.row_name(r)).collect()
    }

    fn row_name(&self, row: usize) -> String {
        let layout = self.layout();
        if row == 0 {
            return "BIAS".into();
        }
        if row <= layout.words {
            return format!("W={}", self.train_vocab.form(row as u32 - 1));
        }
        let i = row - 1 - layout.words;
        match self.template.rep {
            Some(RepKind::Viterbi) => {
                let n = self.template.n_classes;
                let delta = (i / n) as isize - self.template.window as isize;
                format!("HC[{delta}]={}", i % n)
            }
            _ => format!("P_{i}"),
        }
    }

    fn row_of(&self, name: &str) -> Option<usize> {
        let layout = self.layout();
        if name == "BIAS" {
            return Some(0);
        }
        if let Some(form) = name.strip_prefix("W=") {
            if form == crate::corpus::UNK_FORM {
                return Some(layout.word_row(self.train_vocab.unk_id()));
            }
            return self.train_vocab.contains(form).then(|| layout.word_row(self.train_vocab.id(form)));
        }
        match self.template.rep {
            Some(RepKind::Viterbi) => {
                let rest = name.strip_prefix("HC[")?;
                let (delta, class) = rest.split_once("]=")?;
                let delta: isize = delta.parse().ok()?;
                let class: usize = class.parse().ok()?;
                let w = self.template.window as isize;
                (delta.abs() <= w && class < self.template.n_classes).then(|| layout.class_row(delta, class))
            }
            Some(kind) => {
                let j: usize = name.strip_prefix("P_")?.parse().ok()?;
                (j < kind.dense_width(self.template.n_classes)).then(|| layout.extra_row(j))
            }
            None => None,
        }
    }

    /// Weight of `(feature, tag)`, or `None` if the feature does not exist.
    pub fn weight(&self, feature: &str, tag: u32) -> Option<f64> {
        let row = self.row_of(feature)?;
        ((tag as usize) < self.tagset.len()).then(|| self.weights[self.layout().slot(row, tag as usize)])
    }

    pub fn extract_features(&self, forms: &[String], reps: &SequenceReps) -> Result<Vec<TokenFeatures>> {
        let layout = self.layout();
        let e = encode(&layout, &self.train_vocab, forms, reps, &[])?;
        let dw = self.template.dense_width();
        Ok((0..e.len)
            .map(|k| TokenFeatures {
                categorical: e.cats(k).iter().map(|&r| self.row_name(r)).collect(),
                dense: e.dense[k * dw..(k + 1) * dw].to_vec(),
            })
            .collect())
    }

    fn scores(&self, forms: &[String], reps: &SequenceReps) -> Result<(Layout, Vec<f64>, usize)> {
        let layout = self.layout();
        let e = encode(&layout, &self.train_vocab, forms, reps, &[])?;
        Ok((layout, unary_scores(&layout, &self.weights, &e), e.len))
    }

    pub fn decode(&self, forms: &[String], reps: &SequenceReps) -> Result<Vec<u32>> {
        let (layout, u, len) = self.scores(forms, reps)?;
        Ok(viterbi_tags(layout.tags, &self.weights[..layout.n_trans()], &u, len))
    }

    /// Unnormalized log-score of one labeling.
    pub fn score(&self, forms: &[String], reps: &SequenceReps, tags: &[u32]) -> Result<f64> {
        if tags.len() != forms.len() {
            return Err(Error::Shape("tags and forms differ in length".into()));
        }
        let (layout, u, len) = self.scores(forms, reps)?;
        let t = layout.tags;
        let mut s = 0.0;
        for k in 0..len {
            s += u[k * t + tags[k] as usize];
            if k > 0 {
                s += self.weights[tags[k - 1] as usize * t + tags[k] as usize];
            }
        }
        Ok(s)
    }

    pub fn log_partition(&self, forms: &[String], reps: &SequenceReps) -> Result<f64> {
        let (layout, u, len) = self.scores(forms, reps)?;
        Ok(forward(layout.tags, &self.weights[..layout.n_trans()], &u, len).1)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let tpl = &self.template;
        writeln!(out, "{CRF_MAGIC} 1")?;
        writeln!(
            out,
            "template\trep={}\twindow={}\tclasses={}\tlog={}\tlowercase={}",
            tpl.rep.map_or("baseline", |k| k.name()),
            tpl.window,
            tpl.n_classes,
            u8::from(tpl.log_features),
            u8::from(tpl.hmm_lowercase)
        )?;
        for (key, value) in [
            ("hmm", &self.sidecars.hmm),
            ("hmm-vocab", &self.sidecars.hmm_vocab),
            ("typerep", &self.sidecars.typerep),
        ] {
            if let Some(path) = value {
                writeln!(out, "sidecar\t{key}\t{path}")?;
            }
        }
        writeln!(out, "tagset\t{}", self.tagset.len())?;
        for tag in self.tagset.tags() {
            writeln!(out, "{tag}")?;
        }
        writeln!(out, "vocab\t{}", self.train_vocab.len())?;
        self.train_vocab.write_to(&mut out)?;

        let layout = self.layout();
        let t = layout.tags;
        let nonzero = self.weights.iter().filter(|&&w| w != 0.0).count();
        writeln!(out, "weights\t{nonzero}")?;
        for a in 0..t {
            for b in 0..t {
                let w = self.weights[a * t + b];
                if w != 0.0 {
                    writeln!(out, "TRANS={}\t{}\t{}", self.tagset.tag(a as u32), self.tagset.tag(b as u32), fmt_f64(w))?;
                }
            }
        }
        for row in 0..layout.n_rows() {
            let block = &self.weights[layout.slot(row, 0)..layout.slot(row, 0) + t];
            if block.iter().all(|&w| w == 0.0) {
                continue;
            }
            let name = self.row_name(row);
            for (tag, &w) in block.iter().enumerate() {
                if w != 0.0 {
                    writeln!(out, "{name}\t{}\t{}", self.tagset.tag(tag as u32), fmt_f64(w))?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let mut next_line = |what: &str| -> Result<(String, String)> {
            match lines.next() {
                Some((i, line)) => Ok((format!("crf line {}", i + 1), line?)),
                None => Err(Error::parse("crf", format!("unexpected end of file, expected {what}"))),
            }
        };

        let (loc, header) = next_line("header")?;
        if header.trim() != format!("{CRF_MAGIC} 1") {
            return Err(Error::parse(loc, format!("bad header {header:?}")));
        }

        let (loc, line) = next_line("template")?;
        let mut fields = line.split('\t');
        if fields.next() != Some("template") {
            return Err(Error::parse(loc, "expected the template block"));
        }
        let mut template = FeatureTemplate::baseline();
        for field in fields {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(&loc, format!("bad template field {field:?}")))?;
            let bad = || Error::parse(&loc, format!("bad value for {key}"));
            match key {
                "rep" => template.rep = if value == "baseline" { None } else { Some(value.parse()?) },
                "window" => template.window = value.parse().map_err(|_| bad())?,
                "classes" => template.n_classes = value.parse().map_err(|_| bad())?,
                "log" => template.log_features = value == "1",
                "lowercase" => template.hmm_lowercase = value == "1",
                _ => return Err(Error::parse(&loc, format!("unknown template field {key:?}"))),
            }
        }

        let mut sidecars = Sidecars::default();
        let (mut loc, mut line) = next_line("tagset")?;
        while let Some(rest) = line.strip_prefix("sidecar\t") {
            let (key, path) = rest
                .split_once('\t')
                .ok_or_else(|| Error::parse(&loc, "expected sidecar<TAB>kind<TAB>path"))?;
            let slot = match key {
                "hmm" => &mut sidecars.hmm,
                "hmm-vocab" => &mut sidecars.hmm_vocab,
                "typerep" => &mut sidecars.typerep,
                _ => return Err(Error::parse(&loc, format!("unknown sidecar {key:?}"))),
            };
            *slot = Some(path.to_string());
            (loc, line) = next_line("tagset")?;
        }

        let count = |line: &str, key: &str, loc: &str| -> Result<usize> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix('\t'))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::parse(loc, format!("expected {key}<TAB>count")))
        };
        let n_tags = count(&line, "tagset", &loc)?;
        let mut tags = Vec::with_capacity(n_tags);
        for _ in 0..n_tags {
            tags.push(next_line("tag")?.1);
        }
        let tagset = Tagset::new(&tags)?;

        let (loc, line) = next_line("vocab")?;
        let n_words = count(&line, "vocab", &loc)?;
        let mut block = String::new();
        for _ in 0..=n_words {
            block.push_str(&next_line("vocabulary entry")?.1);
            block.push('\n');
        }
        let train_vocab = Vocabulary::read_from(block.as_bytes())?;

        let (loc, line) = next_line("weights")?;
        let n_weights = count(&line, "weights", &loc)?;
        let mut model = CrfModel::zeros(template, tagset, train_vocab)?;
        model.sidecars = sidecars;
        let layout = model.layout();
        for _ in 0..n_weights {
            let (loc, line) = next_line("weight")?;
            let mut parts = line.rsplitn(3, '\t');
            let (Some(value), Some(tag), Some(feature)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::parse(loc, "expected feature<TAB>tag<TAB>weight"));
            };
            let value = parse_f64(value, &loc)?;
            if !value.is_finite() {
                return Err(Error::parse(loc, "non-finite weight"));
            }
            let tag = model
                .tagset
                .id(tag)
                .ok_or_else(|| Error::parse(&loc, format!("unknown tag {tag:?}")))? as usize;
            let slot = if let Some(prev) = feature.strip_prefix("TRANS=") {
                let prev = model
                    .tagset
                    .id(prev)
                    .ok_or_else(|| Error::parse(&loc, format!("unknown tag {prev:?}")))?;
                prev as usize * layout.tags + tag
            } else {
                let row = model
                    .row_of(feature)
                    .ok_or_else(|| Error::parse(&loc, format!("unknown feature {feature:?}")))?;
                layout.slot(row, tag)
            };
            model.weights[slot] = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// L2 strength λ.
    pub l2: f64,
    pub max_iters: usize,
    /// Gradient max-norm at which training stops.
    pub tol: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            l2: 1.0,
            max_iters: 200,
            tol: 1e-4,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::InvalidArgument(format!("l2 = {} must be finite and ≥ 0", self.l2)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol = {} must be > 0", self.tol)));
        }
        Ok(())
    }
}

/// The regularized conditional log-likelihood of a fixed data set as a
/// function of the weight vector.
#[derive(Debug, Clone)]
pub struct CrfProblem {
    layout: Layout,
    data: Vec<Encoded>,
    l2: f64,
}

impl CrfProblem {
    /// Codes `data` against `model`'s template, tagset and training
    /// vocabulary; `reps[i]` belongs to `data[i]`.
    pub fn new(model: &CrfModel, data: &[LabeledSequence], reps: &[SequenceReps], l2: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if reps.len() != data.len() {
            return Err(Error::Shape(format!("{} representations for {} sequences", reps.len(), data.len())));
        }
        let layout = model.layout();
        let data = data
            .iter()
            .zip(reps)
            .map(|(s, r)| encode(&layout, &model.train_vocab, &s.forms, r, &s.tags))
            .collect::<Result<Vec<_>>>()?;
        Ok(CrfProblem { layout, data, l2 })
    }

    pub fn n_weights(&self) -> usize {
        self.layout.n_weights()
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        0.5 * self.l2 * w.iter().map(|x| x * x).sum::<f64>()
    }

    /// `Σ log p(y | x) − (λ/2)‖w‖²`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let exp_trans = ExpTransitions::new(&w[..self.layout.n_trans()]);
        let parts: Vec<f64> = self
            .data
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().map(|e| sequence_terms(&self.layout, w, &exp_trans, e, None)).sum())
            .collect();
        parts.iter().sum::<f64>() - self.penalty(w)
    }

    /// Unregularized conditional log-likelihood.
    pub fn log_likelihood(&self, w: &[f64]) -> f64 {
        self.objective(w) + self.penalty(w)
    }

    /// The objective and its gradient. Chunks are reduced in data order, so
    /// the result does not depend on thread scheduling.
    pub fn value_and_gradient(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let n = self.n_weights();
        let exp_trans = ExpTransitions::new(&w[..self.layout.n_trans()]);
        let parts: Vec<(f64, Vec<f64>)> = self
            .data
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; n];
                let v = chunk.iter().map(|e| sequence_terms(&self.layout, w, &exp_trans, e, Some(&mut g))).sum();
                (v, g)
            })
            .collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; n];
        for (v, g) in parts {
            value += v;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        for (g, &x) in grad.iter_mut().zip(w) {
            *g -= self.l2 * x;
        }
        (value - self.penalty(w), grad)
    }
}

pub fn crf_log_likelihood(model: &CrfModel, data: &[LabeledSequence], reps: &[SequenceReps], l2: f64) -> Result<f64> {
    Ok(CrfProblem::new(model, data, reps, l2)?.objective(&model.weights))
}

pub fn crf_gradient(model: &CrfModel, data: &[LabeledSequence], reps: &[SequenceReps], l2: f64) -> Result<Vec<f64>> {
    Ok(CrfProblem::new(model, data, reps, l2)?.value_and_gradient(&model.weights).1)
}

#[derive(Debug, Clone)]
pub struct CrfFit {
    pub model: CrfModel,
    /// Final regularized log-likelihood.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step.
    pub history: Vec<f64>,
}

/// Trains a tagger on `data`; the word features cover every form in `data`.
pub fn train_crf(
    data: &[LabeledSequence],
    reps: &[SequenceReps],
    template: FeatureTemplate,
    tagset: &Tagset,
    options: &TrainOptions,
) -> Result<CrfFit> {
    options.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let train_vocab = Vocabulary::build(data.iter().map(|s| s.forms.iter()), 1)?;
    let mut model = CrfModel::zeros(template, tagset.clone(), train_vocab)?;
    let problem = CrfProblem::new(&model, data, reps, options.l2)?;
    let opts = LbfgsOptions {
        max_iters: options.max_iters,
        tol: options.tol,
        ..LbfgsOptions::default()
    };
    let negated = |w: &[f64]| {
        let (v, mut g) = problem.value_and_gradient(w);
        for x in g.iter_mut() {
            *x = -*x;
        }
        (-v, g)
    };
    let result = minimize(negated, vec![0.0; problem.n_weights()], &opts).map_err(|NonFiniteStart(v)| {
        Error::NonFiniteObjective {
            iterations: 0,
            detail: format!("objective {v} at the zero weight vector"),
        }
    })?;
    let converged = result.termination == Termination::Converged;
    match result.termination {
        Termination::Converged => {}
        Termination::MaxIterations => warn!(
            "CRF stopped after {} iterations with gradient max-norm {:.3e}",
            result.iterations, result.gradient_max_norm
        ),
        Termination::LineSearchFailed => info!(
            "CRF line search stalled after {} iterations (gradient max-norm {:.3e})",
            result.iterations, result.gradient_max_norm
        ),
    }
    info!(
        "CRF trained: {} weights, {} iterations, objective {:.6}",
        result.x.len(),
        result.iterations,
        -result.value
    );
    model.set_weights(result.x).map_err(|_| Error::NonFiniteObjective {
        iterations: result.iterations,
        detail: "non-finite weights after optimization".into(),
    })?;
    Ok(CrfFit {
        model,
        objective: -result.value,
        iterations: result.iterations,
        converged,
        history: result.history.into_iter().map(|v| -v).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Domain;
    use crate::representations::DenseRows;

    fn forms(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    fn labeled(words: &[&str], tags: &[u32]) -> LabeledSequence {
        LabeledSequence::new(forms(words), tags.to_vec(), Domain::Source).unwrap()
    }

    fn two_tags() -> Tagset {
        Tagset::new(&["A", "B"]).unwrap()
    }

    #[test]
    fn baseline_features_are_bias_and_word() {
        let vocab = Vocabulary::build([vec!["dog"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::baseline(), Tagset::universal(), vocab).unwrap();
        let f = model.extract_features(&forms(&["dog"]), &SequenceReps::Baseline).unwrap();
        assert_eq!(f[0].categorical, vec!["BIAS", "W=dog"]);
        assert!(f[0].dense.is_empty());
        let unseen = model.extract_features(&forms(&["cat"]), &SequenceReps::Baseline).unwrap();
        assert_eq!(unseen[0].categorical, vec!["BIAS", "W=<unk>"]);
        assert_eq!(model.feature_names(), vec!["BIAS", "W=<unk>", "W=dog"]);
    }

    #[test]
    fn viterbi_class_features() {
        let vocab = Vocabulary::build([vec!["a"]], 1).unwrap();
        let template = FeatureTemplate::with_rep(RepKind::Viterbi, 8);
        let model = CrfModel::zeros(template, two_tags(), vocab.clone()).unwrap();
        let f = model.extract_features(&forms(&["a"]), &SequenceReps::Viterbi(vec![5])).unwrap();
        assert_eq!(f[0].categorical, vec!["BIAS", "W=a", "HC[0]=5"]);

        let wide = FeatureTemplate { window: 1, ..template };
        let model = CrfModel::zeros(wide, two_tags(), vocab).unwrap();
        let f = model
            .extract_features(&forms(&["a", "a", "a"]), &SequenceReps::Viterbi(vec![1, 2, 3]))
            .unwrap();
        assert_eq!(f[0].categorical, vec!["BIAS", "W=a", "HC[0]=1", "HC[1]=2"]);
        assert_eq!(f[1].categorical, vec!["BIAS", "W=a", "HC[-1]=1", "HC[0]=2", "HC[1]=3"]);
        assert!(model.weight("HC[-1]=7", 0).is_some());
        assert!(model.weight("HC[2]=0", 0).is_none());
    }

    #[test]
    fn dense_block_passes_through() {
        let vocab = Vocabulary::build([vec!["a"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::with_rep(RepKind::PosteriorBoth, 2), two_tags(), vocab).unwrap();
        let rows = DenseRows::new(4, vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let reps = SequenceReps::Dense { kind: RepKind::PosteriorBoth, rows };
        let f = model.extract_features(&forms(&["a"]), &reps).unwrap();
        assert_eq!(f[0].dense, vec![0.2, 0.8, 0.6, 0.4]);
        assert!(model.extract_features(&forms(&["a"]), &SequenceReps::Baseline).is_err());
    }

    #[test]
    fn uniform_model_likelihood_and_gradient() {
        let tagset = Tagset::universal();
        let data = vec![labeled(&["a", "b", "a"], &[0, 5, 11])];
        let vocab = Vocabulary::build([vec!["a", "b"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::baseline(), tagset, vocab).unwrap();
        let ll = crf_log_likelihood(&model, &data, &[SequenceReps::Baseline], 0.0).unwrap();
        assert!((ll - (-3.0 * 12f64.ln())).abs() < 1e-12);

        let single = vec![labeled(&["b"], &[5])];
        let g = crf_gradient(&model, &single, &[SequenceReps::Baseline], 1.0).unwrap();
        let bias = model.layout().slot(0, 0);
        for y in 0..12 {
            let expected = if y == 5 { 1.0 - 1.0 / 12.0 } else { -1.0 / 12.0 };
            assert!((g[bias + y] - expected).abs() < 1e-12);
        }
        assert!(g[..144].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaled_and_log_space_passes_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vocab = Vocabulary::build([vec!["a", "b", "c"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::baseline(), Tagset::universal(), vocab.clone()).unwrap();
        let layout = model.layout();
        let words = forms(&["a", "c", "zz", "b", "a", "b", "c"]);
        let tags = [4u32, 5, 9, 1, 0, 11, 3];
        let e = encode(&layout, &vocab, &words, &SequenceReps::Baseline, &tags).unwrap();
        for magnitude in [0.1, 3.0, 800.0] {
            let w: Vec<f64> = (0..layout.n_weights()).map(|_| rng.random_range(-magnitude..magnitude)).collect();
            let u = unary_scores(&layout, &w, &e);
            let exp_trans = ExpTransitions::new(&w[..layout.n_trans()]);
            let mut g_log = vec![0.0; w.len()];
            let v_log = log_space_terms(&layout, &w, &e, &u, Some(&mut g_log));
            let mut g = vec![0.0; w.len()];
            let v = sequence_terms(&layout, &w, &exp_trans, &e, Some(&mut g));
            assert!(v.is_finite() && (v - v_log).abs() <= 1e-9 * v_log.abs().max(1.0), "{v} vs {v_log}");
            for (a, b) in g.iter().zip(&g_log) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_weights_decode_to_tag_zero() {
        let vocab = Vocabulary::build([vec!["a"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::baseline(), Tagset::universal(), vocab).unwrap();
        assert_eq!(model.decode(&forms(&["a", "x", "a"]), &SequenceReps::Baseline).unwrap(), vec![0, 0, 0]);

        let single = Tagset::new(&["ONLY"]).unwrap();
        let vocab = Vocabulary::build([vec!["a"]], 1).unwrap();
        let model = CrfModel::zeros(FeatureTemplate::baseline(), single, vocab).unwrap();
        assert_eq!(model.decode(&forms(&["a", "b"]), &SequenceReps::Baseline).unwrap(), vec![0, 0]);
    }

    #[test]
    fn separable_data_is_fit_exactly() {
        let data = vec![
            labeled(&["x1", "y1", "x2"], &[0, 1, 0]),
            labeled(&["y2", "y1"], &[1, 1]),
            labeled(&["x2", "x3", "y3"], &[0, 0, 1]),
        ];
        let reps = vec![SequenceReps::Baseline; 3];
        let options = TrainOptions { l2: 0.1, ..Default::default() };
        let fit = train_crf(&data, &reps, FeatureTemplate::baseline(), &two_tags(), &options).unwrap();
        for s in &data {
            assert_eq!(fit.model.decode(&s.forms, &SequenceReps::Baseline).unwrap(), s.tags);
        }
        assert!(fit.history.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let data = vec![labeled(&["x", "y"], &[0, 1]), labeled(&["y", "x"], &[1, 0])];
        let reps = vec![SequenceReps::Baseline; 2];
        let norm = |l2: f64| {
            let options = TrainOptions { l2, ..Default::default() };
            let fit = train_crf(&data, &reps, FeatureTemplate::baseline(), &two_tags(), &options).unwrap();
            fit.model.weights().iter().fold(0.0f64, |m, w| m.max(w.abs()))
        };
        let (small, large, huge) = (norm(0.1), norm(100.0), norm(1e6));
        assert!(large < small && huge < large);
        assert!(huge < 1e-5);
    }

    #[test]
    fn serialization_round_trips_exactly() {
        let data = vec![labeled(&["x", "y", "z"], &[0, 1, 1]), labeled(&["z", "x"], &[1, 0])];
        let rows = |n: usize| DenseRows::new(2, (0..n).flat_map(|i| [0.3 + 0.1 * i as f64, 0.7 - 0.1 * i as f64]).collect()).unwrap();
        let reps = vec![
            SequenceReps::Dense { kind: RepKind::PosteriorToken, rows: rows(3) },
            SequenceReps::Dense { kind: RepKind::PosteriorToken, rows: rows(2) },
        ];
        let template = FeatureTemplate::with_rep(RepKind::PosteriorToken, 2);
        let mut fit = train_crf(&data, &reps, template, &two_tags(), &TrainOptions::default()).unwrap();
        fit.model.sidecars.hmm = Some("model.hmm".into());
        fit.model.sidecars.typerep = Some("dir with space/t.typerep".into());
        let mut buf = Vec::new();
        fit.model.write_to(&mut buf).unwrap();
        let back = CrfModel::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, fit.model);
    }
}
