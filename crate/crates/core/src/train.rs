//! Online EM for the word-class HMM.
//!
//! Sufficient statistics are per-token averages over a minibatch. They are
//! folded into running statistics with stepsize `(t + t0)^-alpha`, and the
//! model is re-estimated from the running statistics after every update once
//! the burn-in is over.

use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

use crate::corpus::{TokenSequence, UnlabeledReader, Vocabulary};
use crate::error::{Error, Result};
use crate::hmm::{default_k, kbest_forward_backward, HmmModel};

/// Sequences processed per parallel E-step chunk; bounds the memory held by
/// per-sequence inference results.
const ESTEP_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    n_classes: usize,
    n_words: usize,
    pub init: Vec<f64>,
    /// Row-major `[prev * N + next]`.
    pub trans: Vec<f64>,
    /// Word-major `[word * N + class]`, like the model's emission table.
    pub emit: Vec<f64>,
    pub updates_seen: u64,
}

impl SufficientStats {
    pub fn zeros(n_classes: usize, n_words: usize) -> Self {
        SufficientStats {
            n_classes,
            n_words,
            init: vec![0.0; n_classes],
            trans: vec![0.0; n_classes * n_classes],
            emit: vec![0.0; n_classes * n_words],
            updates_seen: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn emit(&self, class: usize, word: u32) -> f64 {
        self.emit[word as usize * self.n_classes + class]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_classes == other.n_classes && self.n_words == other.n_words
    }

    fn scale(&mut self, factor: f64) {
        for x in self.init.iter_mut().chain(&mut self.trans).chain(&mut self.emit) {
            *x *= factor;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_classes: usize,
    /// Surviving classes per message in the E-step; `None` means
    /// [`default_k`].
    pub k: Option<usize>,
    pub alpha: f64,
    pub t0: f64,
    pub minibatch: usize,
    pub burn_in: u64,
    pub epochs: usize,
    pub seed: u64,
    pub smoothing: f64,
    /// Seeded reshuffle of the corpus at every epoch. Loads the corpus in
    /// memory.
    pub shuffle: bool,
    /// Sequences per progress-log entry.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_classes: 128,
            k: None,
            alpha: 0.6,
            t0: 2.0,
            minibatch: 128,
            burn_in: 8,
            epochs: 1,
            seed: 0,
            smoothing: 1e-6,
            shuffle: false,
            log_every: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::InvalidArgument("at least one latent class is required".into()));
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha = {} outside (0.5, 1]", self.alpha)));
        }
        if !(self.t0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("t0 = {} is negative", self.t0)));
        }
        if self.minibatch == 0 {
            return Err(Error::InvalidArgument("minibatch must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.smoothing >= 0.0) || !self.smoothing.is_finite() {
            return Err(Error::InvalidArgument(format!("smoothing = {} is invalid", self.smoothing)));
        }
        if let Some(k) = self.k {
            if k == 0 || k > self.n_classes {
                return Err(Error::InvalidArgument(format!("k = {k} outside [1, {}]", self.n_classes)));
            }
        }
        Ok(())
    }

    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or_else(|| default_k(self.n_classes))
    }

    pub fn stepsize(&self, t: u64) -> f64 {
        stepsize(t, self.alpha, self.t0)
    }
}

/// `(t + t0)^-alpha`.
pub fn stepsize(t: u64, alpha: f64, t0: f64) -> f64 {
    (t as f64 + t0).powf(-alpha)
}

/// Random starting point: every row drawn from a symmetric Dirichlet(1.1).
pub fn init_model(n_classes: usize, n_words: usize, seed: u64) -> Result<HmmModel> {
    if n_classes == 0 || n_words == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot initialize a model with N={n_classes}, V={n_words}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::<f64>::new(1.1, 1.0).expect("valid gamma parameters");
    let mut draw_row = |len: usize| -> Vec<f64> {
        let mut row: Vec<f64> = (0..len)
            .map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE))
            .collect();
        let sum: f64 = row.iter().sum();
        for x in row.iter_mut() {
            *x /= sum;
        }
        row
    };
    let initial = draw_row(n_classes);
    let transition: Vec<Vec<f64>> = (0..n_classes).map(|_| draw_row(n_classes)).collect();
    let emission: Vec<Vec<f64>> = (0..n_classes).map(|_| draw_row(n_words)).collect();
    HmmModel::from_rows(initial, transition, emission)
}

/// Statistics of one E-step together with the data log-likelihood it saw.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub stats: SufficientStats,
    pub log_likelihood: f64,
    pub tokens: u64,
}

/// Expected counts over `batch`, divided by the batch's token count.
pub fn expectation_step(model: &HmmModel, batch: &[TokenSequence], k: usize) -> Result<SufficientStats> {
    expectation_step_with_likelihood(model, batch, k).map(|b| b.stats)
}

pub fn expectation_step_with_likelihood(model: &HmmModel, batch: &[TokenSequence], k: usize) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = model.n_classes();
    let mut stats = SufficientStats::zeros(n, model.n_words());
    let mut log_likelihood = 0.0;
    let mut tokens = 0u64;
    for chunk in batch.chunks(ESTEP_CHUNK) {
        let results: Vec<_> = chunk
            .par_iter()
            .map(|seq| kbest_forward_backward(model, seq, k))
            .collect::<Result<_>>()?;
        // Merge in sequence order so the sums do not depend on scheduling.
        for (seq, inf) in chunk.iter().zip(results) {
            tokens += seq.len() as u64;
            log_likelihood += inf.log_likelihood;
            for (acc, &u) in stats.init.iter_mut().zip(inf.posteriors.row(0)) {
                *acc += u;
            }
            for table in &inf.pairwise.tables {
                for (a, b, v) in table.iter() {
                    stats.trans[a * n + b] += v;
                }
            }
            for (&w, row) in seq.ids.iter().zip(inf.posteriors.rows()) {
                let slot = &mut stats.emit[w as usize * n..(w as usize + 1) * n];
                for (acc, &u) in slot.iter_mut().zip(row) {
                    *acc += u;
                }
            }
        }
    }
    stats.scale(1.0 / tokens as f64);
    Ok(BatchStats {
        stats,
        log_likelihood,
        tokens,
    })
}

/// `running <- (1 - g) running + g fresh` with `g = (t + t0)^-alpha`. Returns
/// the stepsize used.
pub fn online_update(
    running: &mut SufficientStats,
    fresh: &SufficientStats,
    t: u64,
    alpha: f64,
    t0: f64,
) -> Result<f64> {
    if !running.same_shape(fresh) {
        return Err(Error::Shape(format!(
            "running statistics are {}x{}, fresh ones {}x{}",
            running.n_classes, running.n_words, fresh.n_classes, fresh.n_words
        )));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("update index starts at 1".into()));
    }
    let gamma = stepsize(t, alpha, t0);
    let keep = 1.0 - gamma;
    let pairs = running
        .init
        .iter_mut()
        .zip(&fresh.init)
        .chain(running.trans.iter_mut().zip(&fresh.trans))
        .chain(running.emit.iter_mut().zip(&fresh.emit));
    for (r, &f) in pairs {
        *r = keep * *r + gamma * f;
    }
    running.updates_seen += 1;
    Ok(gamma)
}

/// Re-estimates the model: every row is `(stats row + smoothing)` normalized.
pub fn maximization_step(running: &SufficientStats, smoothing: f64) -> Result<HmmModel> {
    if !(smoothing >= 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing = {smoothing} is negative")));
    }
    let n = running.n_classes;
    let v = running.n_words;

    let normalize = |table: &'static str, row: usize, values: &mut [f64]| -> Result<()> {
        let mut sum = 0.0;
        for x in values.iter_mut() {
            *x += smoothing;
            sum += *x;
        }
        if !(sum > 0.0) {
            return Err(Error::EmptyStatisticsRow { table, row });
        }
        for x in values.iter_mut() {
            *x /= sum;
        }
        Ok(())
    };

    let mut initial = running.init.clone();
    normalize("initial", 0, &mut initial)?;
    let mut transition = running.trans.clone();
    for (c, row) in transition.chunks_exact_mut(n).enumerate() {
        normalize("transition", c, row)?;
    }

    let mut emission = running.emit.clone();
    let mut totals = vec![0.0; n];
    for word in emission.chunks_exact_mut(n) {
        for (t, x) in totals.iter_mut().zip(word.iter_mut()) {
            *x += smoothing;
            *t += *x;
        }
    }
    if let Some(row) = totals.iter().position(|&t| !(t > 0.0)) {
        return Err(Error::EmptyStatisticsRow { table: "emission", row });
    }
    for word in emission.chunks_exact_mut(n) {
        for (x, &t) in word.iter_mut().zip(&totals) {
            *x /= t;
        }
    }
    HmmModel::from_parts(n, v, initial, transition, emission)
}

/// A re-iterable stream of coded sequences (one pass per epoch).
pub trait SequenceSource {
    fn sequences(&self) -> Box<dyn Iterator<Item = Result<TokenSequence>> + '_>;
}

impl SequenceSource for [TokenSequence] {
    fn sequences(&self) -> Box<dyn Iterator<Item = Result<TokenSequence>> + '_> {
        Box::new(self.iter().cloned().map(Ok))
    }
}

impl SequenceSource for Vec<TokenSequence> {
    fn sequences(&self) -> Box<dyn Iterator<Item = Result<TokenSequence>> + '_> {
        self.as_slice().sequences()
    }
}

/// Plain-text corpus files, read in order and coded against `vocab` on the
/// fly. Several files are simply concatenated.
pub struct EncodedFiles<'a> {
    pub paths: Vec<PathBuf>,
    pub vocab: &'a Vocabulary,
    pub lowercase: bool,
}

impl SequenceSource for EncodedFiles<'_> {
    fn sequences(&self) -> Box<dyn Iterator<Item = Result<TokenSequence>> + '_> {
        let iter = self.paths.iter().flat_map(move |path| {
            let lines: Box<dyn Iterator<Item = Result<Vec<String>>>> = match File::open(path) {
                Ok(f) => Box::new(UnlabeledReader::new(BufReader::new(f), self.lowercase)),
                Err(e) => Box::new(std::iter::once(Err(e.into()))),
            };
            lines.map(move |tokens| tokens.and_then(|t| self.vocab.encode(&t)))
        });
        Box::new(iter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressEntry {
    pub sequences_seen: u64,
    /// Mean per-token log-likelihood of the sequences in this window under the
    /// model that was current when they were processed.
    pub avg_log_likelihood: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: HmmModel,
    pub progress: Vec<ProgressEntry>,
    pub updates: u64,
}

/// Trains from a random initialization drawn with `config.seed`.
pub fn train_hmm<S>(corpus: &S, vocab: &Vocabulary, config: &TrainConfig) -> Result<TrainReport>
where
    S: SequenceSource + ?Sized,
{
    config.validate()?;
    let model = init_model(config.n_classes, vocab.len(), config.seed)?;
    train_hmm_from(model, corpus, config)
}

/// Runs online EM starting from `model` with fresh running statistics.
///
/// With a single minibatch covering the corpus, `alpha = 1`, `t0 = 0`,
/// `burn_in = 0` and `epochs = 1`, one call performs exactly one batch EM
/// iteration.
pub fn train_hmm_from<S>(mut model: HmmModel, corpus: &S, config: &TrainConfig) -> Result<TrainReport>
where
    S: SequenceSource + ?Sized,
{
    config.validate()?;
    if model.n_classes() != config.n_classes {
        return Err(Error::Shape(format!(
            "model has {} classes, config asks for {}",
            model.n_classes(),
            config.n_classes
        )));
    }
    let mut state = OnlineEm {
        k: config.effective_k(),
        config,
        running: SufficientStats::zeros(model.n_classes(), model.n_words()),
        updates: 0,
        progress: Progress::new(config.log_every),
    };

    let mut shuffled: Option<Vec<TokenSequence>> = None;
    let mut any = false;
    for epoch in 0..config.epochs {
        let stream: Box<dyn Iterator<Item = Result<TokenSequence>> + '_> = if config.shuffle {
            let mut all = match shuffled.take() {
                Some(all) => all,
                None => corpus.sequences().collect::<Result<Vec<_>>>()?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64 + 1));
            all.shuffle(&mut rng);
            let order = all.clone();
            shuffled = Some(all);
            Box::new(order.into_iter().map(Ok))
        } else {
            corpus.sequences()
        };

        let mut batch = Vec::with_capacity(config.minibatch);
        for seq in stream {
            batch.push(seq?);
            any = true;
            if batch.len() == config.minibatch {
                state.step(&mut model, &batch)?;
                batch.clear();
            }
        }
        if !batch.is_empty() {
            state.step(&mut model, &batch)?;
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }
        info!("epoch {} done after {} updates", epoch + 1, state.updates);
    }

    // A run shorter than the burn-in still re-estimates once.
    if state.updates < config.burn_in.max(1) {
        model = maximization_step(&state.running, config.smoothing)?;
    }
    state.progress.flush();
    Ok(TrainReport {
        model,
        progress: state.progress.entries,
        updates: state.updates,
    })
}

struct OnlineEm<'c> {
    config: &'c TrainConfig,
    k: usize,
    running: SufficientStats,
    updates: u64,
    progress: Progress,
}

impl OnlineEm<'_> {
    fn step(&mut self, model: &mut HmmModel, batch: &[TokenSequence]) -> Result<()> {
        for seq in batch {
            model.check_sequence(&seq.ids)?;
        }
        let fresh = expectation_step_with_likelihood(model, batch, self.k)?;
        self.updates += 1;
        let gamma = online_update(&mut self.running, &fresh.stats, self.updates, self.config.alpha, self.config.t0)?;
        if self.updates >= self.config.burn_in.max(1) {
            *model = maximization_step(&self.running, self.config.smoothing)?;
        }
        debug!(
            "update {}: gamma {gamma:.4}, batch log-likelihood/token {:.4}",
            self.updates,
            fresh.log_likelihood / fresh.tokens as f64
        );
        self.progress.record(batch.len() as u64, fresh.log_likelihood, fresh.tokens);
        Ok(())
    }
}

struct Progress {
    every: u64,
    seen: u64,
    window_ll: f64,
    window_tokens: u64,
    next_mark: u64,
    entries: Vec<ProgressEntry>,
}

impl Progress {
    fn new(every: u64) -> Self {
        let every = every.max(1);
        Progress {
            every,
            seen: 0,
            window_ll: 0.0,
            window_tokens: 0,
            next_mark: every,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, sequences: u64, log_likelihood: f64, tokens: u64) {
        self.seen += sequences;
        self.window_ll += log_likelihood;
        self.window_tokens += tokens;
        if self.seen >= self.next_mark {
            self.flush();
            while self.next_mark <= self.seen {
                self.next_mark += self.every;
            }
        }
    }

    fn flush(&mut self) {
        if self.window_tokens == 0 {
            return;
        }
        let entry = ProgressEntry {
            sequences_seen: self.seen,
            avg_log_likelihood: self.window_ll / self.window_tokens as f64,
        };
        info!(
            "{} sequences: mean log-likelihood/token {:.5}",
            entry.sequences_seen, entry.avg_log_likelihood
        );
        self.entries.push(entry);
        self.window_ll = 0.0;
        self.window_tokens = 0;
    }
}
