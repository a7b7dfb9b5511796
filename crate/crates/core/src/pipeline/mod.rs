//! Experiment orchestration: evaluation, the corpus-mixing table, the
//! learning curve over target labeled data, and a synthetic two-domain
//! benchmark.

mod synthetic;

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;

use crate::corpus::{oov_mask_forms, read_labeled_file, read_unlabeled_file, Domain, LabeledSequence, Tagset, Vocabulary};
use crate::crf::{train_crf, CrfModel, FeatureTemplate, TrainOptions};
use crate::error::{Error, Result};
use crate::hmm::HmmModel;
use crate::representations::{build_type_table, RepKind, RepresentationSource, SequenceReps, TypeRepTable};
use crate::train::{train_hmm, TrainConfig};

pub use synthetic::{make_synthetic_domains, SyntheticConfig, SyntheticDomains};

/// Which unlabeled data the HMM is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorpusMode {
    Source,
    Both,
    Target,
}

impl CorpusMode {
    pub const ALL: [CorpusMode; 3] = [CorpusMode::Source, CorpusMode::Both, CorpusMode::Target];

    pub fn name(self) -> &'static str {
        match self {
            CorpusMode::Source => "source",
            CorpusMode::Both => "both",
            CorpusMode::Target => "target",
        }
    }
}

impl fmt::Display for CorpusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorpusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(CorpusMode::Source),
            "both" => Ok(CorpusMode::Both),
            "target" => Ok(CorpusMode::Target),
            other => Err(Error::InvalidArgument(format!("unknown corpus mode {other:?}"))),
        }
    }
}

/// Display name of a representation, `baseline` for word identity only.
pub fn rep_name(rep: Option<RepKind>) -> &'static str {
    rep.map_or("baseline", RepKind::name)
}

pub fn parse_rep(s: &str) -> Result<Option<RepKind>> {
    if s == "baseline" || s == "none" {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Accuracy figures for one tagged test set. Percentages are in `[0, 100]`;
/// the OOV accuracy is 0 when the test set has no OOV token.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub token_accuracy: f64,
    pub oov_accuracy: f64,
    pub oov_rate: f64,
    pub n_tokens: u64,
    pub n_oov: u64,
    pub n_correct: u64,
    pub n_oov_correct: u64,
    pub n_tags: usize,
    /// `confusion[gold * n_tags + predicted]`.
    pub confusion: Vec<u64>,
}

impl EvalReport {
    pub fn confusion(&self, gold: u32, predicted: u32) -> u64 {
        self.confusion[gold as usize * self.n_tags + predicted as usize]
    }
}

fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Scores `predicted` against `gold`; a token is OOV when its form is not a
/// registered type of `train_vocab`.
pub fn evaluate_predictions(
    gold: &[LabeledSequence],
    predicted: &[Vec<u32>],
    train_vocab: &Vocabulary,
    n_tags: usize,
) -> Result<EvalReport> {
    if gold.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if gold.len() != predicted.len() {
        return Err(Error::Shape(format!("{} predictions for {} sequences", predicted.len(), gold.len())));
    }
    let mut confusion = vec![0u64; n_tags * n_tags];
    let (mut n_tokens, mut n_oov, mut n_correct, mut n_oov_correct) = (0, 0, 0, 0);
    for (g, p) in gold.iter().zip(predicted) {
        if g.len() != p.len() {
            return Err(Error::Shape("prediction length differs from gold".into()));
        }
        let oov = oov_mask_forms(train_vocab, &g.forms);
        for ((&gt, &pt), &is_oov) in g.tags.iter().zip(p).zip(&oov) {
            if gt as usize >= n_tags || pt as usize >= n_tags {
                return Err(Error::InvalidArgument(format!("tag outside [0, {n_tags})")));
            }
            confusion[gt as usize * n_tags + pt as usize] += 1;
            n_tokens += 1;
            let hit = gt == pt;
            n_correct += u64::from(hit);
            if is_oov {
                n_oov += 1;
                n_oov_correct += u64::from(hit);
            }
        }
    }
    Ok(EvalReport {
        token_accuracy: percent(n_correct, n_tokens),
        oov_accuracy: percent(n_oov_correct, n_oov),
        oov_rate: percent(n_oov, n_tokens),
        n_tokens,
        n_oov,
        n_correct,
        n_oov_correct,
        n_tags,
        confusion,
    })
}

/// A trained CRF together with whatever it needs to compute its
/// representation for new sentences.
#[derive(Debug, Clone)]
pub struct Tagger {
    pub crf: CrfModel,
    pub reps: Option<RepresentationSource>,
}

impl Tagger {
    pub fn new(crf: CrfModel, reps: Option<RepresentationSource>) -> Result<Self> {
        if crf.template().rep.is_some() && reps.is_none() {
            return Err(Error::InvalidArgument("this tagger needs an HMM representation source".into()));
        }
        Ok(Tagger { crf, reps })
    }

    /// Loads a CRF and the sidecar files named in it. Relative sidecar paths
    /// are resolved against the CRF file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let crf = CrfModel::load(path)?;
        let template = *crf.template();
        let Some(kind) = template.rep else {
            return Ok(Tagger { crf, reps: None });
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Option<String>, what: &str| -> Result<PathBuf> {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::InvalidModel(format!("CRF file names no {what} sidecar")))?;
            let p = Path::new(p);
            Ok(if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        };
        let hmm = HmmModel::load(resolve(&crf.sidecars.hmm, "HMM")?)?;
        let vocab = Vocabulary::load(resolve(&crf.sidecars.hmm_vocab, "HMM vocabulary")?)?;
        let types = if kind.needs_type_table() {
            Some(TypeRepTable::load(resolve(&crf.sidecars.typerep, "type table")?)?)
        } else {
            None
        };
        if hmm.n_classes() != template.n_classes {
            return Err(Error::InvalidModel(format!(
                "CRF expects {} HMM classes, sidecar has {}",
                template.n_classes,
                hmm.n_classes()
            )));
        }
        let mut source = RepresentationSource::new(hmm, vocab, types)?;
        source.log_features = template.log_features;
        source.lowercase = template.hmm_lowercase;
        Ok(Tagger { crf, reps: Some(source) })
    }

    pub fn representation(&self, forms: &[String]) -> Result<SequenceReps> {
        match (&self.reps, self.crf.template().rep) {
            (_, None) => Ok(SequenceReps::Baseline),
            (Some(src), kind) => src.represent(kind, forms),
            (None, Some(_)) => Err(Error::InvalidArgument("missing representation source".into())),
        }
    }

    pub fn tag(&self, forms: &[String]) -> Result<Vec<u32>> {
        let reps = self.representation(forms)?;
        self.crf.decode(forms, &reps)
    }

    pub fn evaluate(&self, test: &[LabeledSequence]) -> Result<EvalReport> {
        let predicted = test.iter().map(|s| self.tag(&s.forms)).collect::<Result<Vec<_>>>()?;
        evaluate_predictions(test, &predicted, self.crf.train_vocab(), self.crf.tagset().len())
    }
}

/// Evaluates a CRF on `test`, using `reps` to compute its representation.
pub fn evaluate(model: &CrfModel, reps: Option<&RepresentationSource>, test: &[LabeledSequence]) -> Result<EvalReport> {
    Tagger::new(model.clone(), reps.cloned())?.evaluate(test)
}

/// All corpora of one adaptation experiment, held in memory.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub tagset: Tagset,
    pub source_unlabeled: Vec<Vec<String>>,
    pub target_unlabeled: Vec<Vec<String>>,
    pub source_labeled: Vec<LabeledSequence>,
    /// Pool the learning curve draws its first `n` sentences from.
    pub target_labeled: Vec<LabeledSequence>,
    pub target_test: Vec<LabeledSequence>,
}

/// File locations of an experiment's corpora.
#[derive(Debug, Clone)]
pub struct ExperimentFiles {
    pub source_unlabeled: Vec<PathBuf>,
    pub target_unlabeled: Vec<PathBuf>,
    pub source_labeled: PathBuf,
    pub target_labeled: Option<PathBuf>,
    pub target_test: PathBuf,
    pub tagset: Option<PathBuf>,
    pub lowercase: bool,
}

impl ExperimentData {
    pub fn load(files: &ExperimentFiles) -> Result<Self> {
        let tagset = match &files.tagset {
            Some(p) => Tagset::load(p)?,
            None => Tagset::universal(),
        };
        let unlabeled = |paths: &[PathBuf]| -> Result<Vec<Vec<String>>> {
            let mut all = Vec::new();
            for p in paths {
                all.extend(read_unlabeled_file(p, files.lowercase)?);
            }
            Ok(all)
        };
        let labeled = |p: &Path, d: Domain| read_labeled_file(p, &tagset, d, files.lowercase);
        Ok(ExperimentData {
            source_unlabeled: unlabeled(&files.source_unlabeled)?,
            target_unlabeled: unlabeled(&files.target_unlabeled)?,
            source_labeled: labeled(&files.source_labeled, Domain::Source)?,
            target_labeled: match &files.target_labeled {
                Some(p) => labeled(p, Domain::Target)?,
                None => Vec::new(),
            },
            target_test: labeled(&files.target_test, Domain::Target)?,
            tagset,
        })
    }

    /// The unlabeled sentences an HMM sees in `mode`; `Both` is the plain
    /// concatenation, source first.
    pub fn unlabeled(&self, mode: CorpusMode) -> Vec<&[String]> {
        let source = self.source_unlabeled.iter().map(Vec::as_slice);
        let target = self.target_unlabeled.iter().map(Vec::as_slice);
        match mode {
            CorpusMode::Source => source.collect(),
            CorpusMode::Target => target.collect(),
            CorpusMode::Both => source.chain(target).collect(),
        }
    }
}

impl From<SyntheticDomains> for ExperimentData {
    fn from(d: SyntheticDomains) -> Self {
        ExperimentData {
            tagset: Tagset::universal(),
            source_unlabeled: d.source_unlabeled,
            target_unlabeled: d.target_unlabeled,
            source_labeled: d.source_labeled,
            target_labeled: d.target_labeled,
            target_test: d.target_test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub hmm: TrainConfig,
    /// Minimum count for a type to enter the HMM vocabulary.
    pub hmm_min_count: u64,
    /// Width for type-table posteriors; `None` is exact.
    pub typerep_k: Option<usize>,
    pub crf: TrainOptions,
    /// Viterbi-class window radius.
    pub window: usize,
    pub log_features: bool,
    pub modes: Vec<CorpusMode>,
    /// Representations of the table, `None` being the baseline.
    pub reps: Vec<Option<RepKind>>,
    pub target_counts: Vec<usize>,
    pub curve_mode: CorpusMode,
    pub curve_rep: RepKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hmm: TrainConfig {
                n_classes: 24,
                epochs: 4,
                minibatch: 32,
                shuffle: true,
                ..TrainConfig::default()
            },
            hmm_min_count: 2,
            typerep_k: None,
            crf: TrainOptions::default(),
            window: 0,
            log_features: false,
            modes: CorpusMode::ALL.to_vec(),
            reps: vec![
                None,
                Some(RepKind::Viterbi),
                Some(RepKind::PosteriorToken),
                Some(RepKind::PosteriorType),
                Some(RepKind::PosteriorBoth),
            ],
            target_counts: vec![0, 10, 30, 100, 300, 1000],
            curve_mode: CorpusMode::Target,
            curve_rep: RepKind::PosteriorBoth,
        }
    }
}

impl ExperimentConfig {
    fn template(&self, rep: Option<RepKind>) -> FeatureTemplate {
        match rep {
            None => FeatureTemplate::baseline(),
            Some(kind) => FeatureTemplate {
                window: self.window,
                log_features: self.log_features,
                ..FeatureTemplate::with_rep(kind, self.hmm.n_classes)
            },
        }
    }
}

/// HMM, its vocabulary and the type table for one corpus mode.
#[derive(Debug, Clone)]
pub struct HmmArtifacts {
    pub model: HmmModel,
    pub vocab: Vocabulary,
    pub types: TypeRepTable,
}

impl HmmArtifacts {
    pub fn source(&self, config: &ExperimentConfig) -> Result<RepresentationSource> {
        let mut src = RepresentationSource::new(self.model.clone(), self.vocab.clone(), Some(self.types.clone()))?;
        src.log_features = config.log_features;
        Ok(src)
    }
}

/// Trains the HMM on `mode`'s unlabeled data and averages its posteriors into
/// a type table over the same data.
pub fn build_hmm(data: &ExperimentData, mode: CorpusMode, config: &ExperimentConfig) -> Result<HmmArtifacts> {
    let sentences = data.unlabeled(mode);
    if sentences.is_empty() {
        return Err(Error::InvalidArgument(format!("no unlabeled data for mode {mode}")));
    }
    let vocab = Vocabulary::build(sentences.iter().map(|s| s.iter()), config.hmm_min_count)?;
    let coded = sentences.iter().map(|s| vocab.encode(s)).collect::<Result<Vec<_>>>()?;
    info!(
        "{mode}: training HMM (N = {}) on {} sentences, V = {}",
        config.hmm.n_classes,
        coded.len(),
        vocab.len()
    );
    let model = train_hmm(&coded, &vocab, &config.hmm)?.model;
    let k = config.typerep_k.unwrap_or(model.n_classes()).clamp(1, model.n_classes());
    let types = build_type_table(&model, &vocab, &coded, k)?;
    Ok(HmmArtifacts { model, vocab, types })
}

fn representations(
    source: Option<&RepresentationSource>,
    rep: Option<RepKind>,
    data: &[LabeledSequence],
) -> Result<Vec<SequenceReps>> {
    match (rep, source) {
        (None, _) => Ok(vec![SequenceReps::Baseline; data.len()]),
        (Some(_), Some(src)) => data.iter().map(|s| src.represent(rep, &s.forms)).collect(),
        (Some(_), None) => Err(Error::InvalidArgument("representation requested without an HMM".into())),
    }
}

/// Trains a CRF on `train` and evaluates it on `test`.
pub fn train_and_evaluate(
    train: &[LabeledSequence],
    test: &[LabeledSequence],
    tagset: &Tagset,
    source: Option<&RepresentationSource>,
    rep: Option<RepKind>,
    config: &ExperimentConfig,
) -> Result<(CrfModel, EvalReport)> {
    let reps = representations(source, rep, train)?;
    let fit = train_crf(train, &reps, config.template(rep), tagset, &config.crf)?;
    let report = evaluate(&fit.model, source.filter(|_| rep.is_some()), test)?;
    Ok((fit.model, report))
}

#[derive(Debug, Clone)]
pub struct Table1Cell {
    pub mode: CorpusMode,
    pub rep: Option<RepKind>,
    pub report: EvalReport,
}

/// Target-test results for every (corpus mode, representation) pair.
#[derive(Debug, Clone, Default)]
pub struct Table1 {
    pub cells: Vec<Table1Cell>,
}

impl Table1 {
    pub fn get(&self, mode: CorpusMode, rep: Option<RepKind>) -> Option<&EvalReport> {
        self.cells.iter().find(|c| c.mode == mode && c.rep == rep).map(|c| &c.report)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\trep\taccuracy\toov_accuracy\toov_rate\ttokens\n");
        for c in &self.cells {
            let r = &c.report;
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}",
                c.mode,
                rep_name(c.rep),
                r.token_accuracy,
                r.oov_accuracy,
                r.oov_rate,
                r.n_tokens
            );
        }
        out
    }

    /// Representations as rows, corpus modes as columns; each cell shows
    /// `accuracy (OOV accuracy)`.
    pub fn to_aligned(&self) -> String {
        let mut modes: Vec<CorpusMode> = Vec::new();
        let mut reps: Vec<Option<RepKind>> = Vec::new();
        for c in &self.cells {
            if !modes.contains(&c.mode) {
                modes.push(c.mode);
            }
            if !reps.contains(&c.rep) {
                reps.push(c.rep);
            }
        }
        aligned_table(&modes, &reps, |m, r| {
            self.get(m, r).map(|x| (x.token_accuracy, x.oov_accuracy))
        })
    }
}

fn aligned_table(
    modes: &[CorpusMode],
    reps: &[Option<RepKind>],
    cell: impl Fn(CorpusMode, Option<RepKind>) -> Option<(f64, f64)>,
) -> String {
    let width = 16;
    let mut out = format!("{:<16}", "");
    for m in modes {
        let _ = write!(out, "{:>width$}", m.name());
    }
    out.push('\n');
    for &r in reps {
        let _ = write!(out, "{:<16}", rep_name(r));
        for &m in modes {
            let text = cell(m, r).map_or("-".to_string(), |(a, o)| format!("{a:.1} ({o:.1})"));
            let _ = write!(out, "{text:>width$}");
        }
        out.push('\n');
    }
    out
}

/// Median over runs of each cell's accuracy and OOV accuracy.
#[derive(Debug, Clone)]
pub struct MedianTable {
    pub runs: usize,
    pub cells: Vec<(CorpusMode, Option<RepKind>, f64, f64)>,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl MedianTable {
    pub fn from_runs(tables: &[Table1]) -> Self {
        let mut cells = Vec::new();
        if let Some(first) = tables.first() {
            for c in &first.cells {
                let mut acc: Vec<f64> = tables
                    .iter()
                    .filter_map(|t| t.get(c.mode, c.rep))
                    .map(|r| r.token_accuracy)
                    .collect();
                let mut oov: Vec<f64> = tables
                    .iter()
                    .filter_map(|t| t.get(c.mode, c.rep))
                    .map(|r| r.oov_accuracy)
                    .collect();
                cells.push((c.mode, c.rep, median(&mut acc), median(&mut oov)));
            }
        }
        MedianTable { runs: tables.len(), cells }
    }

    pub fn accuracy(&self, mode: CorpusMode, rep: Option<RepKind>) -> Option<f64> {
        self.cells.iter().find(|c| c.0 == mode && c.1 == rep).map(|c| c.2)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("mode\trep\tmedian_accuracy\tmedian_oov_accuracy\n");
        for (m, r, a, o) in &self.cells {
            let _ = writeln!(out, "{m}\t{}\t{a:.4}\t{o:.4}", rep_name(*r));
        }
        out
    }

    pub fn to_aligned(&self) -> String {
        let mut modes = Vec::new();
        let mut reps = Vec::new();
        for (m, r, _, _) in &self.cells {
            if !modes.contains(m) {
                modes.push(*m);
            }
            if !reps.contains(r) {
                reps.push(*r);
            }
        }
        aligned_table(&modes, &reps, |m, r| {
            self.cells.iter().find(|c| c.0 == m && c.1 == r).map(|c| (c.2, c.3))
        })
    }
}

/// Trains CRFs on source labeled data only and evaluates on the target test
/// set, for every configured corpus mode and representation. The baseline
/// consumes no HMM, so it is trained once and reported under every mode.
pub fn run_table1(data: &ExperimentData, config: &ExperimentConfig) -> Result<Table1> {
    if data.source_labeled.is_empty() || data.target_test.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut table = Table1::default();
    let baseline = if config.reps.contains(&None) {
        let cell = train_and_evaluate(&data.source_labeled, &data.target_test, &data.tagset, None, None, config)
            .map_err(|e| cell_error("baseline", e))?;
        Some(cell.1)
    } else {
        None
    };
    for &mode in &config.modes {
        let needs_hmm = config.reps.iter().any(Option::is_some);
        let artifacts = if needs_hmm {
            Some(build_hmm(data, mode, config).map_err(|e| cell_error(&format!("{mode} HMM"), e))?)
        } else {
            None
        };
        let source = artifacts.as_ref().map(|a| a.source(config)).transpose()?;
        for &rep in &config.reps {
            let report = match rep {
                None => baseline.clone().expect("baseline was trained"),
                Some(_) => {
                    train_and_evaluate(&data.source_labeled, &data.target_test, &data.tagset, source.as_ref(), rep, config)
                        .map_err(|e| cell_error(&format!("{mode}/{}", rep_name(rep)), e))?
                        .1
                }
            };
            info!(
                "{mode}/{}: accuracy {:.2}, OOV accuracy {:.2}",
                rep_name(rep),
                report.token_accuracy,
                report.oov_accuracy
            );
            table.cells.push(Table1Cell { mode, rep, report });
        }
    }
    Ok(table)
}

fn cell_error(cell: &str, e: Error) -> Error {
    Error::InvalidArgument(format!("cell {cell} failed: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurveCondition {
    /// CRF trained on the first `n` target sentences only.
    TargetOnly,
    /// CRF trained on all source sentences plus the first `n` target ones.
    SourceTarget,
}

impl CurveCondition {
    pub fn name(self) -> &'static str {
        match self {
            CurveCondition::TargetOnly => "target-only",
            CurveCondition::SourceTarget => "source+target",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurvePoint {
    pub count: usize,
    pub condition: CurveCondition,
    pub rep: Option<RepKind>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct LearningCurve {
    pub mode: CorpusMode,
    pub window: usize,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn get(&self, count: usize, condition: CurveCondition, rep: Option<RepKind>) -> Option<&EvalReport> {
        self.points
            .iter()
            .find(|p| p.count == count && p.condition == condition && p.rep == rep)
            .map(|p| &p.report)
    }

    /// Plot-ready rows: count, condition, representation, accuracies.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# hmm corpus {}, viterbi window {}\n", self.mode, self.window);
        out.push_str("count\tcondition\trep\taccuracy\toov_accuracy\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{:.4}",
                p.count,
                p.condition.name(),
                rep_name(p.rep),
                p.report.token_accuracy,
                p.report.oov_accuracy
            );
        }
        out
    }
}

/// For each count `n`, trains CRFs on the first `n` target labeled sentences
/// (alone and added to the source set), with and without the configured
/// representation, and evaluates on the target test set. The target-only
/// condition has no training data at `n = 0` and is skipped there.
pub fn run_learning_curve(data: &ExperimentData, config: &ExperimentConfig) -> Result<LearningCurve> {
    let counts = &config.target_counts;
    if counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("target counts must be strictly increasing".into()));
    }
    if let Some(&max) = counts.last() {
        if max > data.target_labeled.len() {
            return Err(Error::InvalidArgument(format!(
                "count {max} exceeds the {} available target sentences",
                data.target_labeled.len()
            )));
        }
    }
    let artifacts = build_hmm(data, config.curve_mode, config)?;
    let source = artifacts.source(config)?;
    let mut points = Vec::new();
    for &n in counts {
        let target = &data.target_labeled[..n];
        for condition in [CurveCondition::TargetOnly, CurveCondition::SourceTarget] {
            let train: Vec<LabeledSequence> = match condition {
                CurveCondition::TargetOnly if n == 0 => continue,
                CurveCondition::TargetOnly => target.to_vec(),
                CurveCondition::SourceTarget => data.source_labeled.iter().chain(target).cloned().collect(),
            };
            for rep in [Some(config.curve_rep), None] {
                let (_, report) =
                    train_and_evaluate(&train, &data.target_test, &data.tagset, Some(&source), rep, config)
                        .map_err(|e| cell_error(&format!("n = {n}, {}", condition.name()), e))?;
                info!(
                    "n = {n}, {}, {}: accuracy {:.2}",
                    condition.name(),
                    rep_name(rep),
                    report.token_accuracy
                );
                points.push(CurvePoint {
                    count: n,
                    condition,
                    rep,
                    report,
                });
            }
        }
    }
    Ok(LearningCurve {
        mode: config.curve_mode,
        window: config.window,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(forms: &[&str], tags: &[u32]) -> LabeledSequence {
        LabeledSequence::new(forms.iter().map(|s| s.to_string()).collect(), tags.to_vec(), Domain::Target).unwrap()
    }

    #[test]
    fn hand_counted_report() {
        // 10 tokens; c, d, e, f are unseen in training. 7 correct overall,
        // 2 of the 4 unseen ones.
        let vocab = Vocabulary::build([vec!["a", "b"]], 1).unwrap();
        let gold = vec![
            seq(&["a", "c", "b", "d", "a"], &[0, 1, 2, 0, 1]),
            seq(&["e", "a", "b", "f", "b"], &[2, 2, 0, 1, 0]),
        ];
        let predicted = vec![vec![0, 1, 2, 1, 1], vec![0, 2, 0, 1, 2]];
        let r = evaluate_predictions(&gold, &predicted, &vocab, 3).unwrap();
        assert_eq!((r.n_tokens, r.n_oov, r.n_correct, r.n_oov_correct), (10, 4, 7, 2));
        assert!((r.token_accuracy - 70.0).abs() < 1e-12);
        assert!((r.oov_accuracy - 50.0).abs() < 1e-12);
        assert!((r.oov_rate - 40.0).abs() < 1e-12);
        for g in 0..3u32 {
            let row: u64 = (0..3).map(|p| r.confusion(g, p)).sum();
            let gold_count = gold.iter().flat_map(|s| &s.tags).filter(|&&t| t == g).count() as u64;
            assert_eq!(row, gold_count);
        }
    }

    #[test]
    fn perfect_and_hopeless_predictions() {
        let vocab = Vocabulary::build([vec!["a"]], 1).unwrap();
        let gold = vec![seq(&["a", "z"], &[1, 0])];
        let r = evaluate_predictions(&gold, &[vec![1, 0]], &vocab, 2).unwrap();
        assert_eq!((r.token_accuracy, r.oov_accuracy), (100.0, 100.0));
        let r = evaluate_predictions(&gold, &[vec![0, 1]], &vocab, 2).unwrap();
        assert_eq!((r.token_accuracy, r.oov_accuracy), (0.0, 0.0));
        assert!(evaluate_predictions(&gold, &[vec![0]], &vocab, 2).is_err());
        assert!(evaluate_predictions(&[], &[], &vocab, 2).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn names_parse_back() {
        for m in CorpusMode::ALL {
            assert_eq!(m.name().parse::<CorpusMode>().unwrap(), m);
        }
        assert_eq!(parse_rep("baseline").unwrap(), None);
        assert_eq!(parse_rep("posterior-both").unwrap(), Some(RepKind::PosteriorBoth));
    }
}
