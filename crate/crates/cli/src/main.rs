//! Command-line front end: HMM training, type tables, CRF training, tagging,
//! evaluation and the two adaptation experiments.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use seqrep::corpus::{read_labeled_file, read_unlabeled_file, write_labeled, Domain, LabeledSequence, Tagset, Vocabulary};
use seqrep::crf::{train_crf, FeatureTemplate, TrainOptions};
use seqrep::hmm::HmmModel;
use seqrep::pipeline::{
    make_synthetic_domains, parse_rep, run_learning_curve, run_table1, CorpusMode, ExperimentConfig,
    ExperimentData, ExperimentFiles, MedianTable, SyntheticConfig, Tagger, Table1,
};
use seqrep::representations::{build_type_table, RepresentationSource, SequenceReps, TypeRepTable};
use seqrep::train::{train_hmm, EncodedFiles, TrainConfig};

#[derive(Parser)]
#[command(name = "seqrep", version, about = "HMM word representations for cross-domain tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an HMM with online EM on one or more text corpora.
    TrainHmm(TrainHmmArgs),
    /// Average token posteriors into a per-type table.
    BuildTyperep(BuildTyperepArgs),
    /// Train a CRF tagger on labeled data.
    TrainCrf(TrainCrfArgs),
    /// Tag one-sentence-per-line text.
    Tag(TagArgs),
    /// Score a tagger on a labeled test set.
    Eval(EvalArgs),
    /// Run the corpus-mixing table over every representation.
    Table1(Table1Args),
    /// Accuracy as target labeled sentences are added.
    LearningCurve(LearningCurveArgs),
    /// Write the synthetic two-domain benchmark.
    SynthGen(SynthGenArgs),
}

#[derive(Args)]
struct TrainHmmArgs {
    /// Text corpus, one sentence per line; repeat to concatenate corpora.
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = 128)]
    classes: usize,
    /// Classes kept per message; defaults to min(N, ceil(3 log2 N)).
    #[arg(long, conflicts_with = "exact")]
    k: Option<usize>,
    /// Exact inference (k = N).
    #[arg(long)]
    exact: bool,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    t0: f64,
    #[arg(long, default_value_t = 128)]
    minibatch: usize,
    #[arg(long, default_value_t = 8)]
    burn_in: u64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    smoothing: f64,
    /// Reshuffle sentences every epoch (loads the corpus in memory).
    #[arg(long)]
    shuffle: bool,
    /// Types seen fewer times map to <unk>.
    #[arg(long, default_value_t = 2)]
    min_count: u64,
    #[arg(long)]
    lowercase: bool,
    /// Model path; the vocabulary is written next to it as `<out>.vocab`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildTyperepArgs {
    #[arg(long)]
    hmm: PathBuf,
    /// Defaults to `<hmm>.vocab`.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long = "corpus", required = true)]
    corpora: Vec<PathBuf>,
    /// k-best width; exact when omitted.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCrfArgs {
    /// Labeled training file (token<TAB>tag); repeat to concatenate.
    #[arg(long = "train", required = true)]
    train: Vec<PathBuf>,
    /// baseline, viterbi, posterior-token, posterior-type or posterior-both.
    #[arg(long, default_value = "baseline")]
    rep: String,
    #[arg(long)]
    hmm: Option<PathBuf>,
    /// Defaults to `<hmm>.vocab`.
    #[arg(long)]
    hmm_vocab: Option<PathBuf>,
    #[arg(long)]
    typerep: Option<PathBuf>,
    /// Viterbi-class window radius.
    #[arg(long, default_value_t = 0)]
    window: usize,
    /// Use log posteriors as dense features.
    #[arg(long)]
    log_features: bool,
    /// Lowercase forms before HMM lookup.
    #[arg(long)]
    hmm_lowercase: bool,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// One tag per line; the universal tags by default.
    #[arg(long)]
    tagset: Option<PathBuf>,
    #[arg(long)]
    lowercase: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TagArgs {
    #[arg(long)]
    model: PathBuf,
    /// One sentence per line; stdin when omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Tagged output (token<TAB>tag); stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    lowercase: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    lowercase: bool,
    /// Also print the confusion table.
    #[arg(long)]
    confusion: bool,
}

#[derive(Args)]
struct DataArgs {
    /// Use the built-in synthetic benchmark instead of files.
    #[arg(long, conflicts_with_all = ["source_unlabeled", "target_unlabeled", "source_train", "target_test"])]
    synthetic: bool,
    #[arg(long)]
    source_unlabeled: Vec<PathBuf>,
    #[arg(long)]
    target_unlabeled: Vec<PathBuf>,
    #[arg(long)]
    source_train: Option<PathBuf>,
    #[arg(long)]
    target_train: Option<PathBuf>,
    #[arg(long)]
    target_test: Option<PathBuf>,
    #[arg(long)]
    tagset: Option<PathBuf>,
    #[arg(long)]
    lowercase: bool,
}

impl DataArgs {
    /// Corpora for run `index`: a fresh synthetic benchmark per seed, or the
    /// same files every time.
    fn load(&self, seed: u64) -> Result<ExperimentData> {
        if self.synthetic {
            return Ok(make_synthetic_domains(&SyntheticConfig {
                seed,
                ..SyntheticConfig::default()
            })
            .into());
        }
        let (Some(source_labeled), Some(target_test)) = (&self.source_train, &self.target_test) else {
            bail!("give --synthetic or at least --source-train and --target-test");
        };
        let files = ExperimentFiles {
            source_unlabeled: self.source_unlabeled.clone(),
            target_unlabeled: self.target_unlabeled.clone(),
            source_labeled: source_labeled.clone(),
            target_labeled: self.target_train.clone(),
            target_test: target_test.clone(),
            tagset: self.tagset.clone(),
            lowercase: self.lowercase,
        };
        Ok(ExperimentData::load(&files)?)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 24)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    minibatch: usize,
    /// HMM seed of the first run.
    #[arg(long, default_value_t = 0)]
    hmm_seed: u64,
    #[arg(long, default_value_t = 2)]
    min_count: u64,
    /// k-best width for the type tables; exact when omitted.
    #[arg(long)]
    typerep_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    window: usize,
    #[arg(long)]
    log_features: bool,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
}

impl ModelArgs {
    fn config(&self) -> ExperimentConfig {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            hmm: TrainConfig {
                n_classes: self.classes,
                epochs: self.epochs,
                minibatch: self.minibatch,
                seed: self.hmm_seed,
                ..base.hmm.clone()
            },
            hmm_min_count: self.min_count,
            typerep_k: self.typerep_k,
            crf: TrainOptions {
                l2: self.l2,
                max_iters: self.max_iters,
                ..base.crf
            },
            window: self.window,
            log_features: self.log_features,
            ..base
        }
    }
}

#[derive(Args)]
struct Table1Args {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of runs. Synthetic runs use benchmark seeds 0..seeds; file runs
    /// vary the HMM seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Directory for per-run and median TSV files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct LearningCurveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Benchmark seed for --synthetic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated, strictly increasing target sentence counts.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 10, 30, 100, 300, 1000])]
    counts: Vec<usize>,
    /// Unlabeled data of the HMM: source, both or target.
    #[arg(long, default_value = "target")]
    mode: String,
    #[arg(long, default_value = "posterior-both")]
    rep: String,
    /// TSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    source_unlabeled: Option<usize>,
    #[arg(long)]
    target_unlabeled: Option<usize>,
    #[arg(long)]
    source_labeled: Option<usize>,
    #[arg(long)]
    target_labeled: Option<usize>,
    #[arg(long)]
    target_test: Option<usize>,
}

fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn load_tagset(path: Option<&Path>) -> Result<Tagset> {
    Ok(match path {
        Some(p) => Tagset::load(p).with_context(|| format!("reading tagset {}", p.display()))?,
        None => Tagset::universal(),
    })
}

fn train_hmm_cmd(a: TrainHmmArgs) -> Result<()> {
    let mut sentences = Vec::new();
    for p in &a.corpora {
        sentences.extend(read_unlabeled_file(p, a.lowercase).with_context(|| format!("reading {}", p.display()))?);
    }
    let vocab = Vocabulary::build(sentences.iter().map(|s| s.iter()), a.min_count)?;
    drop(sentences);
    let config = TrainConfig {
        n_classes: a.classes,
        k: if a.exact { Some(a.classes) } else { a.k },
        alpha: a.alpha,
        t0: a.t0,
        minibatch: a.minibatch,
        burn_in: a.burn_in,
        epochs: a.epochs,
        seed: a.seed,
        smoothing: a.smoothing,
        shuffle: a.shuffle,
        ..TrainConfig::default()
    };
    info!("vocabulary: {} types (min count {})", vocab.len(), a.min_count);
    let corpus = EncodedFiles {
        paths: a.corpora.clone(),
        vocab: &vocab,
        lowercase: a.lowercase,
    };
    let report = train_hmm(&corpus, &vocab, &config)?;
    for p in &report.progress {
        info!("{} sequences: mean log-likelihood {:.4}", p.sequences_seen, p.avg_log_likelihood);
    }
    report.model.save(&a.out)?;
    vocab.save(sidecar_path(&a.out, ".vocab"))?;
    eprintln!("wrote {} ({} updates)", a.out.display(), report.updates);
    Ok(())
}

fn build_typerep_cmd(a: BuildTyperepArgs) -> Result<()> {
    let model = HmmModel::load(&a.hmm)?;
    let vocab = Vocabulary::load(a.vocab.clone().unwrap_or_else(|| sidecar_path(&a.hmm, ".vocab")))?;
    let corpus = EncodedFiles {
        paths: a.corpora.clone(),
        vocab: &vocab,
        lowercase: a.lowercase,
    };
    let k = a.k.unwrap_or(model.n_classes());
    let table = build_type_table(&model, &vocab, &corpus, k)?;
    table.save(&a.out)?;
    eprintln!("wrote {} ({} types)", a.out.display(), table.len());
    Ok(())
}

/// How the CRF file names a sidecar: relative to the CRF's directory when
/// the sidecar lies under it, absolute otherwise.
fn sidecar_reference(sidecar: &Path, crf_out: &Path) -> Result<String> {
    let sidecar = fs::canonicalize(sidecar).with_context(|| format!("resolving {}", sidecar.display()))?;
    let dir = crf_out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let dir = fs::canonicalize(dir)?;
    let reference = sidecar.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(sidecar);
    Ok(reference.to_string_lossy().into_owned())
}

fn train_crf_cmd(a: TrainCrfArgs) -> Result<()> {
    let tagset = load_tagset(a.tagset.as_deref())?;
    let mut data: Vec<LabeledSequence> = Vec::new();
    for p in &a.train {
        data.extend(
            read_labeled_file(p, &tagset, Domain::Source, a.lowercase).with_context(|| format!("reading {}", p.display()))?,
        );
    }
    let rep = parse_rep(&a.rep)?;
    let options = TrainOptions {
        l2: a.l2,
        max_iters: a.max_iters,
        tol: a.tol,
    };
    let Some(kind) = rep else {
        let fit = train_crf(&data, &vec![SequenceReps::Baseline; data.len()], FeatureTemplate::baseline(), &tagset, &options)?;
        fit.model.save(&a.out)?;
        eprintln!("wrote {} (objective {:.4}, {} iterations)", a.out.display(), fit.objective, fit.iterations);
        return Ok(());
    };
    let hmm_path = a.hmm.clone().context("--hmm is required for a representation")?;
    let vocab_path = a.hmm_vocab.clone().unwrap_or_else(|| sidecar_path(&hmm_path, ".vocab"));
    let model = HmmModel::load(&hmm_path)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let types = if kind.needs_type_table() {
        let p = a.typerep.as_ref().context("--typerep is required for type representations")?;
        Some(TypeRepTable::load(p)?)
    } else {
        None
    };
    let template = FeatureTemplate {
        window: a.window,
        log_features: a.log_features,
        hmm_lowercase: a.hmm_lowercase,
        ..FeatureTemplate::with_rep(kind, model.n_classes())
    };
    let mut source = RepresentationSource::new(model, vocab, types)?;
    source.log_features = a.log_features;
    source.lowercase = a.hmm_lowercase;
    let reps = data
        .iter()
        .map(|s| source.represent(rep, &s.forms))
        .collect::<seqrep::Result<Vec<_>>>()?;
    let mut fit = train_crf(&data, &reps, template, &tagset, &options)?;
    fit.model.sidecars.hmm = Some(sidecar_reference(&hmm_path, &a.out)?);
    fit.model.sidecars.hmm_vocab = Some(sidecar_reference(&vocab_path, &a.out)?);
    if let (true, Some(p)) = (kind.needs_type_table(), &a.typerep) {
        fit.model.sidecars.typerep = Some(sidecar_reference(p, &a.out)?);
    }
    fit.model.save(&a.out)?;
    eprintln!("wrote {} (objective {:.4}, {} iterations)", a.out.display(), fit.objective, fit.iterations);
    Ok(())
}

fn tag_cmd(a: TagArgs) -> Result<()> {
    let tagger = Tagger::load(&a.model)?;
    let sentences = match &a.input {
        Some(p) => read_unlabeled_file(p, a.lowercase)?,
        None => seqrep::corpus::UnlabeledReader::new(io::stdin().lock(), a.lowercase).collect::<seqrep::Result<_>>()?,
    };
    let tagged = sentences
        .into_iter()
        .map(|forms| {
            let tags = tagger.tag(&forms)?;
            LabeledSequence::new(forms, tags, Domain::Target)
        })
        .collect::<seqrep::Result<Vec<_>>>()?;
    let tagset = tagger.crf.tagset();
    match &a.output {
        Some(p) => write_labeled(create(p)?, tagset, &tagged)?,
        None => write_labeled(BufWriter::new(io::stdout().lock()), tagset, &tagged)?,
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let tagger = Tagger::load(&a.model)?;
    let test = read_labeled_file(&a.test, tagger.crf.tagset(), Domain::Target, a.lowercase)?;
    let r = tagger.evaluate(&test)?;
    println!("accuracy\t{:.2}", r.token_accuracy);
    println!("oov_accuracy\t{:.2}", r.oov_accuracy);
    println!("oov_rate\t{:.2}", r.oov_rate);
    println!("tokens\t{}", r.n_tokens);
    println!("oov_tokens\t{}", r.n_oov);
    if a.confusion {
        let tags = tagger.crf.tagset().tags();
        println!("\ngold\\predicted\t{}", tags.join("\t"));
        for (g, name) in tags.iter().enumerate() {
            let row: Vec<String> = (0..tags.len()).map(|p| r.confusion(g as u32, p as u32).to_string()).collect();
            println!("{name}\t{}", row.join("\t"));
        }
    }
    Ok(())
}

fn table1_cmd(a: Table1Args) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut runs: Vec<Table1> = Vec::new();
    for run in 0..a.seeds {
        let data = a.data.load(run)?;
        let mut config = a.model.config();
        if !a.data.synthetic {
            config.hmm.seed = a.model.hmm_seed + run;
        }
        let table = run_table1(&data, &config).with_context(|| format!("run {run}"))?;
        if let Some(dir) = &a.out_dir {
            fs::write(dir.join(format!("table1.run{run}.tsv")), table.to_tsv())?;
        }
        if a.seeds == 1 {
            print!("{}", table.to_tsv());
            println!();
            print!("{}", table.to_aligned());
        }
        runs.push(table);
    }
    if a.seeds > 1 {
        let medians = MedianTable::from_runs(&runs);
        if let Some(dir) = &a.out_dir {
            fs::write(dir.join("table1.median.tsv"), medians.to_tsv())?;
        }
        print!("{}", medians.to_tsv());
        println!();
        print!("{}", medians.to_aligned());
    }
    Ok(())
}

fn learning_curve_cmd(a: LearningCurveArgs) -> Result<()> {
    let data = a.data.load(a.seed)?;
    let Some(rep) = parse_rep(&a.rep)? else {
        bail!("the learning curve compares a representation against the baseline; pick one");
    };
    let config = ExperimentConfig {
        target_counts: a.counts.clone(),
        curve_mode: a.mode.parse::<CorpusMode>()?,
        curve_rep: rep,
        ..a.model.config()
    };
    let curve = run_learning_curve(&data, &config)?;
    match &a.out {
        Some(p) => fs::write(p, curve.to_tsv())?,
        None => print!("{}", curve.to_tsv()),
    }
    Ok(())
}

fn synth_gen_cmd(a: SynthGenArgs) -> Result<()> {
    let d = SyntheticConfig::default();
    let config = SyntheticConfig {
        seed: a.seed,
        source_unlabeled: a.source_unlabeled.unwrap_or(d.source_unlabeled),
        target_unlabeled: a.target_unlabeled.unwrap_or(d.target_unlabeled),
        source_labeled: a.source_labeled.unwrap_or(d.source_labeled),
        target_labeled: a.target_labeled.unwrap_or(d.target_labeled),
        target_test: a.target_test.unwrap_or(d.target_test),
        ..d
    };
    make_synthetic_domains(&config).write_dir(&a.out)?;
    eprintln!("wrote benchmark seed {} to {}", a.seed, a.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::TrainHmm(a) => train_hmm_cmd(a),
        Command::BuildTyperep(a) => build_typerep_cmd(a),
        Command::TrainCrf(a) => train_crf_cmd(a),
        Command::Tag(a) => tag_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Table1(a) => table1_cmd(a),
        Command::LearningCurve(a) => learning_curve_cmd(a),
        Command::SynthGen(a) => synth_gen_cmd(a),
    }?;
    io::stdout().flush()?;
    Ok(())
}
