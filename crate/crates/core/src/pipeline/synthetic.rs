//! A two-domain benchmark sampled from known 12-class HMMs whose classes are
//! the universal tags. The domains share the sparse transition structure
//! (each jitters its own weights) and the closed-class words. Open classes
//! put most of their private mass on words typical of that domain and a
//! little on words typical of the other one, so a large share of target
//! tokens is unseen in source labeled data while every word still turns up,
//! rarely, in both unlabeled corpora.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_labeled, write_unlabeled, Domain, LabeledSequence, Tagset, UNIVERSAL_TAGS};
use crate::error::Result;

const N_TAGS: usize = 12;
const ADJ: usize = 0;
const ADP: usize = 1;
const ADV: usize = 2;
const CONJ: usize = 3;
const DET: usize = 4;
const NOUN: usize = 5;
const NUM: usize = 6;
const PRON: usize = 7;
const PRT: usize = 8;
const VERB: usize = 9;
const PUNCT: usize = 10;
const X: usize = 11;

const INITIAL: [(usize, f64); 10] = [
    (DET, 0.25),
    (PRON, 0.2),
    (NOUN, 0.15),
    (ADP, 0.1),
    (ADV, 0.08),
    (ADJ, 0.05),
    (VERB, 0.05),
    (CONJ, 0.04),
    (NUM, 0.04),
    (X, 0.04),
];

/// Sparse base transition rows; every other cell gets a small floor.
fn base_transitions() -> [Vec<(usize, f64)>; N_TAGS] {
    [
        vec![(NOUN, 0.6), (ADJ, 0.1), (PUNCT, 0.08), (CONJ, 0.07), (ADP, 0.08), (PRT, 0.03), (VERB, 0.02), (X, 0.02)],
        vec![(DET, 0.45), (NOUN, 0.2), (ADJ, 0.1), (NUM, 0.08), (PRON, 0.1), (X, 0.03), (ADV, 0.02), (VERB, 0.02)],
        vec![(VERB, 0.35), (ADJ, 0.2), (ADV, 0.1), (ADP, 0.1), (PUNCT, 0.1), (DET, 0.08), (PRON, 0.05), (NOUN, 0.02)],
        vec![(DET, 0.2), (NOUN, 0.2), (VERB, 0.2), (ADJ, 0.1), (PRON, 0.15), (ADV, 0.08), (NUM, 0.04), (ADP, 0.03)],
        vec![(NOUN, 0.6), (ADJ, 0.3), (NUM, 0.05), (ADV, 0.03), (X, 0.02)],
        vec![
            (ADP, 0.25),
            (VERB, 0.22),
            (PUNCT, 0.18),
            (NOUN, 0.12),
            (CONJ, 0.08),
            (PRT, 0.05),
            (ADV, 0.04),
            (DET, 0.03),
            (PRON, 0.02),
            (X, 0.01),
        ],
        vec![(NOUN, 0.6), (PUNCT, 0.1), (ADP, 0.1), (NUM, 0.1), (ADJ, 0.05), (X, 0.05)],
        vec![(VERB, 0.7), (ADV, 0.1), (ADP, 0.05), (PUNCT, 0.05), (NOUN, 0.05), (PRT, 0.05)],
        vec![(VERB, 0.7), (DET, 0.1), (NOUN, 0.1), (ADV, 0.05), (ADJ, 0.05)],
        vec![
            (DET, 0.25),
            (ADP, 0.15),
            (PRT, 0.1),
            (ADV, 0.1),
            (NOUN, 0.12),
            (ADJ, 0.08),
            (PRON, 0.08),
            (PUNCT, 0.08),
            (VERB, 0.04),
        ],
        vec![(DET, 0.2), (PRON, 0.2), (NOUN, 0.15), (CONJ, 0.1), (ADV, 0.1), (ADP, 0.1), (VERB, 0.1), (X, 0.05)],
        vec![(X, 0.3), (PUNCT, 0.2), (NOUN, 0.2), (VERB, 0.1), (ADP, 0.1), (DET, 0.1)],
    ]
}

/// Target-domain reweighting of base transitions `(from, to, factor)`: more
/// noun compounds, fewer noun-verb transitions.
const TARGET_SHIFTS: [(usize, usize, f64); 7] = [
    (NOUN, NOUN, 2.5),
    (NOUN, VERB, 0.5),
    (NOUN, ADP, 1.3),
    (VERB, NOUN, 2.0),
    (VERB, DET, 0.6),
    (ADJ, ADJ, 2.0),
    (DET, ADJ, 1.4),
];

/// Sizes of closed-class word lists, shared by both domains.
const CLOSED: [(usize, usize); 6] = [(ADP, 15), (CONJ, 5), (DET, 8), (PRON, 12), (PRT, 6), (PUNCT, 4)];

/// `(tag, shared, source-only, target-only)` word counts of open classes.
const OPEN: [(usize, usize, usize, usize); 6] = [
    (NOUN, 200, 300, 300),
    (VERB, 120, 150, 150),
    (ADJ, 80, 120, 120),
    (ADV, 30, 40, 40),
    (NUM, 15, 40, 40),
    (X, 10, 30, 30),
];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub source_unlabeled: usize,
    pub target_unlabeled: usize,
    pub source_labeled: usize,
    pub target_labeled: usize,
    pub target_test: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Share of open-class mass on source-only words in the source domain.
    pub source_private_mass: f64,
    /// Share of open-class mass on target-only words in the target domain.
    pub target_private_mass: f64,
    /// Share of source open-class mass on target-only words.
    pub source_leak_mass: f64,
    /// Share of target open-class mass on source-only words.
    pub target_leak_mass: f64,
    /// Words emitted by both NOUN and VERB.
    pub noun_verb_ambiguous: usize,
    /// Words emitted by both ADJ and NOUN.
    pub adj_noun_ambiguous: usize,
    /// Domain-specific words emitted by both NOUN and VERB, per domain.
    pub private_ambiguous: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            source_unlabeled: 30000,
            target_unlabeled: 10000,
            source_labeled: 500,
            target_labeled: 1000,
            target_test: 500,
            min_len: 6,
            max_len: 20,
            source_private_mass: 0.4,
            target_private_mass: 0.7,
            source_leak_mass: 0.01,
            target_leak_mass: 0.2,
            noun_verb_ambiguous: 60,
            adj_noun_ambiguous: 30,
            private_ambiguous: 40,
        }
    }
}

/// Corpora of the benchmark. Gold tags are the generating classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDomains {
    pub source_unlabeled: Vec<Vec<String>>,
    pub target_unlabeled: Vec<Vec<String>>,
    pub source_labeled: Vec<LabeledSequence>,
    pub target_labeled: Vec<LabeledSequence>,
    pub target_test: Vec<LabeledSequence>,
}

impl SyntheticDomains {
    /// Writes the five corpora under `dir` in the standard file formats.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let tagset = Tagset::universal();
        write_unlabeled(BufWriter::new(File::create(dir.join("source.unlabeled.txt"))?), &self.source_unlabeled)?;
        write_unlabeled(BufWriter::new(File::create(dir.join("target.unlabeled.txt"))?), &self.target_unlabeled)?;
        for (name, data) in [
            ("source.train.conll", &self.source_labeled),
            ("target.train.conll", &self.target_labeled),
            ("target.test.conll", &self.target_test),
        ] {
            write_labeled(BufWriter::new(File::create(dir.join(name))?), &tagset, data)?;
        }
        Ok(())
    }
}

/// Emission distribution of one tag in one domain: word indices and weights.
struct Emission {
    words: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Emission {
    fn new(parts: &[(&[usize], f64)]) -> Self {
        let mut words = Vec::new();
        let mut weights = Vec::new();
        for &(list, mass) in parts {
            if list.is_empty() || mass <= 0.0 {
                continue;
            }
            let z: f64 = (0..list.len()).map(zipf).sum();
            for (rank, &w) in list.iter().enumerate() {
                words.push(w);
                weights.push(mass * zipf(rank) / z);
            }
        }
        Emission {
            words,
            cumulative: cumulative(&weights),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        self.words[draw(&self.cumulative, rng)]
    }
}

fn zipf(rank: usize) -> f64 {
    1.0 / (rank as f64 + 2.0)
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw(cumulative: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

struct Generator {
    initial: Vec<f64>,
    transitions: [Vec<Vec<f64>>; 2],
    emissions: [Vec<Emission>; 2],
    forms: Vec<String>,
}

impl Generator {
    fn new(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let jitter = |rng: &mut ChaCha8Rng, p: f64| p * rng.random_range(0.7..1.3);
        let mut initial = vec![0.002; N_TAGS];
        for (t, p) in INITIAL {
            initial[t] = jitter(rng, p);
        }
        let base = base_transitions();
        let transitions = [0, 1].map(|d| {
            base.iter()
                .enumerate()
                .map(|(from, row)| {
                    let mut dense = vec![0.002; N_TAGS];
                    for &(to, p) in row {
                        let factor = TARGET_SHIFTS
                            .iter()
                            .find(|s| d == 1 && s.0 == from && s.1 == to)
                            .map_or(1.0, |s| s.2);
                        dense[to] = jitter(rng, p * factor);
                    }
                    cumulative(&dense)
                })
                .collect()
        });

        let mut next_word = 0usize;
        let mut fresh = |n: usize| -> Vec<usize> {
            let ids = (next_word..next_word + n).collect();
            next_word += n;
            ids
        };
        let noun_verb = fresh(config.noun_verb_ambiguous);
        let adj_noun = fresh(config.adj_noun_ambiguous);
        let adp_prt = fresh(2);
        let private_amb = [fresh(config.private_ambiguous), fresh(config.private_ambiguous)];
        let mut shared: Vec<Vec<usize>> = vec![Vec::new(); N_TAGS];
        let mut private: [Vec<Vec<usize>>; 2] = [vec![Vec::new(); N_TAGS], vec![Vec::new(); N_TAGS]];
        for (tag, n) in CLOSED {
            shared[tag] = fresh(n);
        }
        for (tag, n_shared, n_source, n_target) in OPEN {
            shared[tag] = fresh(n_shared);
            private[0][tag] = fresh(n_source);
            private[1][tag] = fresh(n_target);
        }
        // Ambiguous words are spread through the frequency ranking of each
        // tag that emits them. NOUN/VERB words lean towards NOUN in the source
        // domain and towards VERB in the target domain.
        let interleave = |list: &mut Vec<usize>, extra: &[usize], stride: usize| {
            for (i, &w) in extra.iter().enumerate() {
                let at = (i * stride + 1).min(list.len());
                list.insert(at, w);
            }
        };
        interleave(&mut shared[ADJ], &adj_noun, 3);
        interleave(&mut shared[NOUN], &adj_noun, 9);
        interleave(&mut shared[ADP], &adp_prt, 2);
        interleave(&mut shared[PRT], &adp_prt, 1);
        let mut reversed = noun_verb.clone();
        reversed.reverse();
        for (d, amb) in private_amb.iter().enumerate() {
            interleave(&mut private[d][NOUN], amb, 3);
            interleave(&mut private[d][VERB], amb, 2);
        }
        let shared = [(2, 6), (6, 2)].map(|(noun_stride, verb_stride)| {
            let mut lists = shared.clone();
            interleave(&mut lists[NOUN], &noun_verb, noun_stride);
            interleave(&mut lists[VERB], &reversed, verb_stride);
            lists
        });

        let private_mass = [config.source_private_mass, config.target_private_mass];
        let leak_mass = [config.source_leak_mass, config.target_leak_mass];
        let emissions = [0, 1].map(|d| {
            (0..N_TAGS)
                .map(|t| {
                    let own = &private[d][t];
                    if own.is_empty() {
                        return Emission::new(&[(&shared[d][t], 1.0)]);
                    }
                    let foreign = &private[1 - d][t];
                    let (mass, leak) = (private_mass[d], leak_mass[d]);
                    Emission::new(&[(&shared[d][t], 1.0 - mass - leak), (own, mass), (foreign, leak)])
                })
                .collect()
        });

        // Opaque forms: the string carries no trace of tag or domain.
        let mut labels: Vec<usize> = (0..next_word).collect();
        labels.shuffle(rng);
        let forms = labels.into_iter().map(|l| format!("w{l}")).collect();
        Generator {
            initial: cumulative(&initial),
            transitions,
            emissions,
            forms,
        }
    }

    fn sentence(&self, domain: usize, config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<u32>) {
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut tag = draw(&self.initial, rng);
        let mut forms = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        for pos in 0..len {
            if pos > 0 {
                tag = draw(&self.transitions[domain][tag], rng);
            }
            tags.push(tag as u32);
            forms.push(self.forms[self.emissions[domain][tag].sample(rng)].clone());
        }
        (forms, tags)
    }
}

/// Samples all corpora deterministically from `config.seed`.
pub fn make_synthetic_domains(config: &SyntheticConfig) -> SyntheticDomains {
    debug_assert_eq!(UNIVERSAL_TAGS.len(), N_TAGS);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generator = Generator::new(config, &mut rng);
    let unlabeled = |domain: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<String>> {
        (0..count)
            .map(|_| generator.sentence(domain, config, rng).0)
            .collect()
    };
    let source_unlabeled = unlabeled(0, config.source_unlabeled, &mut rng);
    let target_unlabeled = unlabeled(1, config.target_unlabeled, &mut rng);
    let labeled = |domain: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<LabeledSequence> {
        let label = if domain == 0 { Domain::Source } else { Domain::Target };
        (0..count)
            .map(|_| {
                let (forms, tags) = generator.sentence(domain, config, rng);
                LabeledSequence::new(forms, tags, label).expect("generated sentences are non-empty")
            })
            .collect()
    };
    let source_labeled = labeled(0, config.source_labeled, &mut rng);
    let target_labeled = labeled(1, config.target_labeled, &mut rng);
    let target_test = labeled(1, config.target_test, &mut rng);
    SyntheticDomains {
        source_unlabeled,
        target_unlabeled,
        source_labeled,
        target_labeled,
        target_test,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{oov_mask_forms, Vocabulary};

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            source_unlabeled: 200,
            target_unlabeled: 200,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpora() {
        let a = make_synthetic_domains(&small());
        let b = make_synthetic_domains(&small());
        assert_eq!(a, b);
        let c = make_synthetic_domains(&SyntheticConfig { seed: 1, ..small() });
        assert_ne!(a, c);
    }

    #[test]
    fn target_oov_rate_is_in_range() {
        // Labeled draws follow the unlabeled ones, so the band is checked at full size.
        for seed in 0..5 {
            let d = make_synthetic_domains(&SyntheticConfig { seed, ..SyntheticConfig::default() });
            let vocab = Vocabulary::build(d.source_labeled.iter().map(|s| s.forms.iter()), 1).unwrap();
            let (mut oov, mut total) = (0usize, 0usize);
            for s in &d.target_test {
                let mask = oov_mask_forms(&vocab, &s.forms);
                oov += mask.iter().filter(|&&m| m).count();
                total += mask.len();
            }
            let rate = 100.0 * oov as f64 / total as f64;
            assert!((30.0..=40.0).contains(&rate), "seed {seed}: OOV rate {rate:.1}");
        }
    }

    #[test]
    fn sizes_follow_the_config() {
        let cfg = small();
        let d = make_synthetic_domains(&cfg);
        assert_eq!(d.source_unlabeled.len(), cfg.source_unlabeled);
        assert_eq!(d.target_unlabeled.len(), cfg.target_unlabeled);
        assert_eq!(d.source_labeled.len(), cfg.source_labeled);
        assert_eq!(d.target_labeled.len(), cfg.target_labeled);
        assert_eq!(d.target_test.len(), cfg.target_test);
        for s in d.source_labeled.iter().chain(&d.target_test) {
            assert!((cfg.min_len..=cfg.max_len).contains(&s.len()));
            assert!(s.tags.iter().all(|&t| (t as usize) < N_TAGS));
        }
    }
}
