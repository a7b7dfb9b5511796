//! Corpus data model: vocabularies, integer-coded sequences, tagsets and the
//! plain-text / CoNLL readers and writers used by every other module.
//!
//! Unlabeled text is one pre-tokenized sentence per line with tokens separated
//! by spaces. Labeled text is CoNLL-style: `form<TAB>tag` per line, sentences
//! separated by blank lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Surface form reserved for the unknown-word entry. It always has id 0.
pub const UNK_FORM: &str = "<unk>";

const VOCAB_MAGIC: &str = "SEQREP-VOCAB";

/// Word-type inventory with occurrence counts.
///
/// Id 0 is the unknown word; the remaining ids are assigned by decreasing
/// count with lexicographic tie-break, so construction is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    type_to_id: HashMap<String, u32>,
    id_to_type: Vec<String>,
    counts: Vec<u64>,
    unk_id: u32,
}

impl Vocabulary {
    /// Counts word types over `corpus` and registers every type seen at least
    /// `min_count` times. Tokens of rarer types are tallied under the unknown
    /// word.
    pub fn build<I, S, T>(corpus: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut raw: HashMap<String, u64> = HashMap::new();
        let mut total = 0u64;
        for sentence in corpus {
            for token in sentence {
                let token = token.as_ref();
                total += 1;
                match raw.get_mut(token) {
                    Some(c) => *c += 1,
                    None => {
                        raw.insert(token.to_owned(), 1);
                    }
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }

        let mut unk_count = raw.remove(UNK_FORM).unwrap_or(0);
        let mut kept: Vec<(String, u64)> = Vec::with_capacity(raw.len());
        for (form, count) in raw {
            if count >= min_count {
                kept.push((form, count));
            } else {
                unk_count += count;
            }
        }
        kept.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut entries = Vec::with_capacity(kept.len() + 1);
        entries.push((UNK_FORM.to_owned(), unk_count));
        entries.extend(kept);
        Ok(Self::from_entries(entries))
    }

    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut type_to_id = HashMap::with_capacity(entries.len());
        let mut id_to_type = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (id, (form, count)) in entries.into_iter().enumerate() {
            type_to_id.insert(form.clone(), id as u32);
            id_to_type.push(form);
            counts.push(count);
        }
        Vocabulary {
            type_to_id,
            id_to_type,
            counts,
            unk_id: 0,
        }
    }

    /// Number of word types, the unknown word included.
    pub fn len(&self) -> usize {
        self.id_to_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_type.is_empty()
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    /// Id of `form`, or the unknown-word id when `form` is not registered.
    pub fn id(&self, form: &str) -> u32 {
        self.type_to_id.get(form).copied().unwrap_or(self.unk_id)
    }

    /// Whether `form` has its own (non-UNK) entry.
    pub fn contains(&self, form: &str) -> bool {
        matches!(self.type_to_id.get(form), Some(&id) if id != self.unk_id)
    }

    pub fn form(&self, id: u32) -> &str {
        &self.id_to_type[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str, u64)> + '_ {
        self.id_to_type
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(id, (form, &count))| (id as u32, form.as_str(), count))
    }

    /// Maps `tokens` to ids, unknown forms going to the unknown word. The
    /// original strings are retained on the returned sequence.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TokenSequence> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let ids = tokens.iter().map(|t| self.id(t.as_ref())).collect();
        let raw = tokens.iter().map(|t| t.as_ref().to_owned()).collect();
        Ok(TokenSequence {
            ids,
            raw: Some(raw),
        })
    }

    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.ids.iter().map(|&id| self.form(id).to_owned()).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} 1 {}", VOCAB_MAGIC, self.len())?;
        for (_, form, count) in self.iter() {
            writeln!(out, "{form}\t{count}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("vocabulary line 1", "missing header"))??;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != VOCAB_MAGIC || fields[1] != "1" {
            return Err(Error::parse("vocabulary line 1", format!("bad header {header:?}")));
        }
        let size: usize = fields[2]
            .parse()
            .map_err(|_| Error::parse("vocabulary line 1", "bad vocabulary size"))?;
        let mut entries = Vec::with_capacity(size);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.is_empty() && entries.len() == size {
                continue;
            }
            let location = format!("vocabulary line {}", i + 2);
            let (form, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(&location, "expected form<TAB>count"))?;
            let count: u64 = count
                .parse()
                .map_err(|_| Error::parse(&location, format!("bad count {count:?}")))?;
            entries.push((form.to_owned(), count));
        }
        if entries.len() != size {
            return Err(Error::parse(
                "vocabulary",
                format!("header announces {size} entries, found {}", entries.len()),
            ));
        }
        if entries.first().map(|e| e.0.as_str()) != Some(UNK_FORM) {
            return Err(Error::parse("vocabulary line 2", "first entry must be the unknown word"));
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// An integer-coded word sequence of length at least one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub raw: Option<Vec<String>>,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<u32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        Ok(TokenSequence { ids, raw: None })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Convenience wrapper around [`Vocabulary::encode`].
pub fn encode<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Result<TokenSequence> {
    vocab.encode(tokens)
}

/// Marks tokens whose surface form never occurred in the labeled training
/// data summarized by `train_vocab`. Falls back to the ids when the sequence
/// carries no surface forms.
pub fn oov_mask(train_vocab: &Vocabulary, seq: &TokenSequence) -> Vec<bool> {
    match &seq.raw {
        Some(raw) => oov_mask_forms(train_vocab, raw),
        None => seq.ids.iter().map(|&id| id == train_vocab.unk_id()).collect(),
    }
}

pub fn oov_mask_forms<S: AsRef<str>>(train_vocab: &Vocabulary, forms: &[S]) -> Vec<bool> {
    forms.iter().map(|f| !train_vocab.contains(f.as_ref())).collect()
}

/// Which side of the adaptation problem a labeled sentence comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// A tagged sentence. Forms are kept as strings because the HMM and the CRF
/// code them against different vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub forms: Vec<String>,
    pub tags: Vec<u32>,
    pub domain: Domain,
}

impl LabeledSequence {
    pub fn new(forms: Vec<String>, tags: Vec<u32>, domain: Domain) -> Result<Self> {
        if forms.is_empty() {
            return Err(Error::EmptySequence);
        }
        if forms.len() != tags.len() {
            return Err(Error::Shape(format!(
                "{} forms but {} tags",
                forms.len(),
                tags.len()
            )));
        }
        Ok(LabeledSequence { forms, tags, domain })
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    pub fn tokens(&self, vocab: &Vocabulary) -> TokenSequence {
        vocab
            .encode(&self.forms)
            .expect("labeled sequences are never empty")
    }
}

/// Coarse universal part-of-speech inventory (twelve tags).
pub const UNIVERSAL_TAGS: [&str; 12] = [
    "ADJ", "ADP", "ADV", "CONJ", "DET", "NOUN", "NUM", "PRON", "PRT", "VERB", ".", "X",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tagset {
    tag_to_id: HashMap<String, u32>,
    id_to_tag: Vec<String>,
}

impl Tagset {
    pub fn new<S: AsRef<str>>(tags: &[S]) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::InvalidArgument("a tagset needs at least one tag".into()));
        }
        let mut tag_to_id = HashMap::with_capacity(tags.len());
        let mut id_to_tag = Vec::with_capacity(tags.len());
        for tag in tags {
            let tag = tag.as_ref();
            if tag.is_empty() || tag.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("bad tag {tag:?}")));
            }
            if tag_to_id.insert(tag.to_owned(), id_to_tag.len() as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate tag {tag:?}")));
            }
            id_to_tag.push(tag.to_owned());
        }
        Ok(Tagset { tag_to_id, id_to_tag })
    }

    pub fn universal() -> Self {
        Self::new(&UNIVERSAL_TAGS).expect("the universal tagset is well formed")
    }

    /// Reads one tag per line; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tags: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::new(&tags)
    }

    pub fn len(&self) -> usize {
        self.id_to_tag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_tag.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<u32> {
        self.tag_to_id.get(tag).copied()
    }

    pub fn tag(&self, id: u32) -> &str {
        &self.id_to_tag[id as usize]
    }

    pub fn tags(&self) -> &[String] {
        &self.id_to_tag
    }
}

fn normalize(token: &str, lowercase: bool) -> String {
    if lowercase {
        token.to_lowercase()
    } else {
        token.to_owned()
    }
}

/// Streams sentences from one-sentence-per-line text, skipping blank lines.
pub struct UnlabeledReader<R> {
    lines: std::io::Lines<R>,
    lowercase: bool,
}

impl<R: BufRead> UnlabeledReader<R> {
    pub fn new(input: R, lowercase: bool) -> Self {
        UnlabeledReader {
            lines: input.lines(),
            lowercase,
        }
    }
}

impl UnlabeledReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>, lowercase: bool) -> Result<Self> {
        Ok(Self::new(BufReader::new(File::open(path)?), lowercase))
    }
}

impl<R: BufRead> Iterator for UnlabeledReader<R> {
    type Item = Result<Vec<String>>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            let tokens: Vec<String> = line
                .split_whitespace()
                .map(|t| normalize(t, self.lowercase))
                .collect();
            if !tokens.is_empty() {
                return Some(Ok(tokens));
            }
        }
    }
}

pub fn read_unlabeled_file(path: impl AsRef<Path>, lowercase: bool) -> Result<Vec<Vec<String>>> {
    UnlabeledReader::open(path, lowercase)?.collect()
}

pub fn write_unlabeled<W: Write, S: AsRef<str>>(mut out: W, sentences: &[Vec<S>]) -> Result<()> {
    for sentence in sentences {
        let mut first = true;
        for token in sentence {
            if !first {
                out.write_all(b" ")?;
            }
            out.write_all(token.as_ref().as_bytes())?;
            first = false;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Parses CoNLL-style `form<TAB>tag` lines into tagged sentences.
pub fn read_labeled<R: BufRead>(
    input: R,
    tagset: &Tagset,
    domain: Domain,
    lowercase: bool,
) -> Result<Vec<LabeledSequence>> {
    let mut sentences = Vec::new();
    let mut forms = Vec::new();
    let mut tags = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !forms.is_empty() {
                sentences.push(LabeledSequence::new(
                    std::mem::take(&mut forms),
                    std::mem::take(&mut tags),
                    domain,
                )?);
            }
            continue;
        }
        let location = format!("labeled line {}", i + 1);
        let mut fields = line.split('\t');
        let (form, tag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(form), Some(tag), None) if !form.is_empty() => (form, tag),
            _ => return Err(Error::parse(location, "expected form<TAB>tag")),
        };
        let tag_id = tagset
            .id(tag)
            .ok_or_else(|| Error::parse(&location, format!("unknown tag {tag:?}")))?;
        forms.push(normalize(form, lowercase));
        tags.push(tag_id);
    }
    if !forms.is_empty() {
        sentences.push(LabeledSequence::new(forms, tags, domain)?);
    }
    Ok(sentences)
}

pub fn read_labeled_file(
    path: impl AsRef<Path>,
    tagset: &Tagset,
    domain: Domain,
    lowercase: bool,
) -> Result<Vec<LabeledSequence>> {
    read_labeled(BufReader::new(File::open(path)?), tagset, domain, lowercase)
}

pub fn write_labeled<W: Write>(mut out: W, tagset: &Tagset, sentences: &[LabeledSequence]) -> Result<()> {
    for sentence in sentences {
        for (form, &tag) in sentence.forms.iter().zip(&sentence.tags) {
            writeln!(out, "{form}\t{}", tagset.tag(tag))?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}
