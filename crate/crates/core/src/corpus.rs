//! Time-sliced bag-of-words corpora.
//!
//! A corpus is an ordered list of time slices sharing one vocabulary. Each
//! slice file holds one document per line as whitespace-separated
//! `term:count` pairs; `#` starts a comment line. A bare `term` counts once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

/// Term ↔ id mapping shared by every slice of a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(terms: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(terms.len());
        for (id, term) in terms.iter().enumerate() {
            if term.is_empty() || term.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary term {id} is empty or contains whitespace"
                )));
            }
            if index.insert(term.clone(), id as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary term `{term}`"
                )));
            }
        }
        Ok(Self { terms, index })
    }

    /// Reads a vocabulary file: one term per line, the 0-based line number is the id.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().map(|l| l.trim().to_owned()).collect())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for term in &self.terms {
            text.push_str(term);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &str) -> Option<u32> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: u32) -> &str {
        &self.terms[id as usize]
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// SHA-256 over the newline-joined terms, hex encoded.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for term in &self.terms {
            hasher.update(term.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// Sparse word-count vector for one document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Document {
    counts: Vec<(u32, u32)>,
    length: u32,
}

impl Document {
    /// Builds a document from `(term id, count)` pairs. Repeated ids are
    /// merged and zero counts dropped; the result must hold at least one word.
    pub fn from_counts(pairs: impl IntoIterator<Item = (u32, u32)>) -> Result<Self> {
        let mut merged = BTreeMap::new();
        for (id, count) in pairs {
            if count > 0 {
                *merged.entry(id).or_insert(0u32) += count;
            }
        }
        let counts: Vec<(u32, u32)> = merged.into_iter().collect();
        let length = counts.iter().map(|&(_, c)| c).sum();
        if length == 0 {
            return Err(Error::InvalidArgument("document has no words".into()));
        }
        Ok(Self { counts, length })
    }

    /// Builds a document from a dense count vector.
    pub fn from_dense(counts: &[u32]) -> Result<Self> {
        Self::from_counts(
            counts
                .iter()
                .enumerate()
                .filter(|(_, &c)| c > 0)
                .map(|(k, &c)| (k as u32, c)),
        )
    }

    /// Sorted `(term id, count)` pairs, every count ≥ 1.
    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    /// Total number of words, D_n.
    pub fn len(&self) -> u32 {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn count(&self, id: u32) -> u32 {
        self.counts
            .binary_search_by_key(&id, |&(k, _)| k)
            .map(|i| self.counts[i].1)
            .unwrap_or(0)
    }

    pub fn max_id(&self) -> Option<u32> {
        self.counts.last().map(|&(k, _)| k)
    }

    pub fn to_dense(&self, vocab_size: usize) -> Array1<f64> {
        let mut dense = Array1::zeros(vocab_size);
        for &(k, c) in &self.counts {
            dense[k as usize] = f64::from(c);
        }
        dense
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub label: String,
    pub documents: Vec<Document>,
}

impl TimeSlice {
    pub fn new(label: impl Into<String>, documents: Vec<Document>) -> Self {
        Self {
            label: label.into(),
            documents,
        }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn token_count(&self) -> u64 {
        self.documents.iter().map(|d| u64::from(d.len())).sum()
    }

    /// Σ_n v̂_n over the slice.
    pub fn count_sum(&self, vocab_size: usize) -> Array1<f64> {
        let mut sum = Array1::zeros(vocab_size);
        for doc in &self.documents {
            for &(k, c) in doc.counts() {
                sum[k as usize] += f64::from(c);
            }
        }
        sum
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCorpus {
    vocabulary: Arc<Vocabulary>,
    slices: Vec<TimeSlice>,
}

impl TemporalCorpus {
    pub fn new(vocabulary: Arc<Vocabulary>, slices: Vec<TimeSlice>) -> Result<Self> {
        let k = vocabulary.len() as u32;
        let mut labels = BTreeSet::new();
        for slice in &slices {
            if !labels.insert(slice.label.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate slice label `{}`",
                    slice.label
                )));
            }
            for doc in &slice.documents {
                if let Some(max) = doc.max_id() {
                    if max >= k {
                        return Err(Error::InvalidArgument(format!(
                            "slice `{}` references term id {max} outside vocabulary of {k}",
                            slice.label
                        )));
                    }
                }
            }
        }
        Ok(Self { vocabulary, slices })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn shared_vocabulary(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocabulary)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn slices(&self) -> &[TimeSlice] {
        &self.slices
    }

    pub fn num_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn num_documents(&self) -> usize {
        self.slices.iter().map(TimeSlice::len).sum()
    }

    pub fn token_count(&self) -> u64 {
        self.slices.iter().map(TimeSlice::token_count).sum()
    }

    /// Total corpus count v̂^k of every term.
    pub fn term_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.vocab_size()];
        for doc in self.slices.iter().flat_map(|s| &s.documents) {
            for &(k, c) in doc.counts() {
                totals[k as usize] += u64::from(c);
            }
        }
        totals
    }

    /// Per-slice Σ_n v̂_n.
    pub fn count_sums(&self) -> Vec<Array1<f64>> {
        self.slices
            .iter()
            .map(|s| s.count_sum(self.vocab_size()))
            .collect()
    }

    /// Writes the corpus as a manifest plus one `.bow` file per slice and a
    /// vocabulary file, all inside `dir`. Returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocabulary.txt");
        self.vocabulary.write(&vocab_path)?;
        let mut entries = Vec::with_capacity(self.slices.len());
        for (t, slice) in self.slices.iter().enumerate() {
            let file = format!("{t:04}.bow");
            let mut text = String::new();
            for doc in &slice.documents {
                let line: Vec<String> = doc
                    .counts()
                    .iter()
                    .map(|&(k, c)| format!("{}:{c}", self.vocabulary.term(k)))
                    .collect();
                text.push_str(&line.join(" "));
                text.push('\n');
            }
            let path = dir.join(&file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            entries.push(SliceEntry {
                label: slice.label.clone(),
                file,
            });
        }
        let manifest = Manifest {
            slices: entries,
            vocabulary: Some("vocabulary.txt".into()),
        };
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceEntry {
    pub label: String,
    pub file: String,
}

/// JSON manifest listing slice files in time order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub slices: Vec<SliceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<String>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }
}

type RawDocument = (usize, Vec<(String, u32)>);

fn parse_pair(token: &str, file: &Path, line: usize) -> Result<(String, u32)> {
    let Some((term, count)) = token.rsplit_once(':') else {
        return Ok((token.to_owned(), 1));
    };
    let bad = |message: String| Error::Parse {
        file: file.to_owned(),
        line,
        message,
    };
    if term.is_empty() {
        return Err(bad(format!("missing term in `{token}`")));
    }
    if count.is_empty() || !count.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad(format!("count in `{token}` is not a decimal integer")));
    }
    let count: u32 = count
        .parse()
        .map_err(|_| bad(format!("count in `{token}` is out of range")))?;
    if count == 0 {
        return Err(bad(format!("count in `{token}` must be positive")));
    }
    Ok((term.to_owned(), count))
}

/// Parses the text of one slice file into raw documents tagged with their
/// 1-based line numbers.
pub fn parse_slice_text(text: &str, file: &Path) -> Result<Vec<RawDocument>> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if trimmed.is_empty() {
            return Err(Error::EmptyDocument {
                file: file.to_owned(),
                line: line_no,
            });
        }
        let pairs = trimmed
            .split_whitespace()
            .map(|tok| parse_pair(tok, file, line_no))
            .collect::<Result<Vec<_>>>()?;
        docs.push((line_no, pairs));
    }
    Ok(docs)
}

/// Reads a manifest and every slice it lists into a [`TemporalCorpus`].
///
/// Without a `vocabulary` entry the vocabulary is the byte-sorted union of all
/// terms; with one, ids come from the file and unknown tokens are errors.
pub fn ingest(manifest_path: &Path) -> Result<TemporalCorpus> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let vocabulary = manifest
        .vocabulary
        .as_ref()
        .map(|v| Vocabulary::read(&base.join(v)))
        .transpose()?;
    ingest_with(&manifest, base, vocabulary)
}

/// As [`ingest`], but with an explicitly supplied vocabulary that overrides
/// any vocabulary named in the manifest.
pub fn ingest_with_vocabulary(manifest_path: &Path, vocabulary: Vocabulary) -> Result<TemporalCorpus> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    ingest_with(&manifest, base, Some(vocabulary))
}

fn ingest_with(
    manifest: &Manifest,
    base: &Path,
    vocabulary: Option<Vocabulary>,
) -> Result<TemporalCorpus> {
    let parsed: Vec<(PathBuf, Vec<RawDocument>)> = manifest
        .slices
        .par_iter()
        .map(|entry| {
            let path = base.join(&entry.file);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let docs = parse_slice_text(&text, &path)?;
            Ok((path, docs))
        })
        .collect::<Result<_>>()?;

    let vocabulary = match vocabulary {
        Some(v) => v,
        None => {
            let terms: BTreeSet<&str> = parsed
                .iter()
                .flat_map(|(_, docs)| docs.iter())
                .flat_map(|(_, pairs)| pairs.iter().map(|(t, _)| t.as_str()))
                .collect();
            Vocabulary::new(terms.into_iter().map(str::to_owned).collect())?
        }
    };

    let mut slices = Vec::with_capacity(parsed.len());
    for (entry, (path, raw)) in manifest.slices.iter().zip(parsed) {
        let mut documents = Vec::with_capacity(raw.len());
        for (line, pairs) in raw {
            let mut ids = Vec::with_capacity(pairs.len());
            for (term, count) in pairs {
                let id = vocabulary.id(&term).ok_or_else(|| Error::UnknownToken {
                    token: term.clone(),
                    file: path.clone(),
                    line,
                })?;
                ids.push((id, count));
            }
            documents.push(Document::from_counts(ids)?);
        }
        if documents.is_empty() {
            log::warn!("slice `{}` ({}) has no documents", entry.label, path.display());
        }
        slices.push(TimeSlice::new(entry.label.clone(), documents));
    }
    TemporalCorpus::new(Arc::new(vocabulary), slices)
}

fn partition(slice: &TimeSlice, selected: &BTreeSet<usize>) -> (TimeSlice, TimeSlice) {
    let mut keep = Vec::new();
    let mut take = Vec::new();
    for (i, doc) in slice.documents.iter().enumerate() {
        if selected.contains(&i) {
            take.push(doc.clone());
        } else {
            keep.push(doc.clone());
        }
    }
    (
        TimeSlice::new(slice.label.clone(), keep),
        TimeSlice::new(slice.label.clone(), take),
    )
}

fn select(n: usize, count: usize, seed: u64, slice_index: usize) -> BTreeSet<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Purpose::Split, slice_index as u64);
    order.shuffle(&mut rng);
    order.into_iter().take(count).collect()
}

/// Holds out exactly `per_slice` documents from every slice. Both halves keep
/// the original document order.
pub fn split_held_out(
    corpus: &TemporalCorpus,
    per_slice: usize,
    seed: u64,
) -> Result<(TemporalCorpus, TemporalCorpus)> {
    if let Some(slice) = corpus.slices.iter().find(|s| s.len() < per_slice) {
        return Err(Error::SliceTooSmall {
            label: slice.label.clone(),
            available: slice.len(),
            requested: per_slice,
        });
    }
    let (train, held): (Vec<_>, Vec<_>) = corpus
        .slices
        .iter()
        .enumerate()
        .map(|(t, slice)| partition(slice, &select(slice.len(), per_slice, seed, t)))
        .unzip();
    Ok((
        TemporalCorpus::new(corpus.shared_vocabulary(), train)?,
        TemporalCorpus::new(corpus.shared_vocabulary(), held)?,
    ))
}

/// Number of test documents for a slice of `n` under `train_fraction`:
/// ⌊n·(1 − f)⌋, guarded against representation error in the product.
pub fn test_size(n: usize, train_fraction: f64) -> usize {
    ((n as f64) * (1.0 - train_fraction) + 1e-9).floor() as usize
}

/// Per-slice train/test split by fraction; the test share is rounded down.
pub fn split_fraction(
    corpus: &TemporalCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(TemporalCorpus, TemporalCorpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let (train, test): (Vec<_>, Vec<_>) = corpus
        .slices
        .iter()
        .enumerate()
        .map(|(t, slice)| {
            let n = slice.len();
            partition(slice, &select(n, test_size(n, train_fraction), seed, t))
        })
        .unzip();
    Ok((
        TemporalCorpus::new(corpus.shared_vocabulary(), train)?,
        TemporalCorpus::new(corpus.shared_vocabulary(), test)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(terms: &[&str]) -> Arc<Vocabulary> {
        Arc::new(Vocabulary::new(terms.iter().map(|t| t.to_string()).collect()).unwrap())
    }

    fn corpus_with_sizes(sizes: &[usize]) -> TemporalCorpus {
        let v = vocab(&["a", "b", "c"]);
        let slices = sizes
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                let docs = (0..n)
                    .map(|i| Document::from_counts([((i % 3) as u32, (i + 1) as u32)]).unwrap())
                    .collect();
                TimeSlice::new(format!("{}", 2000 + t), docs)
            })
            .collect();
        TemporalCorpus::new(v, slices).unwrap()
    }

    #[test]
    fn bare_tokens_count_once() {
        let docs = parse_slice_text("a a b\n", Path::new("x.bow")).unwrap();
        let v = vocab(&["a", "b"]);
        let ids: Vec<_> = docs[0]
            .1
            .iter()
            .map(|(t, c)| (v.id(t).unwrap(), *c))
            .collect();
        let doc = Document::from_counts(ids).unwrap();
        assert_eq!(doc.count(0), 2);
        assert_eq!(doc.count(1), 1);
        assert_eq!(doc.len(), 3);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_slice_text("# header\na:1\nb:x\n", Path::new("s.bow")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_slice_text("a:0", Path::new("s.bow")),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_slice_text("a:1\n\nb:2", Path::new("s.bow")),
            Err(Error::EmptyDocument { line: 2, .. })
        ));
    }

    #[test]
    fn terms_may_contain_colons() {
        let docs = parse_slice_text("http://x:3", Path::new("s.bow")).unwrap();
        assert_eq!(docs[0].1, vec![("http://x".to_string(), 3)]);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let v = vocab(&["x", "y"]);
        for t in v.terms() {
            assert_eq!(v.term(v.id(t).unwrap()), t);
        }
    }

    #[test]
    fn held_out_identity_when_zero() {
        let c = corpus_with_sizes(&[3, 4]);
        let (train, held) = split_held_out(&c, 0, 7).unwrap();
        assert_eq!(train, c);
        assert_eq!(held.num_documents(), 0);
    }

    #[test]
    fn held_out_too_many_names_slice() {
        let c = corpus_with_sizes(&[3, 1]);
        match split_held_out(&c, 2, 0).unwrap_err() {
            Error::SliceTooSmall { label, .. } => assert_eq!(label, "2001"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fraction_rounding() {
        let c = corpus_with_sizes(&[2, 1]);
        let (train, test) = split_fraction(&c, 0.5, 1).unwrap();
        assert_eq!(train.slices()[0].len(), 1);
        assert_eq!(test.slices()[0].len(), 1);
        let (train, test) = split_fraction(&c, 0.8, 1).unwrap();
        assert_eq!(train.slices()[1].len(), 1);
        assert_eq!(test.slices()[1].len(), 0);
        assert!(split_fraction(&c, 1.0, 1).is_err());
        assert!(split_fraction(&c, 0.0, 1).is_err());
    }

    #[test]
    fn test_size_is_exact_on_round_products() {
        assert_eq!(test_size(395, 0.8), 79);
        assert_eq!(test_size(10, 0.8), 2);
        assert_eq!(test_size(73, 0.8), 14);
    }
}
