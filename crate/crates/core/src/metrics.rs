//! Evaluation: perplexity, time-stamp prediction, topics and their
//! evolution over time, keyword trends, and NPMI coherence.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, TemporalCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::exact_oracle::{self, AisConfig, MAX_EXACT_HIDDEN};
use crate::rng::{stream_rng, Purpose};
use crate::rnn_rsm::{RnnRsmParams, UnrolledState};
use crate::rsm_core::{self, HiddenState};

/// How partition functions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ZMode {
    Exact,
    /// Annealed importance sampling; approximate.
    Ais {
        temperatures: usize,
        chains: usize,
        seed: u64,
    },
}

impl ZMode {
    pub fn ais(seed: u64) -> Self {
        let AisConfig { temperatures, chains } = AisConfig::default();
        ZMode::Ais {
            temperatures,
            chains,
            seed,
        }
    }

    /// Exact when enumeration is feasible, AIS otherwise.
    pub fn auto(hidden: usize, seed: u64) -> Self {
        if hidden <= MAX_EXACT_HIDDEN {
            ZMode::Exact
        } else {
            ZMode::ais(seed)
        }
    }
}

/// log Z per (slice, document length) for one parameter snapshot.
pub struct LogZCache<'a> {
    params: &'a RnnRsmParams,
    state: &'a UnrolledState,
    mode: ZMode,
    values: BTreeMap<(usize, u32), f64>,
}

impl<'a> LogZCache<'a> {
    pub fn new(params: &'a RnnRsmParams, state: &'a UnrolledState, mode: ZMode) -> Self {
        Self {
            params,
            state,
            mode,
            values: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &RnnRsmParams {
        self.params
    }

    pub fn num_slices(&self) -> usize {
        self.state.num_slices()
    }

    /// Fills the cache for every listed length of slice `t` at once.
    pub fn prepare(&mut self, t: usize, lengths: impl IntoIterator<Item = u32>) -> Result<()> {
        let missing: Vec<u32> = lengths
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .filter(|d| !self.values.contains_key(&(t, *d)))
            .collect();
        if missing.is_empty() {
            return Ok(());
        }
        let bias = Some(self.state.bias(t));
        let rsm = &self.params.rsm;
        match self.mode {
            ZMode::Exact => {
                let values = exact_oracle::exact_log_z_many(rsm, bias, &missing)?;
                for (d, v) in missing.into_iter().zip(values) {
                    self.values.insert((t, d), v);
                }
            }
            ZMode::Ais {
                temperatures,
                chains,
                seed,
            } => {
                let config = AisConfig { temperatures, chains };
                for d in missing {
                    let mut rng = stream_rng(seed, Purpose::Ais, (t as u64) << 32 | u64::from(d));
                    let est = exact_oracle::estimate_log_z(rsm, bias, d, config, &mut rng)?;
                    self.values.insert((t, d), est.log_z);
                }
            }
        }
        Ok(())
    }

    pub fn log_z(&mut self, t: usize, length: u32) -> Result<f64> {
        self.prepare(t, [length])?;
        Ok(self.values[&(t, length)])
    }

    /// Sequence-level log P(doc) under slice `t`.
    pub fn log_prob(&mut self, t: usize, doc: &Document) -> Result<f64> {
        let fe = rsm_core::free_energy(&self.params.rsm, doc, Some(self.state.bias(t)))?;
        Ok(-fe - self.log_z(t, doc.len())?)
    }
}

/// How the summed log-likelihood is normalised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerplexityNorm {
    /// exp(-Σ log P / Σ D_n): per-word perplexity.
    #[default]
    PerWord,
    /// exp(-(1/N) Σ log P / Σ D_n), the variant with an extra 1/N.
    PerDocumentMean,
}

/// Perplexity of `docs` under slice `t`.
pub fn perplexity(cache: &mut LogZCache<'_>, t: usize, docs: &[Document], norm: PerplexityNorm) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("perplexity of an empty document set".into()));
    }
    if t >= cache.num_slices() {
        return Err(Error::InvalidArgument(format!(
            "slice index {t} out of range for {} slices",
            cache.num_slices()
        )));
    }
    cache.prepare(t, docs.iter().map(Document::len))?;
    let mut log_p = 0.0;
    let mut words = 0.0;
    for doc in docs {
        log_p += cache.log_prob(t, doc)?;
        words += f64::from(doc.len());
    }
    let n = match norm {
        PerplexityNorm::PerWord => 1.0,
        PerplexityNorm::PerDocumentMean => docs.len() as f64,
    };
    Ok((-log_p / n / words).exp())
}

/// Perplexity of each nonempty slice of `held`, paired by index with the
/// model's slices.
pub fn slice_perplexities(
    cache: &mut LogZCache<'_>,
    held: &TemporalCorpus,
    norm: PerplexityNorm,
) -> Result<Vec<Option<f64>>> {
    if held.num_slices() != cache.num_slices() {
        return Err(Error::Dimension {
            context: "held-out slices",
            expected: cache.num_slices(),
            actual: held.num_slices(),
        });
    }
    held.slices()
        .iter()
        .enumerate()
        .map(|(t, s)| {
            if s.is_empty() {
                Ok(None)
            } else {
                perplexity(cache, t, &s.documents, norm).map(Some)
            }
        })
        .collect()
}

/// Σ_t PPL_t over the nonempty held-out slices.
pub fn sum_perplexity(cache: &mut LogZCache<'_>, held: &TemporalCorpus, norm: PerplexityNorm) -> Result<f64> {
    Ok(slice_perplexities(cache, held, norm)?.into_iter().flatten().sum())
}

/// The slice under which `doc` has the lowest perplexity; ties go to the
/// earliest slice.
pub fn predict_timestamp(cache: &mut LogZCache<'_>, doc: &Document) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for t in 0..cache.num_slices() {
        // Same D for every slice, so lowest perplexity is highest log P.
        let lp = cache.log_prob(t, doc)?;
        if lp > best.1 {
            best = (t, lp);
        }
    }
    Ok(best.0)
}

/// Mean |predicted year - true year| with years read from slice labels.
pub fn mean_absolute_error_years(predictions: &[usize], truths: &[usize], labels: &[String]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Dimension {
            context: "predictions",
            expected: truths.len(),
            actual: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let years = labels
        .iter()
        .map(|l| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| Error::InvalidArgument(format!("slice label `{l}` is not a year")))
        })
        .collect::<Result<Vec<_>>>()?;
    let year = |t: usize| {
        years
            .get(t)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("slice index {t} out of range")))
    };
    let mut total = 0.0;
    for (&p, &t) in predictions.iter().zip(truths) {
        total += (year(p)? - year(t)?).abs() as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Topics of one slice: for each hidden unit, its top terms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceTopics {
    pub label: String,
    pub topics: Vec<Vec<String>>,
}

impl SliceTopics {
    /// Q^(t): every term appearing in any topic of the slice.
    pub fn term_union(&self) -> BTreeSet<String> {
        self.topics.iter().flatten().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    pub slices: Vec<SliceTopics>,
}

impl TopicSet {
    /// Q̂: unique terms across all slices and topics.
    pub fn unique_terms(&self) -> BTreeSet<String> {
        self.slices.iter().flat_map(SliceTopics::term_union).collect()
    }
}

/// Top `top_n` terms of every hidden unit at slice `t`, read from the
/// visible distribution with that unit alone switched on.
pub fn extract_topics(
    params: &RnnRsmParams,
    state: &UnrolledState,
    vocabulary: &Vocabulary,
    t: usize,
    top_n: usize,
) -> Result<Vec<Vec<String>>> {
    let k = params.vocab_size();
    if vocabulary.len() != k {
        return Err(Error::Dimension {
            context: "vocabulary",
            expected: k,
            actual: vocabulary.len(),
        });
    }
    if t >= state.num_slices() {
        return Err(Error::InvalidArgument(format!("slice index {t} out of range")));
    }
    let n = if top_n > k {
        warn!("top_n {top_n} exceeds the vocabulary size {k}; clamped");
        k
    } else {
        top_n
    };
    let f = params.hidden_size();
    (0..f)
        .map(|j| {
            let h = HiddenState::one_hot(f, j);
            let dist = rsm_core::visible_distribution(&params.rsm, &h, Some(state.bias(t)))?;
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| {
                dist[b]
                    .total_cmp(&dist[a])
                    .then_with(|| vocabulary.term(a as u32).cmp(vocabulary.term(b as u32)))
            });
            Ok(order[..n].iter().map(|&i| vocabulary.term(i as u32).to_owned()).collect())
        })
        .collect()
}

pub fn extract_topic_set(
    params: &RnnRsmParams,
    state: &UnrolledState,
    vocabulary: &Vocabulary,
    labels: &[String],
    top_n: usize,
) -> Result<TopicSet> {
    if labels.len() != state.num_slices() {
        return Err(Error::Dimension {
            context: "slice labels",
            expected: state.num_slices(),
            actual: labels.len(),
        });
    }
    let slices = labels
        .iter()
        .enumerate()
        .map(|(t, label)| {
            Ok(SliceTopics {
                label: label.clone(),
                topics: extract_topics(params, state, vocabulary, t, top_n)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TopicSet { slices })
}

/// Cosine of binary incidence vectors: |a ∩ b| / sqrt(|a| |b|); 0 if either
/// set is empty.
pub fn set_cosine<S: Ord>(a: &BTreeSet<S>, b: &BTreeSet<S>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let common = a.intersection(b).count() as f64;
    common / ((a.len() * b.len()) as f64).sqrt()
}

/// Per slice, the best set-cosine between any topic and the key terms.
pub fn topic_popularity(topics: &TopicSet, key_terms: &BTreeSet<String>) -> Vec<f64> {
    topics
        .slices
        .iter()
        .map(|s| {
            s.topics
                .iter()
                .map(|topic| set_cosine(&topic.iter().cloned().collect(), key_terms))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// 1 - cosine between two slices' topic-term unions.
pub fn topic_term_drift(q_a: &BTreeSet<String>, q_b: &BTreeSet<String>) -> f64 {
    1.0 - set_cosine(q_a, q_b)
}

/// Appearance of one keyword in the topics over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendSequence {
    pub keyword: String,
    pub bits: Vec<bool>,
    pub span: usize,
    /// Total occurrences of the keyword in the corpus.
    pub count: u64,
    /// span / count; absent when the keyword never occurs.
    pub span_dict: Option<f64>,
}

/// Longest run of consecutive `true`.
pub fn span(bits: &[bool]) -> usize {
    let (mut best, mut run) = (0, 0);
    for &b in bits {
        run = if b { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

pub fn span_dict(span: usize, count: u64) -> Option<f64> {
    (count > 0).then(|| span as f64 / count as f64)
}

pub fn keyword_trend(topics: &TopicSet, keyword: &str, count: u64) -> TrendSequence {
    let bits: Vec<bool> = topics
        .slices
        .iter()
        .map(|s| s.topics.iter().any(|topic| topic.iter().any(|w| w == keyword)))
        .collect();
    let s = span(&bits);
    TrendSequence {
        keyword: keyword.to_owned(),
        bits,
        span: s,
        count,
        span_dict: span_dict(s, count),
    }
}

/// Trends of every unique topic term, in term order.
pub fn all_trends(topics: &TopicSet, corpus: &TemporalCorpus) -> Vec<TrendSequence> {
    let totals = corpus.term_totals();
    let vocab = corpus.vocabulary();
    topics
        .unique_terms()
        .iter()
        .map(|term| {
            let count = vocab.id(term).map_or(0, |id| totals[id as usize]);
            keyword_trend(topics, term, count)
        })
        .collect()
}

/// (1/|Q̂|) Σ_k S_k / v̂^k over the unique topic terms. Terms with no corpus
/// occurrences count towards |Q̂| but add nothing.
pub fn avg_span(topics: &TopicSet, corpus: &TemporalCorpus) -> Result<f64> {
    let trends = all_trends(topics, corpus);
    if trends.is_empty() {
        return Err(Error::InvalidArgument("empty topic set".into()));
    }
    let total: f64 = trends.iter().filter_map(|t| t.span_dict).sum();
    Ok(total / trends.len() as f64)
}

pub const COOCCURRENCE_FORMAT: u32 = 1;

/// Boolean sliding-window document counts over a reference corpus.
///
/// Each line is a document. A line of n tokens yields max(1, n - w + 1)
/// windows; a term (or pair) is counted once per window containing it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    pub format_version: u32,
    pub window: usize,
    pub total_windows: u64,
    pub counts: BTreeMap<String, u64>,
    /// Keyed by the lexicographically smaller term.
    pub joint: BTreeMap<String, BTreeMap<String, u64>>,
}

impl CooccurrenceTable {
    pub fn empty(window: usize) -> Self {
        Self {
            format_version: COOCCURRENCE_FORMAT,
            window,
            total_windows: 0,
            counts: BTreeMap::new(),
            joint: BTreeMap::new(),
        }
    }

    pub fn count(&self, term: &str) -> u64 {
        self.counts.get(term).copied().unwrap_or(0)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.counts.contains_key(term)
    }

    pub fn joint(&self, x: &str, y: &str) -> u64 {
        if x == y {
            return self.count(x);
        }
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        self.joint.get(a).and_then(|m| m.get(b)).copied().unwrap_or(0)
    }

    /// Counts one document given as a token sequence.
    pub fn add_document<S: AsRef<str>>(&mut self, tokens: &[S], filter: Option<&BTreeSet<String>>) {
        if tokens.is_empty() {
            return;
        }
        let w = self.window.max(1);
        let windows = if tokens.len() > w { tokens.len() - w + 1 } else { 1 };
        for start in 0..windows {
            let end = (start + w).min(tokens.len());
            let present: BTreeSet<&str> = tokens[start..end]
                .iter()
                .map(AsRef::as_ref)
                .filter(|t| filter.is_none_or(|f| f.contains(*t)))
                .collect();
            self.total_windows += 1;
            let present: Vec<&str> = present.into_iter().collect();
            for (i, &x) in present.iter().enumerate() {
                *self.counts.entry(x.to_owned()).or_default() += 1;
                for &y in &present[i + 1..] {
                    *self
                        .joint
                        .entry(x.to_owned())
                        .or_default()
                        .entry(y.to_owned())
                        .or_default() += 1;
                }
            }
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: Self = serde_json::from_str(&text)?;
        if table.format_version != COOCCURRENCE_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported co-occurrence format {} in {}",
                table.format_version,
                path.display()
            )));
        }
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Counts windows over a whitespace-tokenised plain-text file, one document
/// per line. With a filter only the listed terms are tracked.
pub fn build_cooccurrence(path: &Path, window: usize, filter: Option<&BTreeSet<String>>) -> Result<CooccurrenceTable> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = CooccurrenceTable::empty(window);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        table.add_document(&tokens, filter);
    }
    Ok(table)
}

/// Normalised PMI in [-1, 1]; -1 when the pair never co-occurs and 1 when
/// both terms occur in every window.
pub fn npmi(x: &str, y: &str, table: &CooccurrenceTable) -> f64 {
    let joint = table.joint(x, y);
    if joint == 0 || table.total_windows == 0 {
        return -1.0;
    }
    let n = table.total_windows as f64;
    let p_xy = joint as f64 / n;
    if joint == table.total_windows {
        return 1.0;
    }
    let p_x = table.count(x) as f64 / n;
    let p_y = table.count(y) as f64 / n;
    ((p_xy / (p_x * p_y)).ln() / -p_xy.ln()).clamp(-1.0, 1.0)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine of the topic words' NPMI context vectors, each taken
/// against the topic's own word set.
pub fn coherence<S: AsRef<str>>(topic: &[S], table: &CooccurrenceTable) -> Result<f64> {
    if topic.len() < 2 {
        return Err(Error::InvalidArgument("coherence needs at least two topic words".into()));
    }
    let words: Vec<&str> = topic.iter().map(AsRef::as_ref).collect();
    let vectors: Vec<Vec<f64>> = words
        .iter()
        .map(|&w| {
            if table.contains(w) {
                words.iter().map(|&c| npmi(w, c, table)).collect()
            } else {
                warn!("topic word `{w}` absent from the co-occurrence table");
                vec![0.0; words.len()]
            }
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            total += cosine(&vectors[i], &vectors[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
