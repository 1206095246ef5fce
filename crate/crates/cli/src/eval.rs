use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::{Args, Subcommand, ValueEnum};
use log::{info, warn};
use tempora_core::checkpoint::Checkpoint;
use tempora_core::corpus::{TemporalCorpus, Vocabulary};
use tempora_core::metrics::{self, CooccurrenceTable, LogZCache, PerplexityNorm, TopicSet, TrendSequence, ZMode};
use tempora_core::rnn_rsm::{RnnRsmParams, UnrolledState};

use crate::error::{CliError, CliResult};
use crate::ingest::load_corpus;
use crate::run::{csv_writer, RunManifest, Workdir};

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, global = true, default_value = "checkpoint.json")]
    pub checkpoint: PathBuf,

    #[command(subcommand)]
    pub command: EvalCommand,
}

/// A corpus to evaluate against, or just its vocabulary.
#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus manifest.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Vocabulary file; overrides the manifest's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// CSV destination; `-` for standard output.
    #[arg(long, default_value = "-")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TopArg {
    /// Terms per topic.
    #[arg(long, default_value_t = 20)]
    pub top: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ZModeArg {
    Auto,
    Exact,
    Ais,
}

#[derive(Debug, Args)]
pub struct ZArgs {
    #[arg(long, value_enum, default_value = "auto")]
    pub z_mode: ZModeArg,
    #[arg(long, default_value_t = 1000)]
    pub ais_temperatures: usize,
    #[arg(long, default_value_t = 100)]
    pub ais_chains: usize,
    /// Seed for AIS.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ZArgs {
    fn mode(&self, hidden: usize) -> ZMode {
        let ais = ZMode::Ais {
            temperatures: self.ais_temperatures,
            chains: self.ais_chains,
            seed: self.seed,
        };
        match self.z_mode {
            ZModeArg::Exact => ZMode::Exact,
            ZModeArg::Ais => ais,
            ZModeArg::Auto if hidden <= tempora_core::exact_oracle::MAX_EXACT_HIDDEN => ZMode::Exact,
            ZModeArg::Auto => ais,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NormArg {
    PerWord,
    PerDocumentMean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DriftPairs {
    /// First slice against every slice.
    FromFirst,
    /// Each slice against the next.
    Consecutive,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Per-slice perplexity of a held-out corpus.
    Perplexity {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        z: ZArgs,
        #[arg(long, value_enum, default_value = "per-word")]
        ppl_norm: NormArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Predict the slice of every document of a corpus.
    Timestamp {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        z: ZArgs,
        #[command(flatten)]
        out: OutArg,
    },
    /// Top terms of every topic at every slice.
    Topics {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Popularity over time of named key-term sets.
    Popularity {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// JSON object mapping a name to a list of key terms.
        #[arg(long)]
        key_terms: PathBuf,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Topic-term drift between slices.
    Drift {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, value_enum, default_value = "from-first")]
        pairs: DriftPairs,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Appearance of keywords in the topics over time.
    Trend {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, required = true)]
        keyword: Vec<String>,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Trend and span of every topic term.
    Span {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
    /// Coherence of every topic against a reference corpus.
    Coherence {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Plain-text reference corpus, one document per line.
        #[arg(long, conflicts_with = "table", required_unless_present = "table")]
        reference: Option<PathBuf>,
        /// Co-occurrence table written by `tempora cooccurrence`.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[command(flatten)]
        top: TopArg,
        #[command(flatten)]
        out: OutArg,
    },
}

impl EvalCommand {
    pub fn name(&self) -> &'static str {
        match self {
            EvalCommand::Perplexity { .. } => "perplexity",
            EvalCommand::Timestamp { .. } => "timestamp",
            EvalCommand::Topics { .. } => "topics",
            EvalCommand::Popularity { .. } => "popularity",
            EvalCommand::Drift { .. } => "drift",
            EvalCommand::Trend { .. } => "trend",
            EvalCommand::Span { .. } => "span",
            EvalCommand::Coherence { .. } => "coherence",
        }
    }

    pub fn output(&self) -> Option<&Path> {
        let out = match self {
            EvalCommand::Perplexity { out, .. }
            | EvalCommand::Timestamp { out, .. }
            | EvalCommand::Topics { out, .. }
            | EvalCommand::Popularity { out, .. }
            | EvalCommand::Drift { out, .. }
            | EvalCommand::Trend { out, .. }
            | EvalCommand::Span { out, .. }
            | EvalCommand::Coherence { out, .. } => out,
        };
        Some(&out.out)
    }
}

#[derive(Debug, Args)]
pub struct CooccurrenceArgs {
    /// Plain-text reference corpus, one document per line.
    pub reference: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    /// Only track terms of this vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value = "cooccurrence.json")]
    pub out: PathBuf,
}

struct Model {
    checkpoint: Checkpoint,
    params: RnnRsmParams,
    state: UnrolledState,
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> CliResult<Model> {
    manifest.input(path)?;
    let checkpoint = Checkpoint::load(path)?;
    let params = checkpoint.params()?;
    let state = checkpoint.forward_state()?;
    manifest.config = serde_json::to_value(&checkpoint.config).map_err(tempora_core::Error::from)?;
    manifest.seed = Some(checkpoint.config.seed);
    Ok(Model {
        checkpoint,
        params,
        state,
    })
}

fn need_corpus(args: &CorpusArgs, wd: &Workdir, model: &Model, manifest: &mut RunManifest) -> CliResult<TemporalCorpus> {
    let Some(path) = &args.corpus else {
        return Err(CliError::Input("--corpus is required".into()));
    };
    let path = wd.path(path);
    let vocab = args.vocab.as_ref().map(|v| wd.path(v));
    manifest.corpus_inputs(&path, vocab.as_deref())?;
    let c = load_corpus(&path, vocab.as_deref())?;
    model.checkpoint.check_vocabulary(c.vocabulary())?;
    if c.num_slices() != model.state.num_slices() {
        return Err(CliError::Input(format!(
            "corpus has {} slices, the model has {}",
            c.num_slices(),
            model.state.num_slices()
        )));
    }
    Ok(c)
}

fn need_vocabulary(args: &CorpusArgs, wd: &Workdir, model: &Model, manifest: &mut RunManifest) -> CliResult<Vocabulary> {
    if args.corpus.is_some() {
        return Ok(need_corpus(args, wd, model, manifest)?.vocabulary().clone());
    }
    let Some(v) = &args.vocab else {
        return Err(CliError::Input("one of --vocab or --corpus is required".into()));
    };
    let v = wd.path(v);
    manifest.input(&v)?;
    let vocab = Vocabulary::read(&v)?;
    model.checkpoint.check_vocabulary(&vocab)?;
    Ok(vocab)
}

fn topics(model: &Model, vocab: &Vocabulary, top: usize) -> CliResult<TopicSet> {
    Ok(metrics::extract_topic_set(
        &model.params,
        &model.state,
        vocab,
        model.checkpoint.labels(),
        top,
    )?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn trend_row(t: &TrendSequence) -> [String; 5] {
    let bits: String = t.bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
    [
        t.keyword.clone(),
        t.count.to_string(),
        t.span.to_string(),
        opt(t.span_dict),
        bits,
    ]
}

pub fn run(args: &EvalArgs, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
    let model = load_model(&wd.path(&args.checkpoint), manifest)?;
    let labels = model.checkpoint.labels().to_vec();
    let target = wd.output(args.command.output().unwrap_or(Path::new("-")));
    let mut w = csv_writer(&target)?;

    match &args.command {
        EvalCommand::Perplexity {
            corpus, z, ppl_norm, ..
        } => {
            let held = need_corpus(corpus, wd, &model, manifest)?;
            let norm = match ppl_norm {
                NormArg::PerWord => PerplexityNorm::PerWord,
                NormArg::PerDocumentMean => PerplexityNorm::PerDocumentMean,
            };
            let mode = z.mode(model.params.hidden_size());
            let mut cache = LogZCache::new(&model.params, &model.state, mode);
            let ppl = metrics::slice_perplexities(&mut cache, &held, norm)?;
            w.write_record(["slice", "label", "documents", "words", "perplexity"])?;
            for (t, (s, p)) in held.slices().iter().zip(&ppl).enumerate() {
                w.write_record([t.to_string(), labels[t].clone(), s.len().to_string(), s.token_count().to_string(), opt(*p)])?;
            }
            info!("SumPPL {}", ppl.iter().flatten().sum::<f64>());
        }
        EvalCommand::Timestamp { corpus, z, .. } => {
            let test = need_corpus(corpus, wd, &model, manifest)?;
            let mode = z.mode(model.params.hidden_size());
            let mut cache = LogZCache::new(&model.params, &model.state, mode);
            w.write_record(["slice", "label", "document", "predicted_slice", "predicted_label"])?;
            let (mut preds, mut truths) = (Vec::new(), Vec::new());
            for (t, s) in test.slices().iter().enumerate() {
                for (i, doc) in s.documents.iter().enumerate() {
                    let p = metrics::predict_timestamp(&mut cache, doc)?;
                    w.write_record([t.to_string(), labels[t].clone(), i.to_string(), p.to_string(), labels[p].clone()])?;
                    preds.push(p);
                    truths.push(t);
                }
            }
            if !preds.is_empty() {
                let hits = preds.iter().zip(&truths).filter(|(p, t)| p == t).count();
                info!("accuracy {}/{}", hits, preds.len());
                match metrics::mean_absolute_error_years(&preds, &truths, &labels) {
                    Ok(err) => info!("mean absolute error {err} years"),
                    Err(e) => warn!("no year error: {e}"),
                }
            }
        }
        EvalCommand::Topics { corpus, top, .. } => {
            let vocab = need_vocabulary(corpus, wd, &model, manifest)?;
            let set = topics(&model, &vocab, top.top)?;
            w.write_record(["slice", "label", "topic", "rank", "term"])?;
            for (t, s) in set.slices.iter().enumerate() {
                for (j, topic) in s.topics.iter().enumerate() {
                    for (r, term) in topic.iter().enumerate() {
                        w.write_record([t.to_string(), s.label.clone(), j.to_string(), (r + 1).to_string(), term.clone()])?;
                    }
                }
            }
        }
        EvalCommand::Popularity {
            corpus, key_terms, top, ..
        } => {
            let vocab = need_vocabulary(corpus, wd, &model, manifest)?;
            let path = wd.path(key_terms);
            manifest.input(&path)?;
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            let keys: BTreeMap<String, BTreeSet<String>> = serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let set = topics(&model, &vocab, top.top)?;
            w.write_record(["name", "slice", "label", "popularity"])?;
            for (name, terms) in &keys {
                for term in terms.iter().filter(|t| vocab.id(t).is_none()) {
                    warn!("key term `{term}` of `{name}` is not in the vocabulary");
                }
                for (t, p) in metrics::topic_popularity(&set, terms).into_iter().enumerate() {
                    w.write_record([name.clone(), t.to_string(), labels[t].clone(), p.to_string()])?;
                }
            }
        }
        EvalCommand::Drift {
            corpus, pairs, top, ..
        } => {
            let vocab = need_vocabulary(corpus, wd, &model, manifest)?;
            let set = topics(&model, &vocab, top.top)?;
            let unions: Vec<BTreeSet<String>> = set.slices.iter().map(|s| s.term_union()).collect();
            let pairs: Vec<(usize, usize)> = match pairs {
                DriftPairs::FromFirst => (0..unions.len()).map(|t| (0, t)).collect(),
                DriftPairs::Consecutive => (1..unions.len()).map(|t| (t - 1, t)).collect(),
            };
            w.write_record(["from_slice", "from_label", "to_slice", "to_label", "drift"])?;
            for (a, b) in pairs {
                let d = metrics::topic_term_drift(&unions[a], &unions[b]);
                w.write_record([a.to_string(), labels[a].clone(), b.to_string(), labels[b].clone(), d.to_string()])?;
            }
        }
        EvalCommand::Trend {
            corpus, keyword, top, ..
        } => {
            let c = need_corpus(corpus, wd, &model, manifest)?;
            let set = topics(&model, c.vocabulary(), top.top)?;
            let totals = c.term_totals();
            w.write_record(["keyword", "count", "span", "span_dict", "bits"])?;
            for k in keyword {
                let count = match c.vocabulary().id(k) {
                    Some(id) => totals[id as usize],
                    None => {
                        warn!("keyword `{k}` is not in the vocabulary");
                        0
                    }
                };
                w.write_record(trend_row(&metrics::keyword_trend(&set, k, count)))?;
            }
        }
        EvalCommand::Span { corpus, top, .. } => {
            let c = need_corpus(corpus, wd, &model, manifest)?;
            let set = topics(&model, c.vocabulary(), top.top)?;
            w.write_record(["keyword", "count", "span", "span_dict", "bits"])?;
            for t in metrics::all_trends(&set, &c) {
                w.write_record(trend_row(&t))?;
            }
            info!("avg-SPAN {}", metrics::avg_span(&set, &c)?);
        }
        EvalCommand::Coherence {
            corpus,
            reference,
            table,
            window,
            top,
            ..
        } => {
            let vocab = need_vocabulary(corpus, wd, &model, manifest)?;
            let set = topics(&model, &vocab, top.top)?;
            let table = match (reference, table) {
                (_, Some(p)) => {
                    let p = wd.path(p);
                    manifest.input(&p)?;
                    CooccurrenceTable::read(&p)?
                }
                (Some(r), None) => {
                    let r = wd.path(r);
                    manifest.input(&r)?;
                    metrics::build_cooccurrence(&r, *window, Some(&set.unique_terms()))?
                }
                (None, None) => return Err(CliError::Input("--reference or --table is required".into())),
            };
            w.write_record(["slice", "label", "topic", "coherence"])?;
            let mut all = Vec::new();
            for (t, s) in set.slices.iter().enumerate() {
                for (j, topic) in s.topics.iter().enumerate() {
                    let c = metrics::coherence(topic, &table)?;
                    all.push(c);
                    w.write_record([t.to_string(), s.label.clone(), j.to_string(), c.to_string()])?;
                }
            }
            if !all.is_empty() {
                info!("mean coherence {}", all.iter().sum::<f64>() / all.len() as f64);
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&target, e))?;
    if target != Path::new("-") {
        manifest.output(&target);
    }
    Ok(())
}

pub fn run_cooccurrence(args: &CooccurrenceArgs, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
    let reference = wd.path(&args.reference);
    manifest.input(&reference)?;
    manifest.config = serde_json::json!({ "window": args.window });
    let filter = match &args.vocab {
        Some(v) => {
            let v = wd.path(v);
            manifest.input(&v)?;
            Some(Vocabulary::read(&v)?.terms().iter().cloned().collect::<BTreeSet<_>>())
        }
        None => None,
    };
    let table = metrics::build_cooccurrence(&reference, args.window, filter.as_ref())?;
    let out = wd.path(&args.out);
    table.write(&out)?;
    info!("{} windows, {} terms", table.total_windows, table.counts.len());
    manifest.output(&out);
    Ok(())
}
