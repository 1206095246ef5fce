use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::Args;
use log::info;
use tempora_core::corpus::{self, TemporalCorpus, Vocabulary};

use crate::error::{CliError, CliResult};
use crate::run::{RunManifest, Workdir};

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Corpus manifest (JSON listing slice files in time order).
    pub manifest: PathBuf,

    /// Vocabulary file, one term per line; overrides the manifest's.
    #[arg(long)]
    pub vocab: Option<PathBuf>,

    /// Write the normalised corpus (manifest, vocabulary, slices) here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Also write the stats table as CSV.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

/// Reads a corpus, with an optional vocabulary override.
pub fn load_corpus(manifest: &std::path::Path, vocab: Option<&std::path::Path>) -> CliResult<TemporalCorpus> {
    Ok(match vocab {
        Some(v) => corpus::ingest_with_vocabulary(manifest, Vocabulary::read(v)?)?,
        None => corpus::ingest(manifest)?,
    })
}

pub fn run(args: &IngestArgs, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
    let path = wd.path(&args.manifest);
    let vocab = args.vocab.as_ref().map(|v| wd.path(v));
    manifest.corpus_inputs(&path, vocab.as_deref())?;
    let c = load_corpus(&path, vocab.as_deref())?;
    manifest.config = serde_json::json!({
        "vocabulary_size": c.vocab_size(),
        "vocabulary_hash": c.vocabulary().hash(),
    });

    let rows: Vec<(String, usize, u64)> = c
        .slices()
        .iter()
        .map(|s| (s.label.clone(), s.len(), s.token_count()))
        .collect();
    print_table(&mut std::io::stdout().lock(), &rows, &c)
        .map_err(|e| CliError::io(std::path::Path::new("<stdout>"), e))?;

    if let Some(stats) = &args.stats {
        let target = wd.path(stats);
        let mut w = crate::run::csv_writer(&target)?;
        w.write_record(["slice", "label", "documents", "tokens"])?;
        for (t, (label, docs, tokens)) in rows.iter().enumerate() {
            w.write_record([t.to_string(), label.clone(), docs.to_string(), tokens.to_string()])?;
        }
        w.flush().map_err(|e| CliError::io(&target, e))?;
        manifest.output(&target);
    }
    if let Some(dir) = &args.out_dir {
        let dir = wd.path(dir);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let written = c.write(&dir)?;
        info!("wrote {}", written.display());
        manifest.output(&written);
    }
    Ok(())
}

fn print_table(out: &mut impl Write, rows: &[(String, usize, u64)], c: &TemporalCorpus) -> std::io::Result<()> {
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(5);
    writeln!(out, "{:<width$}  {:>9}  {:>10}", "slice", "documents", "tokens")?;
    for (label, docs, tokens) in rows {
        writeln!(out, "{label:<width$}  {docs:>9}  {tokens:>10}")?;
    }
    writeln!(out, "{:<width$}  {:>9}  {:>10}", "total", c.num_documents(), c.token_count())?;
    writeln!(out, "vocabulary: {} terms", c.vocab_size())
}
