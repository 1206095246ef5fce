use std::path::PathBuf;

use clap::{Args, ValueEnum};
use log::info;
use tempora_core::corpus;
use tempora_core::rnn_rsm::Activation;
use tempora_core::trainer::{self, EvalZ, TrainConfig};

use crate::error::{CliError, CliResult};
use crate::ingest::load_corpus;
use crate::run::{csv_writer, RunManifest, Workdir};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Tanh,
    Logistic,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvalZArg {
    Auto,
    Exact,
    Ais,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training corpus manifest.
    #[arg(required_unless_present = "dry_run")]
    pub manifest: Option<PathBuf>,

    #[arg(long)]
    pub vocab: Option<PathBuf>,

    /// Held-out corpus manifest for early stopping.
    #[arg(long, conflicts_with = "hold_out")]
    pub held_out: Option<PathBuf>,

    /// Hold out this many documents per slice of the training corpus.
    #[arg(long)]
    pub hold_out: Option<usize>,

    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cd_k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden units (topics).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Recurrent units.
    #[arg(long)]
    pub recurrent: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patience, in evaluations without improvement.
    #[arg(long)]
    pub early_stop: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Epochs of standalone RSM training before the recurrent model.
    #[arg(long)]
    pub warm_start: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient clipping threshold (global L2 norm).
    #[arg(long, conflicts_with = "no_clip")]
    pub clip: Option<f64>,
    #[arg(long)]
    pub no_clip: bool,
    /// Use probabilities for the final negative hidden statistics.
    #[arg(long)]
    pub cd_mean_field_final: Option<bool>,
    #[arg(long, value_enum)]
    pub recurrent_activation: Option<ActivationArg>,
    /// Divide the recurrent input by the number of documents in the slice.
    #[arg(long)]
    pub scale_visible_sum: bool,
    /// Documents per slice per gradient step; full batch when absent.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub eval_z: Option<EvalZArg>,
    #[arg(long)]
    pub ais_temperatures: Option<usize>,
    #[arg(long)]
    pub ais_chains: Option<usize>,

    /// Checkpoint path.
    #[arg(long, default_value = "checkpoint.json")]
    pub out: PathBuf,
    /// Training log CSV.
    #[arg(long, default_value = "train_log.csv")]
    pub log: PathBuf,
    /// Store tensors in a binary file next to the checkpoint.
    #[arg(long)]
    pub sidecar: bool,
    /// Resolve the configuration and write the run manifest only.
    #[arg(long)]
    pub dry_run: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        let mut c = TrainConfig::default();
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { c.$field = v; })*
            };
        }
        set!(epochs => epochs, cd_k => cd_k, lr => learning_rate, hidden => hidden,
             recurrent => recurrent, seed => seed, early_stop => early_stop_patience,
             eval_every => eval_every, momentum => momentum, weight_decay => weight_decay,
             cd_mean_field_final => mean_field_final, ais_temperatures => ais_temperatures,
             ais_chains => ais_chains);
        if self.warm_start.is_some() {
            c.warm_start_epochs = self.warm_start;
        }
        if self.batch_size.is_some() {
            c.batch_size = self.batch_size;
        }
        if self.no_clip {
            c.clip_norm = None;
        } else if self.clip.is_some() {
            c.clip_norm = self.clip;
        }
        if let Some(a) = self.recurrent_activation {
            c.activation = match a {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Logistic => Activation::Logistic,
            };
        }
        c.scale_visible_sum |= self.scale_visible_sum;
        if let Some(z) = self.eval_z {
            c.eval_z = match z {
                EvalZArg::Auto => EvalZ::Auto,
                EvalZArg::Exact => EvalZ::Exact,
                EvalZArg::Ais => EvalZ::Ais,
            };
        }
        c
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn run(args: &TrainArgs, wd: &Workdir, manifest: &mut RunManifest) -> CliResult<()> {
    let config = args.config();
    config.validate()?;
    manifest.config = serde_json::to_value(&config).map_err(tempora_core::Error::from)?;
    manifest.seed = Some(config.seed);
    if args.dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&config).map_err(tempora_core::Error::from)?
        );
        return Ok(());
    }

    let path = wd.path(args.manifest.as_ref().expect("required by clap"));
    let vocab = args.vocab.as_ref().map(|v| wd.path(v));
    manifest.corpus_inputs(&path, vocab.as_deref())?;
    let full = load_corpus(&path, vocab.as_deref())?;

    let (train_corpus, held) = match (&args.held_out, args.hold_out) {
        (Some(h), _) => {
            let h = wd.path(h);
            manifest.corpus_inputs(&h, vocab.as_deref())?;
            // The held-out set must share the training vocabulary.
            let held = corpus::ingest_with_vocabulary(&h, full.vocabulary().clone())?;
            (full, Some(held))
        }
        (None, Some(n)) if n > 0 => {
            let (t, h) = corpus::split_held_out(&full, n, config.seed)?;
            (t, Some(h))
        }
        (None, _) => (full, None),
    };
    info!(
        "training on {} documents in {} slices, vocabulary {}",
        train_corpus.num_documents(),
        train_corpus.num_slices(),
        train_corpus.vocab_size()
    );

    let log_path = wd.path(&args.log);
    let mut log = csv_writer(&log_path)?;
    log.write_record(["epoch", "reconstruction_error", "gradient_norm", "held_out_sum_ppl"])?;
    let mut write_error: Option<csv::Error> = None;
    let outcome = trainer::train_with(&train_corpus, &config, held.as_ref(), |r| {
        if write_error.is_some() {
            return;
        }
        let row = [
            r.epoch.to_string(),
            r.reconstruction_error.to_string(),
            r.gradient_norm.to_string(),
            fmt_opt(r.held_out_sum_ppl),
        ];
        if let Err(e) = log.write_record(row) {
            write_error = Some(e);
        }
    });
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    manifest.output(&log_path);
    if let Some(e) = write_error {
        return Err(e.into());
    }
    let outcome = outcome?;

    let out = wd.path(&args.out);
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    outcome.checkpoint.save(&out, args.sidecar)?;
    manifest.output(&out);
    if args.sidecar {
        manifest.output(&tempora_core::checkpoint::sidecar_path(&out));
    }
    match outcome.best_sum_ppl {
        Some(p) => info!("saved epoch {} (held-out SumPPL {p:.4}) to {}", outcome.best_epoch, out.display()),
        None => info!("saved epoch {} to {}", outcome.best_epoch, out.display()),
    }
    Ok(())
}
