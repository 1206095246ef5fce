//! Training loop: warm start from a static RSM, then per epoch a forward
//! pass, CD negatives per slice, backpropagation through time and an SGD
//! step. Held-out sum-perplexity drives early stopping.

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{Document, TemporalCorpus, TimeSlice};
use crate::error::{Error, Result};
use crate::metrics::{self, LogZCache, PerplexityNorm, ZMode};
use crate::rng::{stream_rng, ChainRng, Purpose};
use crate::rnn_rsm::{self, Activation, Recurrence, RnnRsmGradient, RnnRsmParams, SliceEstimator};
use crate::rsm_core::{self, CdConfig, RsmGradient, RsmParams};

/// How held-out perplexity obtains partition functions during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalZ {
    /// Exact up to the enumeration limit, AIS beyond it.
    #[default]
    Auto,
    Exact,
    Ais,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub cd_k: usize,
    pub learning_rate: f64,
    pub hidden: usize,
    pub recurrent: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global L2 norm above which gradients are rescaled; `None` disables.
    pub clip_norm: Option<f64>,
    pub mean_field_final: bool,
    pub activation: Activation,
    pub scale_visible_sum: bool,
    /// Documents per slice per step; `None` is full batch.
    pub batch_size: Option<usize>,
    /// Epochs of standalone RSM training on the final slice before the
    /// recurrent model is assembled; `None` uses `epochs`, 0 skips it.
    pub warm_start_epochs: Option<usize>,
    pub eval_z: EvalZ,
    pub ais_temperatures: usize,
    pub ais_chains: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            cd_k: 15,
            learning_rate: 0.001,
            hidden: 30,
            recurrent: 30,
            seed: 0,
            early_stop_patience: 25,
            eval_every: 10,
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(100.0),
            mean_field_final: true,
            activation: Activation::Tanh,
            scale_visible_sum: false,
            batch_size: None,
            warm_start_epochs: None,
            eval_z: EvalZ::Auto,
            ais_temperatures: 1000,
            ais_chains: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_owned()));
        if self.cd_k == 0 {
            return bad("cd_k must be at least 1");
        }
        if self.hidden == 0 || self.recurrent == 0 {
            return bad("hidden and recurrent sizes must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be finite and non-negative");
        }
        if self.clip_norm.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("clip norm must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be at least 1");
        }
        if self.ais_temperatures == 0 || self.ais_chains == 0 {
            return bad("AIS needs at least one temperature and one chain");
        }
        Ok(())
    }

    pub fn cd(&self) -> CdConfig {
        CdConfig {
            k_steps: self.cd_k,
            mean_field_final: self.mean_field_final,
        }
    }

    pub fn recurrence(&self) -> Recurrence {
        Recurrence {
            activation: self.activation,
            scale_visible_sum: self.scale_visible_sum,
        }
    }

    pub fn warm_start_epochs(&self) -> usize {
        self.warm_start_epochs.unwrap_or(self.epochs)
    }

    pub fn z_mode(&self) -> Result<ZMode> {
        let ais = ZMode::Ais {
            temperatures: self.ais_temperatures,
            chains: self.ais_chains,
            seed: self.seed,
        };
        Ok(match self.eval_z {
            EvalZ::Auto if self.hidden <= crate::exact_oracle::MAX_EXACT_HIDDEN => ZMode::Exact,
            EvalZ::Auto | EvalZ::Ais => ais,
            EvalZ::Exact => {
                if self.hidden > crate::exact_oracle::MAX_EXACT_HIDDEN {
                    return Err(Error::EnumerationTooLarge {
                        hidden: self.hidden,
                        limit: crate::exact_oracle::MAX_EXACT_HIDDEN,
                    });
                }
                ZMode::Exact
            }
        })
    }
}

/// Rescales `tensors` to global norm `clip` if they exceed it. Returns the
/// norm before clipping.
fn clip_tensors(tensors: &mut [&mut [f64]], clip: Option<f64>) -> f64 {
    let norm = tensors
        .iter()
        .flat_map(|t| t.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if let Some(c) = clip {
        if norm > c {
            let factor = c / norm;
            for t in tensors.iter_mut() {
                t.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}

/// θ ← θ - lr·v with v ← μ·v + g + λ·θ. With μ = λ = 0 this is exactly
/// θ ← θ - lr·g.
fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], velocity: Option<&mut Vec<f64>>, config: &TrainConfig) {
    let lr = config.learning_rate;
    let (mu, wd) = (config.momentum, config.weight_decay);
    let mut offset = 0;
    let mut velocity = velocity;
    for (p, g) in params.iter_mut().zip(grads) {
        for (i, (x, &gi)) in p.iter_mut().zip(g.iter()).enumerate() {
            let mut step = if wd > 0.0 { gi + wd * *x } else { gi };
            if let Some(v) = velocity.as_deref_mut() {
                let vi = &mut v[offset + i];
                *vi = mu * *vi + step;
                step = *vi;
            }
            *x -= lr * step;
        }
        offset += p.len();
    }
}

fn rsm_tensors_mut(p: &mut RsmParams) -> [&mut [f64]; 3] {
    [
        p.w_vh.as_slice_mut().expect("standard layout"),
        p.b_v.as_slice_mut().expect("standard layout"),
        p.b_h.as_slice_mut().expect("standard layout"),
    ]
}

fn rsm_grad_tensors_mut(g: &mut RsmGradient) -> [&mut [f64]; 3] {
    [
        g.w_vh.as_slice_mut().expect("standard layout"),
        g.b_v.as_slice_mut().expect("standard layout"),
        g.b_h.as_slice_mut().expect("standard layout"),
    ]
}

/// Standalone CD training of one RSM on one slice, from a random start.
pub fn train_static_rsm<R: Rng + ?Sized>(
    slice: &TimeSlice,
    vocab_size: usize,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<RsmParams> {
    config.validate()?;
    let mut params = RsmParams::random(vocab_size, config.hidden, rng);
    let mut velocity = (config.momentum > 0.0).then(|| vec![0.0; params.w_vh.len() + vocab_size + config.hidden]);
    for epoch in 0..config.epochs {
        if slice.is_empty() {
            break;
        }
        let mut g = rsm_core::cd_gradient(&params, &slice.documents, None, config.cd(), rng)?;
        let mut grads = rsm_grad_tensors_mut(&mut g);
        clip_tensors(&mut grads, config.clip_norm);
        let grads: Vec<&[f64]> = grads.iter().map(|g| &**g).collect();
        sgd_step(&mut rsm_tensors_mut(&mut params), &grads, velocity.as_mut(), config);
        if let Err(e) = params.validate() {
            debug!("static RSM diverged: {e}");
            let name = ["w_vh", "b_v", "b_h"]
                .into_iter()
                .zip(rsm_tensors_mut(&mut params))
                .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
                .map_or("rsm", |(n, _)| n);
            return Err(Error::NonFinite {
                parameter: name.to_owned(),
                epoch: epoch + 1,
            });
        }
    }
    Ok(params)
}

/// Initial recurrent model: an RSM trained on the final slice, wrapped with
/// small random recurrent weights. With zero warm-start epochs, or an empty
/// final slice, the RSM part is the random initialisation itself.
pub fn warm_start<R: Rng + ?Sized>(corpus: &TemporalCorpus, config: &TrainConfig, rng: &mut R) -> Result<RnnRsmParams> {
    config.validate()?;
    let last = corpus
        .slices()
        .last()
        .ok_or_else(|| Error::InvalidArgument("corpus has no slices".into()))?;
    let epochs = if last.is_empty() {
        warn!("final slice `{}` is empty; warm start falls back to random init", last.label);
        0
    } else {
        config.warm_start_epochs()
    };
    let rsm_config = TrainConfig {
        epochs,
        ..config.clone()
    };
    let rsm = train_static_rsm(last, corpus.vocab_size(), &rsm_config, rng)?;
    let mut params = RnnRsmParams::with_rsm(rsm, config.recurrent, rng);
    params.recurrence = config.recurrence();
    Ok(params)
}

/// Statistics of one completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub reconstruction_error: f64,
    /// Global gradient norm before clipping, summed over steps.
    pub gradient_norm: f64,
    pub held_out_sum_ppl: Option<f64>,
}

/// Owns one training run.
pub struct Trainer<'a> {
    corpus: &'a TemporalCorpus,
    config: TrainConfig,
    params: RnnRsmParams,
    velocity: Option<Vec<f64>>,
    completed: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(corpus: &'a TemporalCorpus, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if corpus.num_slices() == 0 {
            return Err(Error::InvalidArgument("corpus has no slices".into()));
        }
        let mut rng = stream_rng(config.seed, Purpose::Init, 0);
        let params = warm_start(corpus, &config, &mut rng)?;
        Ok(Self::from_parts(corpus, config, params, None, 0))
    }

    /// Continues a run from a checkpoint taken on the same corpus.
    pub fn resume(corpus: &'a TemporalCorpus, checkpoint: &Checkpoint) -> Result<Self> {
        checkpoint.check_vocabulary(corpus.vocabulary())?;
        let params = checkpoint.params()?;
        rnn_rsm::forward(&params, corpus)?;
        if let Some(v) = &checkpoint.velocity {
            if v.len() != params.num_parameters() {
                return Err(Error::Checkpoint("velocity length does not match parameters".into()));
            }
        }
        Ok(Self::from_parts(
            corpus,
            checkpoint.config.clone(),
            params,
            checkpoint.velocity.clone(),
            checkpoint.epoch,
        ))
    }

    fn from_parts(
        corpus: &'a TemporalCorpus,
        config: TrainConfig,
        params: RnnRsmParams,
        velocity: Option<Vec<f64>>,
        completed: usize,
    ) -> Self {
        let velocity = velocity.or_else(|| (config.momentum > 0.0).then(|| vec![0.0; params.num_parameters()]));
        Self {
            corpus,
            config,
            params,
            velocity,
            completed,
        }
    }

    pub fn params(&self) -> &RnnRsmParams {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.config,
            self.corpus,
            &self.params,
            self.completed,
            self.velocity.clone(),
        )
    }

    /// Document batches for one epoch: full slices, or shuffled chunks of
    /// `batch_size` aligned across slices.
    fn batches(&self, rng: &mut ChainRng) -> Vec<Vec<Vec<Document>>> {
        let slices = self.corpus.slices();
        let Some(size) = self.config.batch_size else {
            return vec![slices.iter().map(|s| s.documents.clone()).collect()];
        };
        let chunks: Vec<Vec<Vec<Document>>> = slices
            .iter()
            .map(|s| {
                let mut idx: Vec<usize> = (0..s.len()).collect();
                idx.shuffle(rng);
                idx.chunks(size)
                    .map(|c| c.iter().map(|&i| s.documents[i].clone()).collect())
                    .collect()
            })
            .collect();
        let steps = chunks.iter().map(Vec::len).max().unwrap_or(0).max(1);
        (0..steps)
            .map(|step| {
                chunks
                    .iter()
                    .map(|c| c.get(step).cloned().unwrap_or_default())
                    .collect()
            })
            .collect()
    }

    /// One epoch of Algorithm-style updates. Randomness comes from a stream
    /// keyed by the epoch number, so resumed runs continue identically.
    pub fn step_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.completed + 1;
        let mut rng = stream_rng(self.config.seed, Purpose::Epoch, epoch as u64);
        let estimator = SliceEstimator::ContrastiveDivergence(self.config.cd());
        let mut moved = 0.0;
        let mut words = 0.0;
        let mut norm = 0.0;
        for batch in self.batches(&mut rng) {
            let state = rnn_rsm::forward(&self.params, self.corpus)?;
            let views: Vec<&[Document]> = batch.iter().map(Vec::as_slice).collect();
            let result = rnn_rsm::sequence_gradient_batch(&self.params, &state, &views, estimator, &mut rng)?;
            let n_words: f64 = batch.iter().flatten().map(|d| f64::from(d.len())).sum();
            moved += result.reconstruction_error.unwrap_or(0.0) * n_words;
            words += n_words;
            let mut g: RnnRsmGradient = result.gradient;
            let mut gt = g.tensors_mut();
            norm += clip_tensors(&mut gt, self.config.clip_norm);
            let grads: Vec<&[f64]> = g.tensors().into_iter().collect();
            sgd_step(&mut self.params.tensors_mut(), &grads, self.velocity.as_mut(), &self.config);
            rnn_rsm::ensure_finite(&self.params, epoch)?;
        }
        self.completed = epoch;
        Ok(EpochRecord {
            epoch,
            reconstruction_error: if words > 0.0 { moved / words } else { 0.0 },
            gradient_norm: norm,
            held_out_sum_ppl: None,
        })
    }

    /// Σ_t PPL_t of `held` under the current parameters.
    pub fn held_out_sum_perplexity(&self, held: &TemporalCorpus) -> Result<f64> {
        held_out_sum_perplexity(&self.params, self.corpus, held, self.config.z_mode()?)
    }
}

/// Held-out SumPPL with slice biases driven by the training corpus.
pub fn held_out_sum_perplexity(
    params: &RnnRsmParams,
    train: &TemporalCorpus,
    held: &TemporalCorpus,
    z_mode: ZMode,
) -> Result<f64> {
    let state = rnn_rsm::forward(params, train)?;
    let mut cache = LogZCache::new(params, &state, z_mode);
    metrics::sum_perplexity(&mut cache, held, PerplexityNorm::PerWord)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_sum_ppl: Option<f64>,
}

/// Runs a full training job. With held-out data, evaluates at epoch 0, every
/// `eval_every` epochs and at the last epoch, stops after `early_stop_patience`
/// evaluations without improvement, and returns the best evaluated state.
/// Without held-out data the final state is returned.
pub fn train(corpus: &TemporalCorpus, config: &TrainConfig, held: Option<&TemporalCorpus>) -> Result<TrainOutcome> {
    train_with(corpus, config, held, |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_with<F: FnMut(&EpochRecord)>(
    corpus: &TemporalCorpus,
    config: &TrainConfig,
    held: Option<&TemporalCorpus>,
    mut observe: F,
) -> Result<TrainOutcome> {
    if let Some(h) = held {
        if h.num_slices() != corpus.num_slices() {
            return Err(Error::Dimension {
                context: "held-out slices",
                expected: corpus.num_slices(),
                actual: h.num_slices(),
            });
        }
        if h.vocabulary().hash() != corpus.vocabulary().hash() {
            return Err(Error::VocabularyMismatch {
                checkpoint: corpus.vocabulary().hash(),
                corpus: h.vocabulary().hash(),
            });
        }
    }
    let mut trainer = Trainer::new(corpus, config.clone())?;
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut stale = 0usize;

    let evaluate = |trainer: &Trainer<'_>, best: &mut Option<(f64, Checkpoint)>, stale: &mut usize| -> Result<Option<f64>> {
        let Some(h) = held else { return Ok(None) };
        let ppl = trainer.held_out_sum_perplexity(h)?;
        let mut ckpt = trainer.checkpoint();
        ckpt.held_out_sum_ppl = Some(ppl);
        match best {
            Some((b, _)) if ppl >= *b => *stale += 1,
            _ => {
                *best = Some((ppl, ckpt));
                *stale = 0;
            }
        }
        Ok(Some(ppl))
    };

    if let Some(ppl) = evaluate(&trainer, &mut best, &mut stale)? {
        info!("epoch 0: held-out SumPPL {ppl:.4}");
    }
    while trainer.completed_epochs() < config.epochs {
        let mut record = trainer.step_epoch()?;
        let e = record.epoch;
        if e % config.eval_every == 0 || e == config.epochs {
            record.held_out_sum_ppl = evaluate(&trainer, &mut best, &mut stale)?;
        }
        debug!(
            "epoch {e}: reconstruction error {:.4}, gradient norm {:.4}",
            record.reconstruction_error, record.gradient_norm
        );
        if let Some(ppl) = record.held_out_sum_ppl {
            info!("epoch {e}: held-out SumPPL {ppl:.4}");
        }
        observe(&record);
        log.push(record);
        if held.is_some() && stale >= config.early_stop_patience {
            info!("early stop at epoch {e} after {stale} evaluations without improvement");
            break;
        }
    }

    Ok(match best {
        Some((ppl, checkpoint)) => TrainOutcome {
            best_epoch: checkpoint.epoch,
            checkpoint,
            log,
            best_sum_ppl: Some(ppl),
        },
        None => TrainOutcome {
            checkpoint: trainer.checkpoint(),
            best_epoch: trainer.completed_epochs(),
            log,
            best_sum_ppl: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Vocabulary;
    use std::sync::Arc;

    fn tiny_corpus() -> TemporalCorpus {
        let v = Arc::new(Vocabulary::new((0..5).map(|i| format!("w{i}")).collect()).unwrap());
        let d = |c: &[(u32, u32)]| Document::from_counts(c.iter().copied()).unwrap();
        TemporalCorpus::new(
            v,
            vec![
                TimeSlice::new("2000", vec![d(&[(0, 2), (1, 1)]), d(&[(1, 2)])]),
                TimeSlice::new("2001", vec![d(&[(3, 1), (4, 2)]), d(&[(2, 1), (3, 1)])]),
            ],
        )
        .unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            cd_k: 2,
            learning_rate: 0.05,
            hidden: 3,
            recurrent: 2,
            seed: 7,
            warm_start_epochs: Some(3),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.cd_k, c.learning_rate, c.hidden), (1000, 15, 0.001, 30));
        assert_eq!((c.early_stop_patience, c.eval_every), (25, 10));
        assert_eq!((c.momentum, c.weight_decay, c.clip_norm), (0.0, 0.0, Some(100.0)));
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            learning_rate: 0.0,
            ..small_config()
        };
        let mut t = Trainer::new(&corpus, config).unwrap();
        let before = t.params().clone();
        for _ in 0..4 {
            t.step_epoch().unwrap();
        }
        assert_eq!(t.params(), &before);
    }

    #[test]
    fn warm_start_copies_static_rsm() {
        let corpus = tiny_corpus();
        let config = small_config();
        let mut a = stream_rng(1, Purpose::Init, 0);
        let mut b = stream_rng(1, Purpose::Init, 0);
        let params = warm_start(&corpus, &config, &mut a).unwrap();
        let rsm_config = TrainConfig {
            epochs: 3,
            ..config
        };
        let rsm = train_static_rsm(&corpus.slices()[1], 5, &rsm_config, &mut b).unwrap();
        assert_eq!(params.rsm, rsm);
    }

    #[test]
    fn zero_warm_start_is_random_init() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            warm_start_epochs: Some(0),
            ..small_config()
        };
        let mut a = stream_rng(3, Purpose::Init, 0);
        let mut b = stream_rng(3, Purpose::Init, 0);
        let params = warm_start(&corpus, &config, &mut a).unwrap();
        assert_eq!(params.rsm, RsmParams::random(5, 3, &mut b));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = tiny_corpus();
        let a = train(&corpus, &small_config(), None).unwrap();
        let b = train(&corpus, &small_config(), None).unwrap();
        assert_eq!(a.checkpoint.params().unwrap(), b.checkpoint.params().unwrap());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn momentum_and_batches_run() {
        let corpus = tiny_corpus();
        let config = TrainConfig {
            momentum: 0.5,
            weight_decay: 1e-3,
            batch_size: Some(1),
            ..small_config()
        };
        let out = train(&corpus, &config, None).unwrap();
        assert_eq!(out.log.len(), 5);
        assert!(out.checkpoint.velocity.is_some());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for c in [
            TrainConfig { cd_k: 0, ..small_config() },
            TrainConfig { hidden: 0, ..small_config() },
            TrainConfig { learning_rate: -1.0, ..small_config() },
            TrainConfig { eval_every: 0, ..small_config() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
