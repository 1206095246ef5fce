//! Exact computations for small models.
//!
//! The sample space is ordered word sequences of length D, so the partition
//! function factorises over positions once the hidden state is fixed:
//!
//! ```text
//! Z(D) = Σ_h exp(D·b_h·h) · (Σ_k exp(b_v,k + (W h)_k))^D
//! ```
//!
//! which needs 2^F terms and never enumerates documents. Everything here is
//! reproducible: hidden states are visited in fixed-size chunks and partial
//! results are merged in chunk order.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;

use crate::corpus::{Document, TemporalCorpus};
use crate::error::{Error, Result};
use crate::math::{log_sum_exp, softmax, softplus, LogSumExp};
use crate::rng::ChainKey;
use crate::rnn_rsm::{self, RnnRsmParams};
use crate::rsm_core::{self, BiasOverride, HiddenState, RsmGradient, RsmParams};

/// Largest hidden layer for which exact enumeration is attempted.
pub const MAX_EXACT_HIDDEN: usize = 24;

const CHUNK_BITS: usize = 10;
const CHUNKS_PER_BATCH: usize = 32;

fn ensure_enumerable(hidden: usize) -> Result<()> {
    if hidden > MAX_EXACT_HIDDEN {
        Err(Error::EnumerationTooLarge {
            hidden,
            limit: MAX_EXACT_HIDDEN,
        })
    } else {
        Ok(())
    }
}

/// Per-hidden-state quantities handed to enumeration callbacks.
struct HiddenTerm<'a> {
    index: u64,
    /// b_v + W h
    logits: &'a Array1<f64>,
    /// b_h · h
    hidden_bias: f64,
}

impl HiddenTerm<'_> {
    fn is_on(&self, j: usize) -> bool {
        self.index >> j & 1 == 1
    }
}

/// Visits every h ∈ {0,1}^F. Within a chunk the low bits follow a Gray code so
/// each step updates the logits by one weight column.
fn enumerate_hidden<A, I, S, M>(
    params: &RsmParams,
    bias: Option<&BiasOverride>,
    init: I,
    step: S,
    mut merge: M,
) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, &HiddenTerm<'_>) + Sync,
    M: FnMut(&mut A, A),
{
    let f = params.hidden_size();
    let (b_v, b_h) = params.effective_biases(bias);
    let low = f.min(CHUNK_BITS);
    let chunks = 1u64 << (f - low);
    let run_chunk = |c: u64| {
        let mut acc = init();
        let base = c << low;
        let mut logits = b_v.clone();
        let mut hidden_bias = 0.0;
        for j in low..f {
            if base >> j & 1 == 1 {
                logits += &params.w_vh.column(j);
                hidden_bias += b_h[j];
            }
        }
        let mut gray = 0u64;
        for i in 0u64..(1u64 << low) {
            if i > 0 {
                let j = i.trailing_zeros() as usize;
                gray ^= 1 << j;
                if gray >> j & 1 == 1 {
                    logits += &params.w_vh.column(j);
                    hidden_bias += b_h[j];
                } else {
                    logits -= &params.w_vh.column(j);
                    hidden_bias -= b_h[j];
                }
            }
            step(
                &mut acc,
                &HiddenTerm {
                    index: base | gray,
                    logits: &logits,
                    hidden_bias,
                },
            );
        }
        acc
    };
    let mut total = init();
    let ids: Vec<u64> = (0..chunks).collect();
    for batch in ids.chunks(CHUNKS_PER_BATCH) {
        let parts: Vec<A> = batch.par_iter().map(|&c| run_chunk(c)).collect();
        for part in parts {
            merge(&mut total, part);
        }
    }
    total
}

/// log Z for several document lengths in one enumeration pass.
pub fn exact_log_z_many(params: &RsmParams, bias: Option<&BiasOverride>, lengths: &[u32]) -> Result<Vec<f64>> {
    params.validate()?;
    ensure_enumerable(params.hidden_size())?;
    let acc = enumerate_hidden(
        params,
        bias,
        || vec![LogSumExp::default(); lengths.len()],
        |acc, term| {
            let c = term.hidden_bias + log_sum_exp(term.logits.view());
            for (a, &d) in acc.iter_mut().zip(lengths) {
                a.push(f64::from(d) * c);
            }
        },
        |total, part| {
            for (t, p) in total.iter_mut().zip(&part) {
                t.merge(p);
            }
        },
    );
    Ok(acc.iter().map(LogSumExp::value).collect())
}

/// log Z(D) by the 2^F factorised sum.
pub fn exact_log_z(params: &RsmParams, bias: Option<&BiasOverride>, length: u32) -> Result<f64> {
    Ok(exact_log_z_many(params, bias, &[length])?[0])
}

/// Sequence-level log P(V) = -𝔉(V) - log Z(D).
pub fn exact_log_prob(params: &RsmParams, doc: &Document, bias: Option<&BiasOverride>) -> Result<f64> {
    let fe = rsm_core::free_energy(params, doc, bias)?;
    Ok(-fe - exact_log_z(params, bias, doc.len())?)
}

/// log P for many documents, computing each distinct length's Z once.
pub fn exact_log_probs(params: &RsmParams, docs: &[Document], bias: Option<&BiasOverride>) -> Result<Vec<f64>> {
    let log_z = log_z_by_length(params, bias, docs)?;
    docs.iter()
        .map(|doc| Ok(-rsm_core::free_energy(params, doc, bias)? - log_z[&doc.len()]))
        .collect()
}

fn log_z_by_length(
    params: &RsmParams,
    bias: Option<&BiasOverride>,
    docs: &[Document],
) -> Result<BTreeMap<u32, f64>> {
    let lengths: Vec<u32> = docs
        .iter()
        .map(Document::len)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let values = exact_log_z_many(params, bias, &lengths)?;
    Ok(lengths.into_iter().zip(values).collect())
}

/// log Σ_h exp(-E(V, h)) - log Z(D), summing energies directly over every
/// hidden configuration. Independent of the free-energy closed form.
pub fn direct_log_prob(params: &RsmParams, doc: &Document, bias: Option<&BiasOverride>) -> Result<f64> {
    ensure_enumerable(params.hidden_size())?;
    let f = params.hidden_size();
    let mut acc = LogSumExp::default();
    for index in 0..1u64 << f {
        acc.push(-rsm_core::energy(params, doc, &HiddenState::from_index(f, index), bias)?);
    }
    Ok(acc.value() - exact_log_z(params, bias, doc.len())?)
}

/// Every count vector reachable by a length-D word sequence over K words,
/// with the number of sequences producing it.
pub fn enumerate_sequences(vocab_size: usize, length: u32) -> Vec<(Document, f64)> {
    let mut out = Vec::new();
    let total = (vocab_size as u64).pow(length);
    for mut code in 0..total {
        let mut counts = vec![0u32; vocab_size];
        for _ in 0..length {
            counts[(code % vocab_size as u64) as usize] += 1;
            code /= vocab_size as u64;
        }
        out.push((Document::from_dense(&counts).expect("length ≥ 1"), 1.0));
    }
    out
}

/// log Z(D) by brute force over all K^D sequences and 2^F hidden states,
/// using the energy function directly. For cross-checking on tiny models.
pub fn brute_force_log_z(params: &RsmParams, bias: Option<&BiasOverride>, length: u32) -> Result<f64> {
    let (k, f) = (params.vocab_size(), params.hidden_size());
    let work = (k as f64).powi(length as i32) * (1u64 << f.min(63)) as f64;
    if work > 5e7 {
        return Err(Error::InvalidArgument(format!(
            "brute-force enumeration of {work:.0} terms refused"
        )));
    }
    let mut acc = LogSumExp::default();
    for (doc, _) in enumerate_sequences(k, length) {
        for index in 0..1u64 << f {
            acc.push(-rsm_core::energy(params, &doc, &HiddenState::from_index(f, index), bias)?);
        }
    }
    Ok(acc.value())
}

/// Model expectations for documents of one length D.
struct LengthMoments {
    /// E[v̂]
    visible: Array1<f64>,
    /// E[v̂ hᵀ]
    joint: Array2<f64>,
    /// E[h]
    hidden: Array1<f64>,
}

fn moments(params: &RsmParams, bias: Option<&BiasOverride>, length: u32, log_z: f64) -> LengthMoments {
    let (k, f) = (params.vocab_size(), params.hidden_size());
    let d = f64::from(length);
    let zero = || LengthMoments {
        visible: Array1::zeros(k),
        joint: Array2::zeros((k, f)),
        hidden: Array1::zeros(f),
    };
    enumerate_hidden(
        params,
        bias,
        zero,
        |acc, term| {
            let c = term.hidden_bias + log_sum_exp(term.logits.view());
            let weight = (d * c - log_z).exp();
            if weight == 0.0 {
                return;
            }
            let expected_counts = softmax(term.logits.view()) * (weight * d);
            acc.visible += &expected_counts;
            for j in (0..f).filter(|&j| term.is_on(j)) {
                acc.joint.column_mut(j).scaled_add(1.0, &expected_counts);
                acc.hidden[j] += weight;
            }
        },
        |total, part| {
            total.visible += &part.visible;
            total.joint += &part.joint;
            total.hidden += &part.hidden;
        },
    )
}

/// Exact ∇ Σ_n -ln P(V_n): data statistics minus model expectations, the
/// latter from the 2^F factorisation per distinct document length.
pub fn exact_rsm_gradient(params: &RsmParams, docs: &[Document], bias: Option<&BiasOverride>) -> Result<RsmGradient> {
    params.validate()?;
    ensure_enumerable(params.hidden_size())?;
    let mut grad = RsmGradient::zeros(params.vocab_size(), params.hidden_size());
    let mut multiplicity: BTreeMap<u32, f64> = BTreeMap::new();
    for doc in docs {
        let positive = rsm_core::hidden_activation(params, doc, bias)?;
        grad.accumulate(doc, &positive, -1.0);
        *multiplicity.entry(doc.len()).or_default() += 1.0;
    }
    let lengths: Vec<u32> = multiplicity.keys().copied().collect();
    let log_z = exact_log_z_many(params, bias, &lengths)?;
    for ((&length, &m), lz) in multiplicity.iter().zip(log_z) {
        let mom = moments(params, bias, length, lz);
        grad.b_v.scaled_add(m, &mom.visible);
        grad.w_vh.scaled_add(m, &mom.joint);
        grad.b_h.scaled_add(m * f64::from(length), &mom.hidden);
    }
    Ok(grad)
}

/// Σ_n -ln P(V_n) for one collection.
pub fn exact_collection_cost(params: &RsmParams, docs: &[Document], bias: Option<&BiasOverride>) -> Result<f64> {
    Ok(-exact_log_probs(params, docs, bias)?.iter().sum::<f64>())
}

/// Exact summary of a document collection under one set of biases.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    pub log_z_by_length: BTreeMap<u32, f64>,
    pub log_probs: Vec<f64>,
    pub gradient: RsmGradient,
}

pub fn evaluate(params: &RsmParams, docs: &[Document], bias: Option<&BiasOverride>) -> Result<ExactEvaluation> {
    let log_z_by_length = log_z_by_length(params, bias, docs)?;
    let log_probs = docs
        .iter()
        .map(|doc| Ok(-rsm_core::free_energy(params, doc, bias)? - log_z_by_length[&doc.len()]))
        .collect::<Result<_>>()?;
    Ok(ExactEvaluation {
        log_z_by_length,
        log_probs,
        gradient: exact_rsm_gradient(params, docs, bias)?,
    })
}

/// C = Σ_t Σ_n -ln P(V_n^(t)) under the forward-pass biases.
pub fn exact_sequence_cost(params: &RnnRsmParams, corpus: &TemporalCorpus) -> Result<f64> {
    let state = rnn_rsm::forward(params, corpus)?;
    let mut cost = 0.0;
    for (t, slice) in corpus.slices().iter().enumerate() {
        if !slice.is_empty() {
            cost += exact_collection_cost(&params.rsm, &slice.documents, Some(state.bias(t)))?;
        }
    }
    Ok(cost)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AisConfig {
    pub temperatures: usize,
    pub chains: usize,
}

impl Default for AisConfig {
    fn default() -> Self {
        Self {
            temperatures: 1000,
            chains: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AisEstimate {
    pub log_z: f64,
    /// Delta-method standard error of `log_z`.
    pub std_error: f64,
}

/// Annealed importance sampling estimate of log Z(D). Approximate.
///
/// Anneals from the model with W and b_h switched off (words i.i.d. from
/// softmax(b_v), hidden units uniform) to the full model along linearly
/// spaced inverse temperatures, with one Gibbs sweep per temperature.
pub fn estimate_log_z<R: Rng + ?Sized>(
    params: &RsmParams,
    bias: Option<&BiasOverride>,
    length: u32,
    config: AisConfig,
    rng: &mut R,
) -> Result<AisEstimate> {
    params.validate()?;
    if config.temperatures == 0 || config.chains == 0 || length == 0 {
        return Err(Error::InvalidArgument(
            "AIS needs at least one temperature, one chain and a positive length".into(),
        ));
    }
    let (b_v, b_h) = params.effective_biases(bias);
    let f = params.hidden_size();
    let d = f64::from(length);
    let log_z0 = f as f64 * std::f64::consts::LN_2 + d * log_sum_exp(b_v.view());
    let base = softmax(b_v.view());
    let betas: Vec<f64> = (0..=config.temperatures)
        .map(|m| m as f64 / config.temperatures as f64)
        .collect();

    let hidden_input = |doc: &Document| {
        let mut x = b_h * d;
        for &(k, c) in doc.counts() {
            x.scaled_add(f64::from(c), &params.w_vh.row(k as usize));
        }
        x
    };
    // log of the unnormalised marginal at inverse temperature beta
    let log_marginal = |doc: &Document, x: &Array1<f64>, beta: f64| {
        let visible: f64 = doc.counts().iter().map(|&(k, c)| f64::from(c) * b_v[k as usize]).sum();
        visible + x.iter().map(|&a| softplus(beta * a)).sum::<f64>()
    };

    let key = ChainKey::draw(rng);
    let log_weights: Vec<f64> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = key.chain(chain as u64);
            let mut doc = draw(&base, length, &mut rng);
            let mut log_w = 0.0;
            for pair in betas.windows(2) {
                let (prev, beta) = (pair[0], pair[1]);
                let x = hidden_input(&doc);
                log_w += log_marginal(&doc, &x, beta) - log_marginal(&doc, &x, prev);
                let mut logits = b_v.clone();
                for j in 0..f {
                    if rng.random::<f64>() < crate::math::sigmoid(beta * x[j]) {
                        logits.scaled_add(beta, &params.w_vh.column(j));
                    }
                }
                doc = draw(&softmax(logits.view()), length, &mut rng);
            }
            log_w
        })
        .collect();

    let mut acc = LogSumExp::default();
    for &w in &log_weights {
        acc.push(w);
    }
    let n = log_weights.len() as f64;
    let log_mean = acc.value() - n.ln();
    let normalized: Vec<f64> = log_weights.iter().map(|w| (w - log_mean).exp()).collect();
    let var = normalized.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(AisEstimate {
        log_z: log_z0 + log_mean,
        std_error: (var / n).sqrt(),
    })
}

fn draw<R: Rng + ?Sized>(probs: &Array1<f64>, length: u32, rng: &mut R) -> Document {
    use rand::distr::{weighted::WeightedIndex, Distribution};
    let dist = WeightedIndex::new(probs.iter().copied()).expect("valid weights");
    let mut counts = vec![0u32; probs.len()];
    for _ in 0..length {
        counts[dist.sample(rng)] += 1;
    }
    Document::from_dense(&counts).expect("length ≥ 1")
}

/// Outcome of a central finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Largest |analytic - numeric| / max(|analytic|, |numeric|, FD_SCALE_FLOOR).
    pub max_relative: f64,
    pub max_absolute: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Scale below which deviations are measured absolutely rather than relatively.
pub const FD_SCALE_FLOOR: f64 = 1e-6;

/// Compares `analytic` to central differences of `cost` around `point`,
/// coordinate by coordinate.
pub fn finite_difference_check<C>(cost: C, point: &[f64], analytic: &[f64], epsilon: f64) -> Result<FdReport>
where
    C: Fn(&[f64]) -> Result<f64>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(cost, point, analytic, epsilon, &all)
}

/// As [`finite_difference_check`] restricted to the listed coordinates.
pub fn finite_difference_check_at<C>(
    cost: C,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
    coordinates: &[usize],
) -> Result<FdReport>
where
    C: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    if point.len() != analytic.len() {
        return Err(Error::Dimension {
            context: "analytic gradient",
            expected: point.len(),
            actual: analytic.len(),
        });
    }
    let mut report = FdReport {
        max_relative: 0.0,
        max_absolute: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut x = point.to_vec();
    for &i in coordinates {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = cost(&x)?;
        x[i] = orig - epsilon;
        let minus = cost(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "cost is not finite around coordinate {i}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(FD_SCALE_FLOOR);
        if rel > report.max_relative || report.checked == 0 {
            report.max_relative = rel;
            report.worst_index = i;
        }
        report.max_absolute = report.max_absolute.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

/// Deviation at each epsilon; `too_large` when the deviation keeps growing
/// with epsilon past the best step, i.e. truncation error dominates.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonProbe {
    pub deviations: Vec<(f64, f64)>,
    pub too_large: bool,
}

pub fn probe_epsilon<C>(cost: C, point: &[f64], analytic: &[f64], epsilons: &[f64]) -> Result<EpsilonProbe>
where
    C: Fn(&[f64]) -> Result<f64>,
{
    let mut sorted = epsilons.to_vec();
    sorted.sort_by(f64::total_cmp);
    let deviations = sorted
        .iter()
        .map(|&eps| Ok((eps, finite_difference_check(&cost, point, analytic, eps)?.max_relative)))
        .collect::<Result<Vec<_>>>()?;
    // Below the best step round-off dominates, so only the tail is inspected.
    let best = deviations
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map_or(0, |(i, _)| i);
    let tail = &deviations[best..];
    let too_large = tail.len() >= 2
        && tail.windows(2).all(|w| w[1].1 >= w[0].1)
        && tail[tail.len() - 1].1 > 10.0 * tail[0].1.max(f64::EPSILON);
    Ok(EpsilonProbe { deviations, too_large })
}
