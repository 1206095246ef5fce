//! The recurrent RSM: a chain of RSMs whose biases come from a deterministic
//! recurrent state.
//!
//! ```text
//! b_v^(t) = b_v + W_uv u^(t-1)
//! b_h^(t) = b_h + W_uh u^(t-1)
//! u^(t)   = act(b_u + W_uu u^(t-1) + W_vu Σ_n v̂_n^(t))
//! ```
//!
//! Slice gradients with respect to b_v^(t), b_h^(t) and W_vh come from
//! contrastive divergence (or exact expectations on tiny models) and are
//! carried back through the recurrence.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, TemporalCorpus};
use crate::error::{check_dim, Error, Result};
use crate::exact_oracle;
use crate::math::sigmoid;
use crate::rsm_core::{self, BiasOverride, CdConfig, RsmGradient, RsmParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// The logistic recurrence with derivative u(1 - u).
    Logistic,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Logistic => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn derivative_from_output(self, u: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - u * u,
            Activation::Logistic => u * (1.0 - u),
        }
    }
}

/// Structural options of the recurrence; not trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recurrence {
    pub activation: Activation,
    /// Divide Σ_n v̂_n^(t) by N^(t) before it enters the recurrence.
    pub scale_visible_sum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnRsmParams {
    pub rsm: RsmParams,
    /// K×U
    pub w_uv: Array2<f64>,
    /// F×U
    pub w_uh: Array2<f64>,
    /// U×K
    pub w_vu: Array2<f64>,
    /// U×U
    pub w_uu: Array2<f64>,
    pub b_u: Array1<f64>,
    /// Initial recurrent state u^(0), learned.
    pub u0: Array1<f64>,
    pub recurrence: Recurrence,
}

/// Names of the trained tensors in their canonical order.
pub const TENSOR_NAMES: [&str; 9] = ["w_vh", "b_v", "b_h", "w_uv", "w_uh", "w_vu", "w_uu", "b_u", "u0"];

macro_rules! tensor_list {
    ($s:expr, $w_vh:expr, $b_v:expr, $b_h:expr, $method:ident) => {
        [
            $w_vh.$method(),
            $b_v.$method(),
            $b_h.$method(),
            $s.w_uv.$method(),
            $s.w_uh.$method(),
            $s.w_vu.$method(),
            $s.w_uu.$method(),
            $s.b_u.$method(),
            $s.u0.$method(),
        ]
    };
}

impl RnnRsmParams {
    pub fn zeros(vocab_size: usize, hidden: usize, recurrent: usize) -> Self {
        Self {
            rsm: RsmParams::zeros(vocab_size, hidden),
            w_uv: Array2::zeros((vocab_size, recurrent)),
            w_uh: Array2::zeros((hidden, recurrent)),
            w_vu: Array2::zeros((recurrent, vocab_size)),
            w_uu: Array2::zeros((recurrent, recurrent)),
            b_u: Array1::zeros(recurrent),
            u0: Array1::zeros(recurrent),
            recurrence: Recurrence::default(),
        }
    }

    /// Wraps trained RSM parameters with Gaussian(0, 0.01) recurrent
    /// weights, zero b_u and zero u^(0).
    pub fn with_rsm<R: Rng + ?Sized>(rsm: RsmParams, recurrent: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let (k, f) = (rsm.vocab_size(), rsm.hidden_size());
        let mut draw = |shape: (usize, usize)| Array2::from_shape_simple_fn(shape, || normal.sample(rng));
        let w_uv = draw((k, recurrent));
        let w_uh = draw((f, recurrent));
        let w_vu = draw((recurrent, k));
        let w_uu = draw((recurrent, recurrent));
        Self {
            rsm,
            w_uv,
            w_uh,
            w_vu,
            w_uu,
            b_u: Array1::zeros(recurrent),
            u0: Array1::zeros(recurrent),
            recurrence: Recurrence::default(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rsm.vocab_size()
    }

    pub fn hidden_size(&self) -> usize {
        self.rsm.hidden_size()
    }

    pub fn recurrent_size(&self) -> usize {
        self.b_u.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.rsm.validate()?;
        let (k, f, u) = (self.vocab_size(), self.hidden_size(), self.recurrent_size());
        check_dim("W_uv rows", k, self.w_uv.nrows())?;
        check_dim("W_uv cols", u, self.w_uv.ncols())?;
        check_dim("W_uh rows", f, self.w_uh.nrows())?;
        check_dim("W_uh cols", u, self.w_uh.ncols())?;
        check_dim("W_vu rows", u, self.w_vu.nrows())?;
        check_dim("W_vu cols", k, self.w_vu.ncols())?;
        check_dim("W_uu rows", u, self.w_uu.nrows())?;
        check_dim("W_uu cols", u, self.w_uu.ncols())?;
        check_dim("u0", u, self.u0.len())
    }

    /// Trained tensors as flat row-major slices, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 9] {
        tensor_list!(self, self.rsm.w_vh, self.rsm.b_v, self.rsm.b_h, as_slice)
            .map(|s| s.expect("standard layout"))
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        tensor_list!(self, self.rsm.w_vh, self.rsm.b_v, self.rsm.b_h, as_slice_mut)
            .map(|s| s.expect("standard layout"))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_parameters(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        TENSOR_NAMES
            .iter()
            .zip(self.tensors())
            .find(|(_, t)| t.iter().any(|x| !x.is_finite()))
            .map(|(name, _)| *name)
    }

    /// b_v + W_uv u, b_h + W_uh u.
    pub fn bias_override(&self, u_prev: ArrayView1<'_, f64>) -> BiasOverride {
        BiasOverride {
            b_v: &self.rsm.b_v + &self.w_uv.dot(&u_prev),
            b_h: &self.rsm.b_h + &self.w_uh.dot(&u_prev),
        }
    }
}

/// Forward-pass record over T slices.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledState {
    /// u^(0) … u^(T).
    pub u: Vec<Array1<f64>>,
    /// Bias override of slice t (0-based), computed from `u[t]`.
    pub bias_overrides: Vec<BiasOverride>,
    /// Raw Σ_n v̂_n per slice.
    pub slice_count_sums: Vec<Array1<f64>>,
    /// The vectors actually fed to the recurrence (scaled sums when enabled).
    pub recurrent_inputs: Vec<Array1<f64>>,
}

impl UnrolledState {
    pub fn num_slices(&self) -> usize {
        self.bias_overrides.len()
    }

    pub fn bias(&self, slice: usize) -> &BiasOverride {
        &self.bias_overrides[slice]
    }
}

pub fn forward(params: &RnnRsmParams, corpus: &TemporalCorpus) -> Result<UnrolledState> {
    check_dim("corpus vocabulary", params.vocab_size(), corpus.vocab_size())?;
    let sizes: Vec<usize> = corpus.slices().iter().map(|s| s.len()).collect();
    forward_from_sums(params, corpus.count_sums(), &sizes)
}

/// Forward pass from precomputed per-slice count sums and document counts.
pub fn forward_from_sums(
    params: &RnnRsmParams,
    sums: Vec<Array1<f64>>,
    doc_counts: &[usize],
) -> Result<UnrolledState> {
    params.validate()?;
    check_dim("slice document counts", sums.len(), doc_counts.len())?;
    let activation = params.recurrence.activation;
    let mut u = Vec::with_capacity(sums.len() + 1);
    u.push(params.u0.clone());
    let mut bias_overrides = Vec::with_capacity(sums.len());
    let mut recurrent_inputs = Vec::with_capacity(sums.len());
    for (sum, &n) in sums.iter().zip(doc_counts) {
        check_dim("slice count sum", params.vocab_size(), sum.len())?;
        let prev = u.last().expect("u0 present");
        bias_overrides.push(params.bias_override(prev.view()));
        let input = if params.recurrence.scale_visible_sum {
            if n == 0 {
                Array1::zeros(sum.len())
            } else {
                sum / n as f64
            }
        } else {
            sum.clone()
        };
        let pre = &params.b_u + &params.w_uu.dot(prev) + &params.w_vu.dot(&input);
        u.push(pre.mapv_into(|x| activation.apply(x)));
        recurrent_inputs.push(input);
    }
    Ok(UnrolledState {
        u,
        bias_overrides,
        slice_count_sums: sums,
        recurrent_inputs,
    })
}

/// Applies the tanh Jacobian at output `u_next`: upstream ⊙ (1 - u_next²).
pub fn tanh_backward(u_next: &Array1<f64>, upstream: &Array1<f64>) -> Array1<f64> {
    activation_backward(Activation::Tanh, u_next, upstream)
}

pub fn activation_backward(activation: Activation, output: &Array1<f64>, upstream: &Array1<f64>) -> Array1<f64> {
    upstream * &output.mapv(|u| activation.derivative_from_output(u))
}

/// How slice gradients with respect to the RSM parameters are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceEstimator {
    ContrastiveDivergence(CdConfig),
    /// Exact model expectations by hidden-state enumeration; tiny models only.
    Exact,
}

/// Gradient for every trained tensor, plus the per-slice bias gradients
/// ∂C_t/∂b_v^(t) and ∂C_t/∂b_h^(t) that fed the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnRsmGradient {
    pub w_vh: Array2<f64>,
    pub b_v: Array1<f64>,
    pub b_h: Array1<f64>,
    pub w_uv: Array2<f64>,
    pub w_uh: Array2<f64>,
    pub w_vu: Array2<f64>,
    pub w_uu: Array2<f64>,
    pub b_u: Array1<f64>,
    pub u0: Array1<f64>,
    pub slice_b_v: Vec<Array1<f64>>,
    pub slice_b_h: Vec<Array1<f64>>,
}

impl RnnRsmGradient {
    pub fn tensors(&self) -> [&[f64]; 9] {
        tensor_list!(self, self.w_vh, self.b_v, self.b_h, as_slice).map(|s| s.expect("standard layout"))
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 9] {
        tensor_list!(self, self.w_vh, self.b_v, self.b_h, as_slice_mut).map(|s| s.expect("standard layout"))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

/// Carries per-slice RSM gradients back through the recurrence.
///
/// `slice_grads[t]` holds ∂C_t/∂W_vh, ∂C_t/∂b_v^(t), ∂C_t/∂b_h^(t) for slice t.
pub fn backpropagate(
    params: &RnnRsmParams,
    state: &UnrolledState,
    slice_grads: &[RsmGradient],
) -> Result<RnnRsmGradient> {
    let t_len = state.num_slices();
    check_dim("slice gradients", t_len, slice_grads.len())?;
    let activation = params.recurrence.activation;
    let (k, f, u) = (params.vocab_size(), params.hidden_size(), params.recurrent_size());

    // pre[t]: gradient at the pre-activation producing u^(t+1).
    let mut pre = vec![Array1::zeros(u); t_len];
    let mut delta = Array1::zeros(u);
    for t in (0..t_len).rev() {
        pre[t] = activation_backward(activation, &state.u[t + 1], &delta);
        let g = &slice_grads[t];
        delta = params.w_uv.t().dot(&g.b_v) + params.w_uh.t().dot(&g.b_h) + params.w_uu.t().dot(&pre[t]);
    }

    let mut grad = RnnRsmGradient {
        w_vh: Array2::zeros((k, f)),
        b_v: Array1::zeros(k),
        b_h: Array1::zeros(f),
        w_uv: Array2::zeros((k, u)),
        w_uh: Array2::zeros((f, u)),
        w_vu: Array2::zeros((u, k)),
        w_uu: Array2::zeros((u, u)),
        b_u: Array1::zeros(u),
        u0: delta,
        slice_b_v: Vec::with_capacity(t_len),
        slice_b_h: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        let g = &slice_grads[t];
        let u_prev = state.u[t].view();
        grad.w_vh += &g.w_vh;
        grad.b_v += &g.b_v;
        grad.b_h += &g.b_h;
        add_outer(&mut grad.w_uv, g.b_v.view(), u_prev);
        add_outer(&mut grad.w_uh, g.b_h.view(), u_prev);
        grad.b_u += &pre[t];
        add_outer(&mut grad.w_uu, pre[t].view(), u_prev);
        add_outer(&mut grad.w_vu, pre[t].view(), state.recurrent_inputs[t].view());
        grad.slice_b_v.push(g.b_v.clone());
        grad.slice_b_h.push(g.b_h.clone());
    }
    Ok(grad)
}

fn add_outer(target: &mut Array2<f64>, left: ArrayView1<'_, f64>, right: ArrayView1<'_, f64>) {
    for (mut row, &l) in target.rows_mut().into_iter().zip(left.iter()) {
        if l != 0.0 {
            row.scaled_add(l, &right);
        }
    }
}

/// Result of one gradient pass over the sequence.
#[derive(Debug, Clone)]
pub struct SequenceGradient {
    pub gradient: RnnRsmGradient,
    /// Fraction of words moved by the CD reconstructions; absent in exact mode.
    pub reconstruction_error: Option<f64>,
}

/// Gradient of Σ_t -ln P(V̂^(t)) with respect to all trained tensors.
pub fn sequence_gradient<R: Rng + ?Sized>(
    params: &RnnRsmParams,
    corpus: &TemporalCorpus,
    estimator: SliceEstimator,
    rng: &mut R,
) -> Result<RnnRsmGradient> {
    let state = forward(params, corpus)?;
    let batches: Vec<&[Document]> = corpus.slices().iter().map(|s| s.documents.as_slice()).collect();
    Ok(sequence_gradient_batch(params, &state, &batches, estimator, rng)?.gradient)
}

/// As [`sequence_gradient`] but over a chosen subset of documents per slice,
/// with the recurrence driven by a precomputed forward state.
pub fn sequence_gradient_batch<R: Rng + ?Sized>(
    params: &RnnRsmParams,
    state: &UnrolledState,
    batches: &[&[Document]],
    estimator: SliceEstimator,
    rng: &mut R,
) -> Result<SequenceGradient> {
    check_dim("document batches", state.num_slices(), batches.len())?;
    let (k, f) = (params.vocab_size(), params.hidden_size());
    let mut slice_grads = Vec::with_capacity(batches.len());
    let mut moved = 0.0;
    let mut words = 0.0;
    for (t, docs) in batches.iter().enumerate() {
        if docs.is_empty() {
            slice_grads.push(RsmGradient::zeros(k, f));
            continue;
        }
        let bias = Some(state.bias(t));
        let g = match estimator {
            SliceEstimator::ContrastiveDivergence(cfg) => {
                let negatives = rsm_core::cd_negatives(&params.rsm, docs, bias, cfg, rng)?;
                let n_words: f64 = docs.iter().map(|d| f64::from(d.len())).sum();
                moved += rsm_core::reconstruction_error(docs, &negatives) * n_words;
                words += n_words;
                rsm_core::gradient_from_negatives(&params.rsm, docs, &negatives, bias)?
            }
            SliceEstimator::Exact => exact_oracle::exact_rsm_gradient(&params.rsm, docs, bias)?,
        };
        slice_grads.push(g);
    }
    let reconstruction_error = match estimator {
        SliceEstimator::ContrastiveDivergence(_) if words > 0.0 => Some(moved / words),
        SliceEstimator::ContrastiveDivergence(_) => Some(0.0),
        SliceEstimator::Exact => None,
    };
    Ok(SequenceGradient {
        gradient: backpropagate(params, state, &slice_grads)?,
        reconstruction_error,
    })
}

/// Returns an error naming the tensor if any entry is NaN or infinite.
pub fn ensure_finite(params: &RnnRsmParams, epoch: usize) -> Result<()> {
    match params.first_non_finite() {
        Some(name) => Err(Error::NonFinite {
            parameter: name.to_string(),
            epoch,
        }),
        None => Ok(()),
    }
}
