//! The Replicated Softmax Model.
//!
//! A document of length D is D draws from one softmax over the vocabulary,
//! all sharing the weights to F binary hidden units. The energy is
//!
//! ```text
//! E(V, h) = -Σ_jk h_j W_kj v̂_k - Σ_k v̂_k b_v,k - D Σ_j b_h,j h_j
//! ```
//!
//! so the hidden bias is scaled by document length everywhere it appears.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use rayon::prelude::*;

use crate::corpus::Document;
use crate::error::{check_dim, Error, Result};
use crate::math::{sigmoid, softmax, softplus};
use crate::rng::ChainKey;

/// Shared word-topic weights and base biases.
#[derive(Debug, Clone, PartialEq)]
pub struct RsmParams {
    /// K×F, word k to hidden unit j.
    pub w_vh: Array2<f64>,
    pub b_v: Array1<f64>,
    pub b_h: Array1<f64>,
}

impl RsmParams {
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        Self {
            w_vh: Array2::zeros((vocab_size, hidden)),
            b_v: Array1::zeros(vocab_size),
            b_h: Array1::zeros(hidden),
        }
    }

    /// Gaussian(0, 0.01) weights, zero biases.
    pub fn random<R: Rng + ?Sized>(vocab_size: usize, hidden: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let w_vh = Array2::from_shape_simple_fn((vocab_size, hidden), || normal.sample(rng));
        Self {
            w_vh,
            b_v: Array1::zeros(vocab_size),
            b_h: Array1::zeros(hidden),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.w_vh.nrows()
    }

    pub fn hidden_size(&self) -> usize {
        self.w_vh.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        check_dim("visible bias", self.vocab_size(), self.b_v.len())?;
        check_dim("hidden bias", self.hidden_size(), self.b_h.len())
    }

    fn check_doc(&self, doc: &Document) -> Result<()> {
        match doc.max_id() {
            Some(max) if max as usize >= self.vocab_size() => Err(Error::Dimension {
                context: "document term id",
                expected: self.vocab_size(),
                actual: max as usize + 1,
            }),
            _ => Ok(()),
        }
    }

    fn check_bias(&self, bias: Option<&BiasOverride>) -> Result<()> {
        if let Some(b) = bias {
            check_dim("visible bias override", self.vocab_size(), b.b_v.len())?;
            check_dim("hidden bias override", self.hidden_size(), b.b_h.len())?;
        }
        Ok(())
    }

    /// The biases in force: the override when supplied, else the base biases.
    pub fn effective_biases<'a>(
        &'a self,
        bias: Option<&'a BiasOverride>,
    ) -> (&'a Array1<f64>, &'a Array1<f64>) {
        match bias {
            Some(b) => (&b.b_v, &b.b_h),
            None => (&self.b_v, &self.b_h),
        }
    }

    /// Wᵀv̂ accumulated over the sparse counts.
    fn hidden_input(&self, doc: &Document) -> Array1<f64> {
        let mut x = Array1::zeros(self.hidden_size());
        for &(k, c) in doc.counts() {
            x.scaled_add(f64::from(c), &self.w_vh.row(k as usize));
        }
        x
    }
}

/// Per-slice biases b_v^(t), b_h^(t) replacing the base biases.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasOverride {
    pub b_v: Array1<f64>,
    pub b_h: Array1<f64>,
}

/// A binary hidden configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HiddenState {
    bits: Vec<bool>,
}

impl HiddenState {
    pub fn new(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(hidden: usize) -> Self {
        Self::new(vec![false; hidden])
    }

    pub fn one_hot(hidden: usize, j: usize) -> Self {
        let mut bits = vec![false; hidden];
        bits[j] = true;
        Self::new(bits)
    }

    /// The configuration whose bit j is bit j of `index`.
    pub fn from_index(hidden: usize, index: u64) -> Self {
        Self::new((0..hidden).map(|j| index >> j & 1 == 1).collect())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_array(&self) -> Array1<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// P(h_j = 1 | V) = σ(D·b_h,j + Σ_k v̂_k W_kj).
pub fn hidden_activation(
    params: &RsmParams,
    doc: &Document,
    bias: Option<&BiasOverride>,
) -> Result<Array1<f64>> {
    params.check_doc(doc)?;
    params.check_bias(bias)?;
    Ok(hidden_probabilities(params, doc, bias))
}

fn hidden_probabilities(params: &RsmParams, doc: &Document, bias: Option<&BiasOverride>) -> Array1<f64> {
    let (_, b_h) = params.effective_biases(bias);
    let d = f64::from(doc.len());
    let mut x = params.hidden_input(doc);
    x.scaled_add(d, b_h);
    x.mapv_into(sigmoid)
}

/// b_v + W h for a binary hidden state.
pub fn visible_logits(
    params: &RsmParams,
    h: &HiddenState,
    bias: Option<&BiasOverride>,
) -> Result<Array1<f64>> {
    check_dim("hidden state", params.hidden_size(), h.len())?;
    params.check_bias(bias)?;
    let (b_v, _) = params.effective_biases(bias);
    let mut logits = b_v.clone();
    for (j, _) in h.bits().iter().enumerate().filter(|(_, &b)| b) {
        logits += &params.w_vh.column(j);
    }
    Ok(logits)
}

/// The softmax over words given a hidden configuration.
pub fn visible_distribution(
    params: &RsmParams,
    h: &HiddenState,
    bias: Option<&BiasOverride>,
) -> Result<Array1<f64>> {
    Ok(softmax(visible_logits(params, h, bias)?.view()))
}

fn draw_words<R: Rng + ?Sized>(probs: &Array1<f64>, length: u32, rng: &mut R) -> Document {
    let dist = WeightedIndex::new(probs.iter().copied()).expect("softmax output is a valid weight vector");
    let mut counts = vec![0u32; probs.len()];
    for _ in 0..length {
        counts[dist.sample(rng)] += 1;
    }
    Document::from_dense(&counts).expect("at least one word drawn")
}

/// Draws `length` i.i.d. words from the visible distribution.
pub fn sample_document<R: Rng + ?Sized>(
    params: &RsmParams,
    h: &HiddenState,
    length: u32,
    bias: Option<&BiasOverride>,
    rng: &mut R,
) -> Result<Document> {
    if length == 0 {
        return Err(Error::InvalidArgument("document length must be at least 1".into()));
    }
    let probs = visible_distribution(params, h, bias)?;
    Ok(draw_words(&probs, length, rng))
}

/// 𝔉(V) = -Σ_k v̂_k b_v,k - Σ_j log(1 + exp(D b_h,j + Σ_k v̂_k W_kj)).
pub fn free_energy(params: &RsmParams, doc: &Document, bias: Option<&BiasOverride>) -> Result<f64> {
    params.check_doc(doc)?;
    params.check_bias(bias)?;
    Ok(free_energy_unchecked(params, doc, bias))
}

pub(crate) fn free_energy_unchecked(
    params: &RsmParams,
    doc: &Document,
    bias: Option<&BiasOverride>,
) -> f64 {
    let (b_v, b_h) = params.effective_biases(bias);
    let d = f64::from(doc.len());
    let visible: f64 = doc
        .counts()
        .iter()
        .map(|&(k, c)| f64::from(c) * b_v[k as usize])
        .sum();
    let mut x = params.hidden_input(doc);
    x.scaled_add(d, b_h);
    -visible - x.iter().map(|&a| softplus(a)).sum::<f64>()
}

/// E(V, h) for one document and one hidden configuration.
pub fn energy(
    params: &RsmParams,
    doc: &Document,
    h: &HiddenState,
    bias: Option<&BiasOverride>,
) -> Result<f64> {
    params.check_doc(doc)?;
    params.check_bias(bias)?;
    check_dim("hidden state", params.hidden_size(), h.len())?;
    let (b_v, b_h) = params.effective_biases(bias);
    let d = f64::from(doc.len());
    let hv = h.to_array();
    let mut e = 0.0;
    for &(k, c) in doc.counts() {
        let c = f64::from(c);
        e -= c * params.w_vh.row(k as usize).dot(&hv);
        e -= c * b_v[k as usize];
    }
    e -= d * b_h.dot(&hv);
    Ok(e)
}

/// Gradient of a cost with respect to W_vh and the biases in force.
#[derive(Debug, Clone, PartialEq)]
pub struct RsmGradient {
    pub w_vh: Array2<f64>,
    pub b_v: Array1<f64>,
    pub b_h: Array1<f64>,
}

impl RsmGradient {
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        Self {
            w_vh: Array2::zeros((vocab_size, hidden)),
            b_v: Array1::zeros(vocab_size),
            b_h: Array1::zeros(hidden),
        }
    }

    pub fn add_assign(&mut self, other: &RsmGradient) {
        self.w_vh += &other.w_vh;
        self.b_v += &other.b_v;
        self.b_h += &other.b_h;
    }

    /// Adds `scale · (v̂ ⊗ hidden_stat)`, `scale · v̂` and `scale · D · hidden_stat`.
    pub(crate) fn accumulate(&mut self, doc: &Document, hidden_stat: &Array1<f64>, scale: f64) {
        for &(k, c) in doc.counts() {
            let c = scale * f64::from(c);
            self.w_vh.row_mut(k as usize).scaled_add(c, hidden_stat);
            self.b_v[k as usize] += c;
        }
        self.b_h.scaled_add(scale * f64::from(doc.len()), hidden_stat);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdConfig {
    pub k_steps: usize,
    /// Use hidden probabilities rather than a sample for the final negative statistics.
    pub mean_field_final: bool,
}

impl CdConfig {
    pub fn new(k_steps: usize) -> Self {
        Self {
            k_steps,
            mean_field_final: true,
        }
    }
}

/// One negative sample: the reconstructed document and its hidden statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct Negative {
    pub visible: Document,
    pub hidden: Array1<f64>,
}

fn sample_bits<R: Rng + ?Sized>(probs: &Array1<f64>, rng: &mut R) -> HiddenState {
    HiddenState::new(probs.iter().map(|&p| rng.random::<f64>() < p).collect())
}

fn run_chain<R: Rng + ?Sized>(
    params: &RsmParams,
    doc: &Document,
    bias: Option<&BiasOverride>,
    config: CdConfig,
    rng: &mut R,
) -> Negative {
    let mut visible = doc.clone();
    for _ in 0..config.k_steps {
        let p = hidden_probabilities(params, &visible, bias);
        let h = sample_bits(&p, rng);
        let logits = visible_logits(params, &h, bias).expect("dimensions checked");
        visible = draw_words(&softmax(logits.view()), doc.len(), rng);
    }
    let p = hidden_probabilities(params, &visible, bias);
    let hidden = if config.mean_field_final {
        p
    } else {
        sample_bits(&p, rng).to_array()
    };
    Negative { visible, hidden }
}

/// Runs one k-step Gibbs chain per document, each started at the data and
/// resampling all D_n words as one multinomial draw per step.
pub fn cd_negatives<R: Rng + ?Sized>(
    params: &RsmParams,
    docs: &[Document],
    bias: Option<&BiasOverride>,
    config: CdConfig,
    rng: &mut R,
) -> Result<Vec<Negative>> {
    if config.k_steps == 0 {
        return Err(Error::InvalidArgument("contrastive divergence needs k ≥ 1".into()));
    }
    params.validate()?;
    params.check_bias(bias)?;
    for doc in docs {
        params.check_doc(doc)?;
    }
    let key = ChainKey::draw(rng);
    Ok(docs
        .par_iter()
        .enumerate()
        .map(|(n, doc)| run_chain(params, doc, bias, config, &mut key.chain(n as u64)))
        .collect())
}

/// Gradient of Σ_n [𝔉(V_n) - 𝔉(V_n*)] given explicit negatives: the
/// contrastive-divergence estimate of ∇ Σ_n -ln P(V_n).
pub fn gradient_from_negatives(
    params: &RsmParams,
    docs: &[Document],
    negatives: &[Negative],
    bias: Option<&BiasOverride>,
) -> Result<RsmGradient> {
    check_dim("negative samples", docs.len(), negatives.len())?;
    params.check_bias(bias)?;
    let positive: Vec<Array1<f64>> = docs
        .par_iter()
        .map(|doc| hidden_probabilities(params, doc, bias))
        .collect();
    let mut grad = RsmGradient::zeros(params.vocab_size(), params.hidden_size());
    for ((doc, pos), neg) in docs.iter().zip(&positive).zip(negatives) {
        check_dim("negative hidden statistic", params.hidden_size(), neg.hidden.len())?;
        grad.accumulate(&neg.visible, &neg.hidden, 1.0);
        grad.accumulate(doc, pos, -1.0);
    }
    Ok(grad)
}

/// CD-k gradient estimate, summed over documents.
pub fn cd_gradient<R: Rng + ?Sized>(
    params: &RsmParams,
    docs: &[Document],
    bias: Option<&BiasOverride>,
    config: CdConfig,
    rng: &mut R,
) -> Result<RsmGradient> {
    let negatives = cd_negatives(params, docs, bias, config, rng)?;
    gradient_from_negatives(params, docs, &negatives, bias)
}

/// Fraction of word occurrences that differ between data and reconstructions.
pub fn reconstruction_error(docs: &[Document], negatives: &[Negative]) -> f64 {
    let mut moved = 0.0;
    let mut total = 0.0;
    for (doc, neg) in docs.iter().zip(negatives) {
        let mut diff = 0i64;
        let (a, b) = (doc.counts(), neg.visible.counts());
        let (mut i, mut j) = (0, 0);
        while i < a.len() || j < b.len() {
            match (a.get(i), b.get(j)) {
                (Some(&(ka, ca)), Some(&(kb, cb))) if ka == kb => {
                    diff += (i64::from(ca) - i64::from(cb)).abs();
                    i += 1;
                    j += 1;
                }
                (Some(&(ka, ca)), Some(&(kb, _))) if ka < kb => {
                    diff += i64::from(ca);
                    i += 1;
                }
                (Some(&(_, ca)), None) => {
                    diff += i64::from(ca);
                    i += 1;
                }
                (_, Some(&(_, cb))) => {
                    diff += i64::from(cb);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        moved += diff as f64 / 2.0;
        total += f64::from(doc.len());
    }
    if total == 0.0 {
        0.0
    } else {
        moved / total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ChainRng;
    use ndarray::array;
    use rand::SeedableRng;

    fn doc(pairs: &[(u32, u32)]) -> Document {
        Document::from_counts(pairs.iter().copied()).unwrap()
    }

    #[test]
    fn zero_params_give_half_activation() {
        let p = RsmParams::zeros(4, 3);
        let a = hidden_activation(&p, &doc(&[(1, 3), (2, 1)]), None).unwrap();
        assert_eq!(a, array![0.5, 0.5, 0.5]);
    }

    #[test]
    fn log_three_weight_gives_three_quarters() {
        let mut p = RsmParams::zeros(3, 2);
        p.w_vh[[0, 1]] = 3f64.ln();
        let a = hidden_activation(&p, &doc(&[(0, 1)]), None).unwrap();
        assert!((a[1] - 0.75).abs() < 1e-15);
        assert_eq!(a[0], 0.5);
    }

    #[test]
    fn saturated_override_switches_units_off() {
        let p = RsmParams::zeros(3, 2);
        let bias = BiasOverride {
            b_v: Array1::zeros(3),
            b_h: Array1::from_elem(2, -1e9),
        };
        let a = hidden_activation(&p, &doc(&[(0, 2)]), Some(&bias)).unwrap();
        assert!(a.iter().all(|&x| x < 1e-12));
    }

    #[test]
    fn hidden_bias_scales_with_length() {
        let mut p = RsmParams::zeros(2, 1);
        p.b_h[0] = 0.3;
        let short = hidden_activation(&p, &doc(&[(0, 1)]), None).unwrap()[0];
        let long = hidden_activation(&p, &doc(&[(0, 2)]), None).unwrap()[0];
        assert!((short - sigmoid(0.3)).abs() < 1e-15);
        assert!((long - sigmoid(0.6)).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = RsmParams::zeros(2, 2);
        assert!(matches!(
            hidden_activation(&p, &doc(&[(5, 1)]), None),
            Err(Error::Dimension { .. })
        ));
        assert!(visible_distribution(&p, &HiddenState::zeros(3), None).is_err());
    }

    #[test]
    fn visible_distribution_cases() {
        let p = RsmParams::zeros(5, 2);
        let uniform = visible_distribution(&p, &HiddenState::zeros(2), None).unwrap();
        assert!(uniform.iter().all(|&x| (x - 0.2).abs() < 1e-15));

        let mut p = RsmParams::zeros(2, 1);
        p.b_v = array![2f64.ln(), 0.0];
        let d = visible_distribution(&p, &HiddenState::zeros(1), None).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((d[1] - 1.0 / 3.0).abs() < 1e-15);

        let mut shifted = p.clone();
        shifted.b_v += 17.0;
        let d2 = visible_distribution(&shifted, &HiddenState::zeros(1), None).unwrap();
        assert!((&d - &d2).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn sample_point_mass_and_determinism() {
        let mut p = RsmParams::zeros(4, 1);
        p.b_v[2] = 1e9;
        let mut rng = ChainRng::seed_from_u64(3);
        let d = sample_document(&p, &HiddenState::zeros(1), 7, None, &mut rng).unwrap();
        assert_eq!(d.counts(), &[(2, 7)]);
        assert!(sample_document(&p, &HiddenState::zeros(1), 0, None, &mut rng).is_err());

        let q = RsmParams::zeros(6, 1);
        let a = sample_document(&q, &HiddenState::zeros(1), 50, None, &mut ChainRng::seed_from_u64(9)).unwrap();
        let b = sample_document(&q, &HiddenState::zeros(1), 50, None, &mut ChainRng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sample_is_binomial() {
        let p = RsmParams::zeros(2, 1);
        let n = 100_000u32;
        let d = sample_document(&p, &HiddenState::zeros(1), n, None, &mut ChainRng::seed_from_u64(1)).unwrap();
        let sigma = (f64::from(n) * 0.25).sqrt();
        for k in 0..2 {
            assert!((f64::from(d.count(k)) - f64::from(n) / 2.0).abs() < 5.0 * sigma);
        }
    }

    #[test]
    fn free_energy_closed_forms() {
        let p = RsmParams::zeros(3, 4);
        let fe = free_energy(&p, &doc(&[(0, 2), (2, 1)]), None).unwrap();
        assert!((fe + 4.0 * 2f64.ln()).abs() < 1e-14);

        let mut p = RsmParams::zeros(3, 2);
        let c = 0.4;
        p.b_h.fill(c);
        let d = doc(&[(1, 3)]);
        let expected = -2.0 * (1.0 + (3.0 * c).exp()).ln();
        assert!((free_energy(&p, &d, None).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn free_energy_survives_huge_activations() {
        let mut p = RsmParams::zeros(2, 1);
        p.w_vh[[0, 0]] = 1e6;
        let fe = free_energy(&p, &doc(&[(0, 1)]), None).unwrap();
        assert!(fe.is_finite());
        assert!((fe + 1e6).abs() < 1e-6);
    }

    #[test]
    fn negatives_equal_to_data_give_zero_gradient() {
        let mut rng = ChainRng::seed_from_u64(5);
        let p = RsmParams::random(5, 3, &mut rng);
        let docs = vec![doc(&[(0, 2), (4, 1)]), doc(&[(3, 5)])];
        let negatives: Vec<Negative> = docs
            .iter()
            .map(|d| Negative {
                visible: d.clone(),
                hidden: hidden_activation(&p, d, None).unwrap(),
            })
            .collect();
        let g = gradient_from_negatives(&p, &docs, &negatives, None).unwrap();
        assert!(g.w_vh.iter().chain(&g.b_v).chain(&g.b_h).all(|&x| x == 0.0));
    }

    #[test]
    fn cd_bias_gradient_is_bounded_by_length() {
        let mut rng = ChainRng::seed_from_u64(11);
        let p = RsmParams::random(6, 3, &mut rng);
        let d = doc(&[(0, 3), (5, 2)]);
        for _ in 0..20 {
            let g = cd_gradient(&p, std::slice::from_ref(&d), None, CdConfig::new(3), &mut rng).unwrap();
            assert!(g.b_v.iter().all(|&x| x.abs() <= 5.0));
            assert!((g.b_v.sum()).abs() < 1e-12);
        }
        assert!(cd_gradient(&p, &[d], None, CdConfig::new(0), &mut rng).is_err());
    }

    #[test]
    fn cd_is_deterministic_under_seed() {
        let mut init = ChainRng::seed_from_u64(2);
        let p = RsmParams::random(8, 4, &mut init);
        let docs: Vec<Document> = (0..12).map(|i| doc(&[(i % 8, 2), ((i + 3) % 8, 1)])).collect();
        let a = cd_gradient(&p, &docs, None, CdConfig::new(5), &mut ChainRng::seed_from_u64(4)).unwrap();
        let b = cd_gradient(&p, &docs, None, CdConfig::new(5), &mut ChainRng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reconstruction_error_counts_moved_words() {
        let data = vec![doc(&[(0, 2), (1, 2)])];
        let neg = vec![Negative {
            visible: doc(&[(0, 1), (2, 3)]),
            hidden: Array1::zeros(1),
        }];
        // one word stays at 0, the rest moved: 3 of 4
        assert!((reconstruction_error(&data, &neg) - 0.75).abs() < 1e-15);
    }
}
