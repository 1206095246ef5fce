//! Reference computations written directly from the model definitions, kept
//! separate from the library code they check.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempora_core::corpus::Document;
use tempora_core::rsm_core::{BiasOverride, RsmParams};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_rsm(k: usize, f: usize, scale: f64, rng: &mut impl Rng) -> RsmParams {
    let mut p = RsmParams::zeros(k, f);
    p.w_vh.mapv_inplace(|_| rng.random_range(-scale..scale));
    p.b_v.mapv_inplace(|_| rng.random_range(-scale..scale));
    p.b_h.mapv_inplace(|_| rng.random_range(-scale..scale));
    p
}

pub fn random_doc(k: usize, len: u32, rng: &mut impl Rng) -> Document {
    let words: Vec<(u32, u32)> = (0..len).map(|_| (rng.random_range(0..k as u32), 1)).collect();
    Document::from_counts(words).unwrap()
}

pub fn biases<'a>(p: &'a RsmParams, bias: Option<&'a BiasOverride>) -> (&'a Array1<f64>, &'a Array1<f64>) {
    match bias {
        Some(b) => (&b.b_v, &b.b_h),
        None => (&p.b_v, &p.b_h),
    }
}

pub fn dense(doc: &Document, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    for &(i, c) in doc.counts() {
        v[i as usize] = f64::from(c);
    }
    v
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// -E(V, h) for a document given as counts.
pub fn neg_energy(w: &Array2<f64>, b_v: &Array1<f64>, b_h: &Array1<f64>, v: &[f64], h: &[f64]) -> f64 {
    let d: f64 = v.iter().sum();
    let mut e = 0.0;
    for k in 0..v.len() {
        for j in 0..h.len() {
            e += h[j] * w[[k, j]] * v[k];
        }
        e += v[k] * b_v[k];
    }
    for j in 0..h.len() {
        e += d * b_h[j] * h[j];
    }
    e
}

fn bits(f: usize, idx: usize) -> Vec<f64> {
    (0..f).map(|j| ((idx >> j) & 1) as f64).collect()
}

/// log Σ_h exp(-E(V, h)).
pub fn ref_log_unnormalized(p: &RsmParams, bias: Option<&BiasOverride>, v: &[f64]) -> f64 {
    let (b_v, b_h) = biases(p, bias);
    let f = p.b_h.len();
    let terms: Vec<f64> = (0..1usize << f)
        .map(|i| neg_energy(&p.w_vh, b_v, b_h, v, &bits(f, i)))
        .collect();
    log_sum_exp(&terms)
}

/// Every ordered word sequence of length `d` over `k` words, as count vectors.
pub fn sequences(k: usize, d: u32) -> Vec<Vec<f64>> {
    let total = k.pow(d);
    (0..total)
        .map(|mut code| {
            let mut v = vec![0.0; k];
            for _ in 0..d {
                v[code % k] += 1.0;
                code /= k;
            }
            v
        })
        .collect()
}

/// log Z(D) summing over all K^D sequences and 2^F hidden states.
pub fn ref_log_z(p: &RsmParams, bias: Option<&BiasOverride>, d: u32) -> f64 {
    let k = p.b_v.len();
    let terms: Vec<f64> = sequences(k, d)
        .iter()
        .map(|v| ref_log_unnormalized(p, bias, v))
        .collect();
    log_sum_exp(&terms)
}

/// Central differences of `cost` at every coordinate of `x`.
pub fn central_difference(cost: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = y[i];
            y[i] = orig + eps;
            let plus = cost(&y);
            y[i] = orig - eps;
            let minus = cost(&y);
            y[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// max_i |a_i - n_i| / max(|a_i|, |n_i|, floor).
pub fn max_relative(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn rsm_flat(p: &RsmParams) -> Vec<f64> {
    p.w_vh.iter().chain(p.b_v.iter()).chain(p.b_h.iter()).copied().collect()
}

pub fn rsm_from_flat(k: usize, f: usize, x: &[f64]) -> RsmParams {
    let mut p = RsmParams::zeros(k, f);
    p.w_vh = Array2::from_shape_vec((k, f), x[..k * f].to_vec()).unwrap();
    p.b_v = Array1::from(x[k * f..k * f + k].to_vec());
    p.b_h = Array1::from(x[k * f + k..].to_vec());
    p
}
