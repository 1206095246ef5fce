mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::*;
use ndarray::array;
use proptest::prelude::*;
use rand::Rng;
use tempora_core::corpus::{Document, TemporalCorpus, TimeSlice, Vocabulary};
use tempora_core::exact_oracle;
use tempora_core::metrics::{self, CooccurrenceTable, LogZCache, PerplexityNorm, ZMode};
use tempora_core::rnn_rsm::{self, RnnRsmParams};
use tempora_core::rsm_core::{self, HiddenState};
use tempora_core::Error;

fn vocab(k: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::new((0..k).map(|i| format!("v{i:02}")).collect()).unwrap())
}

fn corpus(k: usize, slices: Vec<Vec<Document>>) -> TemporalCorpus {
    let slices = slices
        .into_iter()
        .enumerate()
        .map(|(t, d)| TimeSlice::new((2000 + t).to_string(), d))
        .collect();
    TemporalCorpus::new(vocab(k), slices).unwrap()
}

#[test]
fn uniform_model_perplexity_is_vocabulary_size() {
    let mut r = rng(1);
    for k in [2usize, 3, 7, 50] {
        let p = RnnRsmParams::zeros(k, 4, 3);
        let docs: Vec<Document> = (0..r.random_range(1..6))
            .map(|_| random_doc(k, r.random_range(1..20), &mut r))
            .collect();
        let c = corpus(k, vec![docs.clone()]);
        let state = rnn_rsm::forward(&p, &c).unwrap();
        let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
        let ppl = metrics::perplexity(&mut cache, 0, &docs, PerplexityNorm::PerWord).unwrap();
        assert!((ppl - k as f64).abs() <= 1e-12 * k as f64, "K={k}: {ppl}");
    }
}

#[test]
fn per_document_mean_variant_differs_for_several_documents() {
    let p = RnnRsmParams::zeros(4, 2, 2);
    let docs = vec![Document::from_counts([(0, 2)]).unwrap(), Document::from_counts([(1, 1)]).unwrap()];
    let c = corpus(4, vec![docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    let ppl = metrics::perplexity(&mut cache, 0, &docs, PerplexityNorm::PerDocumentMean).unwrap();
    assert!((ppl - 2.0).abs() < 1e-12, "{ppl}");
}

#[test]
fn perplexity_two_ways_agree() {
    let mut r = rng(2);
    let mut p = RnnRsmParams::zeros(4, 3, 2);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| r.random_range(-0.7..0.7)).collect();
    p.assign_flat(&flat).unwrap();
    let doc = random_doc(4, 5, &mut r);
    let c = corpus(4, vec![vec![doc.clone()], vec![random_doc(4, 3, &mut r)]]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    for t in 0..2 {
        let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
        let via_cache = metrics::perplexity(&mut cache, t, std::slice::from_ref(&doc), PerplexityNorm::PerWord).unwrap();
        let direct = exact_oracle::direct_log_prob(&p.rsm, &doc, Some(state.bias(t))).unwrap();
        let direct_ppl = (-direct / f64::from(doc.len())).exp();
        assert!((via_cache - direct_ppl).abs() <= 1e-9 * direct_ppl);
    }
}

#[test]
fn perplexity_ignores_document_and_word_order() {
    let mut r = rng(3);
    let mut p = RnnRsmParams::zeros(5, 3, 2);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| r.random_range(-0.5..0.5)).collect();
    p.assign_flat(&flat).unwrap();
    let docs: Vec<Document> = (0..4).map(|_| random_doc(5, 4, &mut r)).collect();
    let c = corpus(5, vec![docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    let a = metrics::perplexity(&mut cache, 0, &docs, PerplexityNorm::PerWord).unwrap();
    let mut reversed = docs.clone();
    reversed.reverse();
    // Rebuild each document from its words listed backwards.
    let reordered: Vec<Document> = reversed
        .iter()
        .map(|d| Document::from_counts(d.counts().iter().rev().flat_map(|&(k, c)| std::iter::repeat_n((k, 1), c as usize)).collect::<Vec<_>>()).unwrap())
        .collect();
    let b = metrics::perplexity(&mut cache, 0, &reordered, PerplexityNorm::PerWord).unwrap();
    assert!((a - b).abs() <= 1e-12 * a);
}

#[test]
fn exact_mode_refuses_wide_hidden_layers() {
    let p = RnnRsmParams::zeros(2, 25, 1);
    let docs = vec![Document::from_counts([(0, 1)]).unwrap()];
    let c = corpus(2, vec![docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    assert!(matches!(
        metrics::perplexity(&mut cache, 0, &docs, PerplexityNorm::PerWord),
        Err(Error::EnumerationTooLarge { .. })
    ));
}

#[test]
fn ais_perplexity_tracks_exact() {
    let mut r = rng(4);
    let mut p = RnnRsmParams::zeros(6, 4, 2);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| r.random_range(-0.4..0.4)).collect();
    p.assign_flat(&flat).unwrap();
    let docs: Vec<Document> = (0..3).map(|_| random_doc(6, 4, &mut r)).collect();
    let c = corpus(6, vec![docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let exact = metrics::perplexity(&mut LogZCache::new(&p, &state, ZMode::Exact), 0, &docs, PerplexityNorm::PerWord).unwrap();
    let ais_mode = ZMode::Ais {
        temperatures: 300,
        chains: 50,
        seed: 9,
    };
    let ais = metrics::perplexity(&mut LogZCache::new(&p, &state, ais_mode), 0, &docs, PerplexityNorm::PerWord).unwrap();
    assert!((ais - exact).abs() / exact < 0.02, "{ais} vs {exact}");
    let again = metrics::perplexity(&mut LogZCache::new(&p, &state, ais_mode), 0, &docs, PerplexityNorm::PerWord).unwrap();
    assert_eq!(ais, again);
}

/// Two slices, two words; the recurrence flips the visible bias from word 0
/// towards word 1 between the slices.
fn separable_model() -> RnnRsmParams {
    let mut p = RnnRsmParams::zeros(2, 1, 1);
    p.u0 = array![1.0];
    p.w_uv = array![[3.0], [-3.0]];
    p.w_uu = array![[-5.0]];
    p
}

#[test]
fn separable_instance_is_dated_perfectly() {
    let p = separable_model();
    let early: Vec<Document> = (1..4).map(|n| Document::from_counts([(0, n)]).unwrap()).collect();
    let late: Vec<Document> = (1..4).map(|n| Document::from_counts([(1, n)]).unwrap()).collect();
    let c = corpus(2, vec![early.clone(), late.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    for d in &early {
        assert_eq!(metrics::predict_timestamp(&mut cache, d).unwrap(), 0);
    }
    for d in &late {
        assert_eq!(metrics::predict_timestamp(&mut cache, d).unwrap(), 1);
    }
    let labels = vec!["2000".to_string(), "2001".to_string()];
    assert_eq!(metrics::mean_absolute_error_years(&[0, 1], &[0, 1], &labels).unwrap(), 0.0);
}

#[test]
fn single_slice_always_predicts_it() {
    let mut r = rng(5);
    let p = RnnRsmParams::zeros(3, 2, 2);
    let docs: Vec<Document> = (0..5).map(|_| random_doc(3, 3, &mut r)).collect();
    let c = corpus(3, vec![docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    for d in &docs {
        assert_eq!(metrics::predict_timestamp(&mut cache, d).unwrap(), 0);
    }
}

#[test]
fn ties_go_to_the_earliest_slice() {
    let p = RnnRsmParams::zeros(3, 2, 2);
    let docs = vec![Document::from_counts([(1, 2)]).unwrap()];
    let c = corpus(3, vec![docs.clone(), docs.clone(), docs.clone()]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut cache = LogZCache::new(&p, &state, ZMode::Exact);
    assert_eq!(metrics::predict_timestamp(&mut cache, &docs[0]).unwrap(), 0);
}

#[test]
fn timestamp_prediction_is_shift_invariant() {
    let mut r = rng(6);
    let mut p = RnnRsmParams::zeros(4, 2, 2);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| r.random_range(-1.0..1.0)).collect();
    p.assign_flat(&flat).unwrap();
    let slices: Vec<Vec<Document>> = (0..3).map(|_| (0..3).map(|_| random_doc(4, 3, &mut r)).collect()).collect();
    let c = corpus(4, slices.clone());
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let mut shifted = p.clone();
    shifted.rsm.b_v += 2.5;
    let shifted_state = rnn_rsm::forward(&shifted, &c).unwrap();
    let mut a = LogZCache::new(&p, &state, ZMode::Exact);
    let mut b = LogZCache::new(&shifted, &shifted_state, ZMode::Exact);
    for d in slices.iter().flatten() {
        assert_eq!(metrics::predict_timestamp(&mut a, d).unwrap(), metrics::predict_timestamp(&mut b, d).unwrap());
    }
}

#[test]
fn topics_follow_the_visible_distribution() {
    let mut r = rng(7);
    let mut p = RnnRsmParams::zeros(6, 3, 2);
    let flat: Vec<f64> = (0..p.num_parameters()).map(|_| r.random_range(-1.0..1.0)).collect();
    p.assign_flat(&flat).unwrap();
    let c = corpus(6, vec![vec![random_doc(6, 3, &mut r)], vec![random_doc(6, 4, &mut r)]]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    for t in 0..2 {
        let topics = metrics::extract_topics(&p, &state, c.vocabulary(), t, 6).unwrap();
        for (j, topic) in topics.iter().enumerate() {
            let dist = rsm_core::visible_distribution(&p.rsm, &HiddenState::one_hot(3, j), Some(state.bias(t))).unwrap();
            let probs: Vec<f64> = topic.iter().map(|w| dist[c.vocabulary().id(w).unwrap() as usize]).collect();
            assert!(probs.windows(2).all(|w| w[0] >= w[1]));
            assert_eq!(topic.len(), 6);
        }
    }
}

#[test]
fn zero_weights_give_lexicographic_topics() {
    let p = RnnRsmParams::zeros(5, 2, 1);
    let c = corpus(5, vec![vec![Document::from_counts([(4, 1)]).unwrap()]]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let topics = metrics::extract_topics(&p, &state, c.vocabulary(), 0, 3).unwrap();
    assert_eq!(topics, vec![vec!["v00", "v01", "v02"]; 2]);
    // Asking for more terms than exist clamps to K.
    assert_eq!(metrics::extract_topics(&p, &state, c.vocabulary(), 0, 9).unwrap()[0].len(), 5);
}

#[test]
fn dominant_weight_ranks_first() {
    let mut p = RnnRsmParams::zeros(5, 2, 1);
    p.rsm.w_vh[[3, 1]] = 10.0;
    let c = corpus(5, vec![vec![Document::from_counts([(0, 1)]).unwrap()]]);
    let state = rnn_rsm::forward(&p, &c).unwrap();
    let topics = metrics::extract_topics(&p, &state, c.vocabulary(), 0, 2).unwrap();
    assert_eq!(topics[1][0], "v03");
    assert_eq!(topics[0][0], "v00");
}

#[test]
fn span_dictionary_golden_value() {
    let value = metrics::span_dict(19, 11741).unwrap();
    assert_eq!(format!("{value:.3}"), "0.002");
}

#[test]
fn cooccurrence_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let text = dir.path().join("ref.txt");
    std::fs::write(&text, "a b c\n").unwrap();
    let t = metrics::build_cooccurrence(&text, 5, None).unwrap();
    assert_eq!((t.joint("a", "b"), t.joint("a", "c"), t.joint("b", "c")), (1, 1, 1));

    let one = metrics::build_cooccurrence(&text, 1, None).unwrap();
    assert_eq!(one.joint.values().flat_map(|m| m.values()).sum::<u64>(), 0);
    assert_eq!(one.total_windows, 3);

    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let e = metrics::build_cooccurrence(&empty, 5, None).unwrap();
    assert_eq!(e, CooccurrenceTable::empty(5));

    let filter: BTreeSet<String> = ["a".to_string(), "c".to_string()].into();
    let f = metrics::build_cooccurrence(&text, 5, Some(&filter)).unwrap();
    assert!(!f.contains("b"));
    assert_eq!(f.joint("c", "a"), 1);

    let json = dir.path().join("t.json");
    t.write(&json).unwrap();
    assert_eq!(CooccurrenceTable::read(&json).unwrap(), t);
}

#[test]
fn joint_never_exceeds_marginals() {
    let mut r = rng(8);
    let mut t = CooccurrenceTable::empty(4);
    for _ in 0..200 {
        let n = r.random_range(1..12);
        let doc: Vec<String> = (0..n).map(|_| format!("w{}", r.random_range(0..6))).collect();
        t.add_document(&doc, None);
    }
    for x in t.counts.keys() {
        for y in t.counts.keys() {
            assert_eq!(t.joint(x, y), t.joint(y, x));
            assert!(t.joint(x, y) <= t.count(x).min(t.count(y)));
            let v = metrics::npmi(x, y, &t);
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}

fn brute_span(bits: &[bool]) -> usize {
    let mut best = 0;
    for i in 0..bits.len() {
        for j in i..bits.len() {
            if bits[i..=j].iter().all(|&b| b) {
                best = best.max(j - i + 1);
            }
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn span_matches_brute_force(bits in proptest::collection::vec(any::<bool>(), 0..24)) {
        prop_assert_eq!(metrics::span(&bits), brute_span(&bits));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn set_cosine_properties(
        a in proptest::collection::btree_set(0u8..12, 0..8),
        b in proptest::collection::btree_set(0u8..12, 0..8),
    ) {
        let ab = metrics::set_cosine(&a, &b);
        prop_assert_eq!(ab, metrics::set_cosine(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if !a.is_empty() && !b.is_empty() {
            prop_assert_eq!(ab == 1.0, a == b);
            prop_assert_eq!(ab == 0.0, a.is_disjoint(&b));
        }
    }
}
