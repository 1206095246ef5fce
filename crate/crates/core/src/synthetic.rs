//! Generated corpora with known temporal structure.

use std::sync::Arc;

use rand::Rng;

use crate::corpus::{Document, TemporalCorpus, TimeSlice, Vocabulary};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

/// Each slice draws its words uniformly from its own block of terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DisjointRegions {
    pub slices: usize,
    pub terms_per_slice: usize,
    pub docs_per_slice: usize,
    pub min_length: u32,
    pub max_length: u32,
    pub first_year: i32,
}

impl Default for DisjointRegions {
    fn default() -> Self {
        Self {
            slices: 3,
            terms_per_slice: 10,
            docs_per_slice: 30,
            min_length: 6,
            max_length: 10,
            first_year: 2000,
        }
    }
}

impl DisjointRegions {
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(
            (0..self.slices)
                .flat_map(|t| (0..self.terms_per_slice).map(move |i| region_term(t, i)))
                .collect(),
        )
    }

    /// Term ids of slice `t`'s region.
    pub fn region(&self, t: usize) -> std::ops::Range<u32> {
        let start = (t * self.terms_per_slice) as u32;
        start..start + self.terms_per_slice as u32
    }

    pub fn region_terms(&self, t: usize) -> Vec<String> {
        (0..self.terms_per_slice).map(|i| region_term(t, i)).collect()
    }

    pub fn generate(&self, seed: u64) -> Result<TemporalCorpus> {
        if self.slices == 0 || self.terms_per_slice == 0 || self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::InvalidArgument("degenerate synthetic corpus settings".into()));
        }
        let vocab = Arc::new(self.vocabulary()?);
        let slices = (0..self.slices)
            .map(|t| {
                let mut rng = stream_rng(seed, Purpose::Synthetic, t as u64);
                let region = self.region(t);
                let docs = (0..self.docs_per_slice)
                    .map(|_| {
                        let len = rng.random_range(self.min_length..=self.max_length);
                        let words = (0..len).map(|_| (rng.random_range(region.clone()), 1));
                        Document::from_counts(words.collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(TimeSlice::new((self.first_year + t as i32).to_string(), docs))
            })
            .collect::<Result<Vec<_>>>()?;
        TemporalCorpus::new(vocab, slices)
    }
}

fn region_term(t: usize, i: usize) -> String {
    format!("r{t}w{i:02}")
}
