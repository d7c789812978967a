//! Zipf key selection over a stable rank ordering. Deleted products hand
//! their rank to a replacement, so the rank-frequency shape survives.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::domain::ProductKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("workload exhausted: every product has been deleted")]
pub struct Exhausted;

/// Zipf probabilities for ranks 1..=n, normalized.
pub fn zipf_pmf(n: usize, skew: f64) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-skew)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone)]
pub struct KeySampler {
    index: WeightedIndex<f64>,
    /// Current product behind each rank.
    ranks: Vec<ProductKey>,
    live: Vec<bool>,
    spares: std::collections::VecDeque<ProductKey>,
}

impl KeySampler {
    pub fn new(skew: f64, ranked: Vec<ProductKey>, spares: Vec<ProductKey>) -> Self {
        assert!(!ranked.is_empty(), "sampler needs at least one product");
        let index = WeightedIndex::new(zipf_pmf(ranked.len(), skew)).expect("zipf weights are positive");
        Self {
            index,
            live: vec![true; ranked.len()],
            ranks: ranked,
            spares: spares.into(),
        }
    }

    /// Returns the 0-based rank drawn and the product currently holding it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(usize, ProductKey), Exhausted> {
        if !self.live.iter().any(|l| *l) {
            return Err(Exhausted);
        }
        let rank = self.index.sample(rng);
        Ok((rank, self.ranks[rank]))
    }

    pub fn key_at(&self, rank: usize) -> ProductKey {
        self.ranks[rank]
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// Remaps every rank held by `key`. A fresh spare takes the rank; with no
    /// spares left, the nearest live rank's product absorbs it. Returns the
    /// replacement, or `None` when nothing live remains.
    pub fn on_delete(&mut self, key: ProductKey) -> Option<ProductKey> {
        let held: Vec<usize> = (0..self.ranks.len()).filter(|&r| self.ranks[r] == key).collect();
        if held.is_empty() {
            return None;
        }
        if let Some(spare) = self.spares.pop_front() {
            for &r in &held {
                self.ranks[r] = spare;
            }
            return Some(spare);
        }
        for &r in &held {
            self.live[r] = false;
        }
        let mut replacement = None;
        for &r in &held {
            let nearest = (1..self.ranks.len())
                .flat_map(|d| [r.checked_add(d), r.checked_sub(d)])
                .flatten()
                .find(|&c| c < self.ranks.len() && self.live[c]);
            if let Some(c) = nearest {
                self.ranks[r] = self.ranks[c];
                self.live[r] = true;
                replacement = Some(self.ranks[c]);
            }
        }
        replacement
    }
}
