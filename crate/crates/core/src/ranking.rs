//! Score vectors, top-K rankings and the predictor contract shared by native
//! models and bridged external ones.

use std::cmp::Ordering;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::dataset::ItemIdx;
use crate::error::{Error, Result};

/// Dense scores over the train vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn zeros(n_items: usize) -> Self {
        Self(vec![0.0; n_items])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

impl Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ScoreVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item: ItemIdx,
    pub score: f64,
}

/// Ordered top-K list: scores non-increasing, items unique.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ranking(Vec<RankedItem>);

impl Ranking {
    /// Wraps entries after checking the ranking invariants.
    pub fn new(entries: Vec<RankedItem>) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if !e.score.is_finite() {
                return Err(Error::InvalidRanking(format!("non-finite score for item {}", e.item)));
            }
            if i > 0 && entries[i - 1].score < e.score {
                return Err(Error::InvalidRanking("scores are not sorted".into()));
            }
            if !seen.insert(e.item) {
                return Err(Error::InvalidRanking(format!("item {} ranked twice", e.item)));
            }
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[RankedItem] {
        &self.0
    }

    pub fn items(&self) -> impl Iterator<Item = ItemIdx> + '_ {
        self.0.iter().map(|e| e.item)
    }

    /// 1-based rank of `item`, if present.
    pub fn position(&self, item: ItemIdx) -> Option<usize> {
        self.0.iter().position(|e| e.item == item).map(|p| p + 1)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn truncated(&self, k: usize) -> &[RankedItem] {
        &self.0[..k.min(self.0.len())]
    }
}

/// Total order used by every ranking: higher score, then higher train
/// frequency, then lower item index.
pub fn rank_order(scores: &[f64], freq: &[u64], a: ItemIdx, b: ItemIdx) -> Ordering {
    scores[b as usize]
        .total_cmp(&scores[a as usize])
        .then_with(|| freq[b as usize].cmp(&freq[a as usize]))
        .then_with(|| a.cmp(&b))
}

/// Top-`k` items by score. Zero-score items are eligible, so the result has
/// `min(k, n - |exclusions|)` entries.
pub fn rank(scores: &[f64], k: usize, exclusions: &[ItemIdx], freq: &[u64]) -> Ranking {
    let candidates: Vec<ItemIdx> = (0..scores.len() as ItemIdx)
        .filter(|i| !exclusions.contains(i))
        .collect();
    rank_candidates(scores, k, candidates, freq)
}

/// Like [`rank`] but restricted to `candidates`.
pub fn rank_candidates(scores: &[f64], k: usize, mut candidates: Vec<ItemIdx>, freq: &[u64]) -> Ranking {
    if k == 0 || candidates.is_empty() {
        return Ranking::default();
    }
    let cmp = |a: &ItemIdx, b: &ItemIdx| rank_order(scores, freq, *a, *b);
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    Ranking(
        candidates
            .into_iter()
            .map(|item| RankedItem {
                item,
                score: scores[item as usize],
            })
            .collect(),
    )
}

/// Anything that can produce a next-item ranking for a session prefix.
///
/// Implementations must be pure with respect to their inputs: two calls with
/// the same prefix return the same ranking.
pub trait Recommender: Send + Sync {
    fn name(&self) -> &str;

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking>;
}
