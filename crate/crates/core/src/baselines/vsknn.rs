use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Weighting;
use crate::dataset::{ItemIdx, SessionDataset};
use crate::error::{Error, Result};
use crate::ranking::{rank, Ranking, Recommender, ScoreVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    #[default]
    Recent,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Jaccard,
    #[default]
    Cosine,
    Binary,
    Tanimoto,
}

impl Similarity {
    /// Similarity between a weighted prefix vector and a binary neighbor
    /// vector, from the overlap statistics.
    fn eval(self, o: &Overlap) -> f64 {
        match self {
            Similarity::Cosine => {
                if o.prefix_norm == 0.0 {
                    0.0
                } else {
                    o.dot / (o.prefix_norm * (o.neighbor_len as f64).sqrt())
                }
            }
            Similarity::Binary => o.shared as f64,
            Similarity::Jaccard => {
                let union = o.prefix_support + o.neighbor_len - o.shared;
                o.shared as f64 / union as f64
            }
            Similarity::Tanimoto => {
                let denom = (o.prefix_support + o.neighbor_len) as f64 - o.shared as f64;
                o.shared as f64 / denom
            }
        }
    }
}

struct Overlap {
    dot: f64,
    prefix_norm: f64,
    prefix_support: usize,
    neighbor_len: usize,
    shared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VsknnConfig {
    pub k: usize,
    pub sample_size: usize,
    pub sampling: Sampling,
    pub similarity: Similarity,
    /// Position weights of the prefix vector.
    pub weighting: Weighting,
    /// Position weights of items inside a neighbor session.
    pub weighting_score: Weighting,
    pub seed: u64,
}

impl Default for VsknnConfig {
    fn default() -> Self {
        Self {
            k: 100,
            sample_size: 500,
            sampling: Sampling::Recent,
            similarity: Similarity::Cosine,
            weighting: Weighting::Div,
            weighting_score: Weighting::Div,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Neighbor {
    /// Distinct items, sorted.
    items: Vec<ItemIdx>,
    /// 1-based most recent position of each entry of `items`.
    last_pos: Vec<u32>,
    len: u32,
}

/// Inverted item → session index over the train sessions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VsknnIndex {
    config: VsknnConfig,
    /// Sessions in chronological order.
    sessions: Vec<Neighbor>,
    /// Item → positions in `sessions`, ascending (oldest first).
    postings: Vec<Vec<u32>>,
    freq: Vec<u64>,
}

impl VsknnIndex {
    pub fn fit(train: &SessionDataset, config: VsknnConfig) -> Result<Self> {
        if config.k == 0 || config.sample_size == 0 {
            return Err(Error::Config("VSKNN k and sample_size must be ≥ 1".into()));
        }
        let mut postings = vec![Vec::new(); train.n_items()];
        let sessions = train
            .sessions()
            .iter()
            .enumerate()
            .map(|(pos, s)| {
                let mut last: HashMap<ItemIdx, u32> = HashMap::new();
                for (i, &item) in s.items.iter().enumerate() {
                    last.insert(item, i as u32 + 1);
                }
                let mut pairs: Vec<(ItemIdx, u32)> = last.into_iter().collect();
                pairs.sort_unstable();
                for &(item, _) in &pairs {
                    postings[item as usize].push(pos as u32);
                }
                Neighbor {
                    items: pairs.iter().map(|p| p.0).collect(),
                    last_pos: pairs.iter().map(|p| p.1).collect(),
                    len: s.items.len() as u32,
                }
            })
            .collect();
        Ok(Self {
            config,
            sessions,
            postings,
            freq: train.freq().to_vec(),
        })
    }

    pub fn config(&self) -> &VsknnConfig {
        &self.config
    }

    /// `item → weight at its most recent prefix position`, sorted by item.
    fn prefix_vector(&self, prefix: &[ItemIdx]) -> Vec<(ItemIdx, f64)> {
        let len = prefix.len();
        let mut weights: HashMap<ItemIdx, f64> = HashMap::new();
        for (i, &item) in prefix.iter().enumerate() {
            weights.insert(item, self.config.weighting.position(i + 1, len));
        }
        let mut v: Vec<_> = weights.into_iter().collect();
        v.sort_unstable_by_key(|e| e.0);
        v
    }

    fn candidates(&self, prefix: &[ItemIdx]) -> Vec<u32> {
        let mut all: Vec<u32> = prefix
            .iter()
            .filter_map(|&i| self.postings.get(i as usize))
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        let m = self.config.sample_size;
        if all.len() <= m {
            return all;
        }
        match self.config.sampling {
            Sampling::Recent => all.split_off(all.len() - m),
            Sampling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(prefix_seed(self.config.seed, prefix));
                let mut picked: Vec<u32> = rand::seq::index::sample(&mut rng, all.len(), m)
                    .into_iter()
                    .map(|i| all[i])
                    .collect();
                picked.sort_unstable();
                picked
            }
        }
    }

    fn similarity(&self, prefix_vec: &[(ItemIdx, f64)], neighbor: &Neighbor) -> f64 {
        let mut o = Overlap {
            dot: 0.0,
            prefix_norm: 0.0,
            prefix_support: 0,
            neighbor_len: neighbor.items.len(),
            shared: 0,
        };
        for &(item, w) in prefix_vec {
            if w == 0.0 {
                continue;
            }
            o.prefix_norm += w * w;
            o.prefix_support += 1;
            if neighbor.items.binary_search(&item).is_ok() {
                o.dot += w;
                o.shared += 1;
            }
        }
        o.prefix_norm = o.prefix_norm.sqrt();
        if o.shared == 0 {
            return 0.0;
        }
        self.config.similarity.eval(&o)
    }

    /// The `k` most similar sampled sessions as `(position, similarity)`,
    /// most similar first; ties go to the more recent session.
    pub fn neighbors(&self, prefix: &[ItemIdx]) -> Vec<(u32, f64)> {
        let prefix_vec = self.prefix_vector(prefix);
        let mut scored: Vec<(u32, f64)> = self
            .candidates(prefix)
            .into_iter()
            .map(|pos| (pos, self.similarity(&prefix_vec, &self.sessions[pos as usize])))
            .filter(|&(_, sim)| sim > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        scored.truncate(self.config.k);
        scored
    }

    pub fn score(&self, prefix: &[ItemIdx]) -> ScoreVector {
        let mut scores = ScoreVector::zeros(self.freq.len());
        for (pos, sim) in self.neighbors(prefix) {
            let n = &self.sessions[pos as usize];
            for (&item, &p) in n.items.iter().zip(&n.last_pos) {
                let w = self.config.weighting_score.position(p as usize, n.len as usize);
                scores[item as usize] += sim * w;
            }
        }
        scores
    }
}

/// Seed for per-prefix random sampling, so scoring stays a pure function.
fn prefix_seed(seed: u64, prefix: &[ItemIdx]) -> u64 {
    // FNV-1a over the prefix, folded with the configured seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &item in prefix {
        for b in item.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

impl Recommender for VsknnIndex {
    fn name(&self) -> &str {
        "VSKNN"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        Ok(rank(&self.score(prefix), k, exclusions, &self.freq))
    }
}
