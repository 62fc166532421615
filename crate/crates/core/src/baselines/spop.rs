use serde::{Deserialize, Serialize};

use crate::dataset::{ItemIdx, SessionDataset};
use crate::error::{Error, Result};
use crate::ranking::{rank_candidates, rank_order, Ranking, Recommender, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SPopConfig {
    /// Size of the global-popularity set the model is restricted to.
    pub top_n: usize,
    /// Fill slots past the in-session items with popular items.
    pub fallback: bool,
    /// Count clicks in the current session. Off gives pure popularity.
    pub session_term: bool,
}

impl Default for SPopConfig {
    fn default() -> Self {
        Self {
            top_n: 100,
            fallback: true,
            session_term: true,
        }
    }
}

/// Session popularity: items are scored by how often they were clicked in
/// the current session, with global popularity filling the rest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SPop {
    config: SPopConfig,
    freq: Vec<u64>,
    /// Top-N items in popularity order.
    top: Vec<ItemIdx>,
    in_top: Vec<bool>,
}

impl SPop {
    pub fn fit(train: &SessionDataset, config: SPopConfig) -> Result<Self> {
        if config.top_n == 0 {
            return Err(Error::Config("S-POP top_n must be ≥ 1".into()));
        }
        let freq = train.freq().to_vec();
        let zeros = vec![0.0; freq.len()];
        let mut top: Vec<ItemIdx> = (0..freq.len() as ItemIdx).collect();
        top.sort_by(|&a, &b| rank_order(&zeros, &freq, a, b));
        top.truncate(config.top_n);
        let mut in_top = vec![false; freq.len()];
        for &i in &top {
            in_top[i as usize] = true;
        }
        Ok(Self {
            config,
            freq,
            top,
            in_top,
        })
    }

    pub fn config(&self) -> &SPopConfig {
        &self.config
    }

    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    /// In-session click counts, restricted to the top-N set.
    pub fn score(&self, prefix: &[ItemIdx]) -> Result<ScoreVector> {
        if prefix.is_empty() {
            return Err(Error::Empty("S-POP needs a non-empty prefix".into()));
        }
        let mut scores = ScoreVector::zeros(self.freq.len());
        if self.config.session_term {
            for &item in prefix {
                if self.in_top.get(item as usize).copied().unwrap_or(false) {
                    scores[item as usize] += 1.0;
                }
            }
        }
        Ok(scores)
    }
}

impl Recommender for SPop {
    fn name(&self) -> &str {
        "S-POP"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        let scores = self.score(prefix)?;
        let candidates: Vec<ItemIdx> = if self.config.fallback {
            self.top.iter().copied().filter(|i| !exclusions.contains(i)).collect()
        } else {
            let mut seen: Vec<ItemIdx> = prefix
                .iter()
                .copied()
                .filter(|&i| scores.get(i as usize).is_some_and(|&s| s > 0.0))
                .filter(|i| !exclusions.contains(i))
                .collect();
            seen.sort_unstable();
            seen.dedup();
            seen
        };
        Ok(rank_candidates(&scores, k, candidates, &self.freq))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::dataset;

    fn idx(ds: &SessionDataset, id: &str) -> ItemIdx {
        ds.vocabulary().get(id).unwrap()
    }

    // popularity: D=4, C=3, A=2, B=2, E=1
    fn corpus() -> SessionDataset {
        dataset(&[&["D", "C", "D"], &["D", "A", "C"], &["C", "B", "D"], &["A", "B", "E"]])
    }

    #[test]
    fn counts_clicks_in_prefix() {
        let ds = corpus();
        let model = SPop::fit(&ds, SPopConfig::default()).unwrap();
        let (a, b) = (idx(&ds, "A"), idx(&ds, "B"));
        let s = model.score(&[a, b, a]).unwrap();
        assert_eq!(s[a as usize], 2.0);
        assert_eq!(s[b as usize], 1.0);
        assert_eq!(s.iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn single_item_prefix() {
        let ds = corpus();
        let model = SPop::fit(&ds, SPopConfig::default()).unwrap();
        let a = idx(&ds, "A");
        let s = model.score(&[a]).unwrap();
        assert_eq!(s[a as usize], 1.0);
        assert_eq!(s.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn fallback_fills_with_most_popular_unclicked() {
        let ds = corpus();
        let model = SPop::fit(&ds, SPopConfig::default()).unwrap();
        let (a, b, d) = (idx(&ds, "A"), idx(&ds, "B"), idx(&ds, "D"));
        let r = model.recommend(&[a, b, a], 3, &[]).unwrap();
        assert_eq!(r.items().collect::<Vec<_>>(), [a, b, d]);
    }

    #[test]
    fn without_fallback_only_session_items() {
        let ds = corpus();
        let cfg = SPopConfig {
            fallback: false,
            ..SPopConfig::default()
        };
        let model = SPop::fit(&ds, cfg).unwrap();
        let (a, b) = (idx(&ds, "A"), idx(&ds, "B"));
        let r = model.recommend(&[b, a, b], 5, &[]).unwrap();
        assert_eq!(r.items().collect::<Vec<_>>(), [b, a]);
    }

    #[test]
    fn top_n_restricts_session_term() {
        let ds = corpus();
        let cfg = SPopConfig {
            top_n: 2,
            ..SPopConfig::default()
        };
        let model = SPop::fit(&ds, cfg).unwrap();
        let (c, d, e) = (idx(&ds, "C"), idx(&ds, "D"), idx(&ds, "E"));
        let s = model.score(&[e, e]).unwrap();
        assert!(s.is_zero());
        let r = model.recommend(&[e], 5, &[]).unwrap();
        assert_eq!(r.items().collect::<Vec<_>>(), [d, c]);
    }

    #[test]
    fn empty_prefix_is_an_error() {
        let model = SPop::fit(&corpus(), SPopConfig::default()).unwrap();
        assert!(model.score(&[]).is_err());
    }
}
