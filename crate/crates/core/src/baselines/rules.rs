use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Weighting;
use crate::dataset::{ItemIdx, SessionDataset};
use crate::error::Result;
use crate::ranking::{rank, Ranking, Recommender, ScoreVector};

/// Rules between items further apart than this are never created.
pub const MAX_RULE_DISTANCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleKind {
    /// Unordered co-occurrence inside a session.
    Association,
    /// Directed `earlier → later` pairs weighted by distance.
    Sequential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesConfig {
    /// Rules whose accumulated weight is ≤ this value are discarded.
    pub pruning: u32,
    /// Distance decay for sequential rules.
    pub weighting: Weighting,
}

impl Default for RulesConfig {
    fn default() -> Self {
        Self {
            pruning: 0,
            weighting: Weighting::Linear,
        }
    }
}

/// Size-two rules `antecedent → consequent` with accumulated weights.
///
/// Weights are kept in integer units where possible: association counts are
/// integers, and linear sequential weights are stored in tenths so
/// accumulation is exact. `divisor` converts units back to weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTable {
    kind: RuleKind,
    config: RulesConfig,
    divisor: f64,
    /// Per antecedent, `(consequent, units)` sorted by consequent.
    rules: Vec<Vec<(ItemIdx, f64)>>,
    freq: Vec<u64>,
}

impl RuleTable {
    pub fn fit_association(train: &SessionDataset, config: RulesConfig) -> Self {
        let n = train.n_items();
        let mut acc: Vec<HashMap<ItemIdx, f64>> = vec![HashMap::new(); n];
        for s in train.sessions() {
            for (j, &a) in s.items.iter().enumerate() {
                for (k, &b) in s.items.iter().enumerate() {
                    if j != k && a != b {
                        *acc[a as usize].entry(b).or_default() += 1.0;
                    }
                }
            }
        }
        Self::finish(RuleKind::Association, config, 1.0, acc, train)
    }

    pub fn fit_sequential(train: &SessionDataset, config: RulesConfig) -> Self {
        let n = train.n_items();
        let linear = config.weighting == Weighting::Linear;
        let mut acc: Vec<HashMap<ItemIdx, f64>> = vec![HashMap::new(); n];
        for s in train.sessions() {
            for (j, &later) in s.items.iter().enumerate() {
                let from = j.saturating_sub(MAX_RULE_DISTANCE - 1);
                for (k, &earlier) in s.items.iter().enumerate().take(j).skip(from) {
                    if earlier == later {
                        continue;
                    }
                    let d = j - k;
                    let units = if linear {
                        (MAX_RULE_DISTANCE - d) as f64
                    } else {
                        config.weighting.distance(d)
                    };
                    *acc[earlier as usize].entry(later).or_default() += units;
                }
            }
        }
        let divisor = if linear { 10.0 } else { 1.0 };
        Self::finish(RuleKind::Sequential, config, divisor, acc, train)
    }

    fn finish(
        kind: RuleKind,
        config: RulesConfig,
        divisor: f64,
        acc: Vec<HashMap<ItemIdx, f64>>,
        train: &SessionDataset,
    ) -> Self {
        let threshold = config.pruning as f64;
        let rules = acc
            .into_iter()
            .map(|m| {
                let mut v: Vec<(ItemIdx, f64)> = m
                    .into_iter()
                    .filter(|&(_, units)| units / divisor > threshold)
                    .collect();
                v.sort_unstable_by_key(|e| e.0);
                v
            })
            .collect();
        Self {
            kind,
            config,
            divisor,
            rules,
            freq: train.freq().to_vec(),
        }
    }

    pub fn kind(&self) -> RuleKind {
        self.kind
    }

    pub fn n_rules(&self) -> usize {
        self.rules.iter().map(Vec::len).sum()
    }

    /// Weight of the rule `antecedent → consequent`, zero if absent.
    pub fn weight(&self, antecedent: ItemIdx, consequent: ItemIdx) -> f64 {
        self.rules
            .get(antecedent as usize)
            .and_then(|r| r.binary_search_by_key(&consequent, |e| e.0).ok().map(|p| r[p].1))
            .map_or(0.0, |units| units / self.divisor)
    }

    /// Scores every item by its rule weight from the last prefix item. An
    /// unseen last item yields the zero vector.
    pub fn score(&self, prefix: &[ItemIdx]) -> ScoreVector {
        let mut scores = ScoreVector::zeros(self.freq.len());
        if let Some(rules) = prefix.last().and_then(|&last| self.rules.get(last as usize)) {
            for &(item, units) in rules {
                scores[item as usize] = units / self.divisor;
            }
        }
        scores
    }
}

impl Recommender for RuleTable {
    fn name(&self) -> &str {
        match self.kind {
            RuleKind::Association => "AR",
            RuleKind::Sequential => "SR",
        }
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        Ok(rank(&self.score(prefix), k, exclusions, &self.freq))
    }
}
