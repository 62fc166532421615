use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricRecord;

pub const RANK_CUTOFF: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub experiment: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub experiments: Vec<String>,
    pub models: Vec<String>,
    /// Models missing from some experiment, left out of the ranking.
    pub dropped: Vec<String>,
    pub rows: Vec<RankRow>,
}

/// 1-based ranks, highest value first; tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mean;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks models within each experiment (one split of one dataset, keyed by
/// split name and manifest) by HR and MRR at `k`.
pub fn summarize_ranks(records: &[MetricRecord], k: usize) -> Result<RankSummary> {
    let mut by_exp: BTreeMap<String, BTreeMap<String, &MetricRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.k == k) {
        let exp = format!("{}:{}", r.split, r.manifest);
        if by_exp
            .entry(exp.clone())
            .or_default()
            .insert(r.model.clone(), r)
            .is_some()
        {
            return Err(Error::Config(format!("model `{}` appears twice in {exp}", r.model)));
        }
    }
    if by_exp.is_empty() {
        return Err(Error::Empty(format!("no metric records at cutoff {k}")));
    }
    let all: BTreeSet<&String> = by_exp.values().flat_map(|m| m.keys()).collect();
    let common: Vec<String> = all
        .iter()
        .filter(|m| by_exp.values().all(|e| e.contains_key(**m)))
        .map(|m| m.to_string())
        .collect();
    let dropped: Vec<String> = all
        .iter()
        .filter(|m| !common.contains(m))
        .map(|m| m.to_string())
        .collect();
    if !dropped.is_empty() {
        log::warn!(
            "models missing from some experiments are not ranked: {}",
            dropped.join(", ")
        );
    }
    if common.is_empty() {
        return Err(Error::Empty("no model is present in every experiment".into()));
    }

    let mut rows = Vec::new();
    for (exp, models) in &by_exp {
        for metric in ["HR", "MRR"] {
            let values: Vec<f64> = common
                .iter()
                .map(|m| if metric == "HR" { models[m].hr } else { models[m].mrr })
                .collect();
            for ((m, v), rank) in common.iter().zip(&values).zip(average_ranks(&values)) {
                rows.push(RankRow {
                    experiment: exp.clone(),
                    model: m.clone(),
                    metric: format!("{metric}@{k}"),
                    value: *v,
                    rank,
                });
            }
        }
    }
    Ok(RankSummary {
        experiments: by_exp.keys().cloned().collect(),
        models: common,
        dropped,
        rows,
    })
}

impl RankSummary {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Source(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io("<ranks>", e))
    }

    /// Mean rank of each model per metric.
    pub fn mean_ranks(&self) -> BTreeMap<(String, String), f64> {
        let mut acc: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry((r.metric.clone(), r.model.clone())).or_default();
            e.0 += r.rank;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Box plot of the rank distributions, one panel per metric.
    pub fn vega_lite(&self) -> serde_json::Value {
        serde_json::json!({
            "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
            "data": { "values": self.rows },
            "facet": { "column": { "field": "metric", "type": "nominal" } },
            "spec": {
                "mark": { "type": "boxplot", "extent": "min-max" },
                "encoding": {
                    "x": { "field": "model", "type": "nominal", "sort": self.models },
                    "y": {
                        "field": "rank",
                        "type": "quantitative",
                        "scale": { "domain": [1, self.models.len()], "reverse": true }
                    }
                }
            }
        })
    }
}
