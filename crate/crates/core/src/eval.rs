//! Prefix-expansion evaluation, ranking metrics and resource measurement.

use std::io::Write;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemIdx, SessionDataset};
use crate::error::{Error, Result};
use crate::ranking::{Ranking, Recommender};

pub const DEFAULT_CUTOFFS: [usize; 5] = [1, 3, 5, 10, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionEvent<'a> {
    pub session: u64,
    pub prefix: &'a [ItemIdx],
    pub target: ItemIdx,
}

/// Every `(prefix, next item)` pair of every session, in dataset order.
pub fn expand_prefixes(test: &SessionDataset) -> impl Iterator<Item = PredictionEvent<'_>> {
    test.sessions().iter().flat_map(|s| {
        (1..s.items.len()).map(move |p| PredictionEvent {
            session: s.id,
            prefix: &s.items[..p],
            target: s.items[p],
        })
    })
}

/// `(hit, reciprocal rank)` of `target` within the top `k` of `ranking`.
pub fn score_event(ranking: &Ranking, target: ItemIdx, k: usize) -> (u8, f64) {
    match ranking.position(target) {
        Some(r) if r <= k => (1, 1.0 / r as f64),
        _ => (0, 0.0),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    #[default]
    None,
    /// Never rank the item currently viewed.
    LastItem,
    /// Never rank any item already in the prefix.
    AllPrefix,
}

impl ExclusionPolicy {
    fn exclusions(self, prefix: &[ItemIdx]) -> &[ItemIdx] {
        match self {
            ExclusionPolicy::None => &[],
            ExclusionPolicy::LastItem => &prefix[prefix.len() - 1..],
            ExclusionPolicy::AllPrefix => prefix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
    pub cov: f64,
    pub pop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &mut [Duration]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        samples.sort_unstable();
        let total: f64 = samples.iter().map(Duration::as_secs_f64).sum();
        let idx = ((samples.len() as f64 * 0.95).ceil() as usize).clamp(1, samples.len()) - 1;
        Some(Self {
            mean_ms: total * 1e3 / samples.len() as f64,
            p95_ms: samples[idx].as_secs_f64() * 1e3,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub n_events: u64,
    pub metrics: Vec<CutoffMetrics>,
    pub latency: Option<LatencyStats>,
}

impl Evaluation {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub exclusion: ExclusionPolicy,
    /// 1 runs sequentially; 0 uses every available core.
    pub workers: usize,
    pub record_latency: bool,
}

impl EvalOptions {
    pub fn sequential() -> Self {
        Self {
            workers: 1,
            ..Self::default()
        }
    }
}

/// Order-independent sums over events: integer counts only, so any merge
/// order gives the same totals.
#[derive(Debug, Clone)]
struct Accumulator {
    n_events: u64,
    /// `hits_at[p]`: events whose target sat at 1-based rank `p`.
    hits_at: Vec<u64>,
    /// Σ train frequency of the top-K items, per cutoff.
    pop_sum: Vec<u128>,
    /// Best rank at which each item was recommended, 0 if never.
    best_rank: Vec<u32>,
    latencies: Vec<Duration>,
}

impl Accumulator {
    fn new(max_k: usize, n_cutoffs: usize, n_items: usize) -> Self {
        Self {
            n_events: 0,
            hits_at: vec![0; max_k + 1],
            pop_sum: vec![0; n_cutoffs],
            best_rank: vec![0; n_items],
            latencies: Vec::new(),
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.n_events += other.n_events;
        for (a, b) in self.hits_at.iter_mut().zip(other.hits_at) {
            *a += b;
        }
        for (a, b) in self.pop_sum.iter_mut().zip(other.pop_sum) {
            *a += b;
        }
        for (a, b) in self.best_rank.iter_mut().zip(other.best_rank) {
            if b != 0 && (*a == 0 || b < *a) {
                *a = b;
            }
        }
        self.latencies.extend(other.latencies);
        self
    }
}

/// Runs `rec` over every prediction event of `test` and reports HR, MRR,
/// COV and POP at each cutoff. Event-weighted averages.
pub fn evaluate(
    rec: &dyn Recommender,
    train: &SessionDataset,
    test: &SessionDataset,
    cutoffs: &[usize],
    options: &EvalOptions,
) -> Result<Evaluation> {
    if cutoffs.is_empty() || cutoffs.contains(&0) {
        return Err(Error::Config("cutoffs must be non-empty and ≥ 1".into()));
    }
    let mut cutoffs = cutoffs.to_vec();
    cutoffs.sort_unstable();
    cutoffs.dedup();
    let max_k = *cutoffs.last().expect("non-empty");
    let freq = train.freq();
    let n_items = train.n_items();
    let max_freq = freq.iter().copied().max().unwrap_or(0);
    if n_items == 0 || max_freq == 0 {
        return Err(Error::Empty("train set has no items".into()));
    }
    let events: Vec<PredictionEvent<'_>> = expand_prefixes(test).collect();
    if events.is_empty() {
        return Err(Error::Empty("test set yields no prediction events".into()));
    }

    let step = |mut acc: Accumulator, ev: &PredictionEvent<'_>| -> Result<Accumulator> {
        let started = options.record_latency.then(Instant::now);
        let ranking = rec.recommend(ev.prefix, max_k, options.exclusion.exclusions(ev.prefix))?;
        if let Some(t) = started {
            acc.latencies.push(t.elapsed());
        }
        let top = ranking.truncated(max_k);
        acc.n_events += 1;
        if let Some(p) = top.iter().position(|e| e.item == ev.target) {
            acc.hits_at[p + 1] += 1;
        }
        for (p, e) in top.iter().enumerate() {
            let slot = acc
                .best_rank
                .get_mut(e.item as usize)
                .ok_or_else(|| Error::InvalidRanking(format!("item {} outside the train vocabulary", e.item)))?;
            let rank = p as u32 + 1;
            if *slot == 0 || rank < *slot {
                *slot = rank;
            }
        }
        for (c, &k) in cutoffs.iter().enumerate() {
            acc.pop_sum[c] += top.iter().take(k).map(|e| freq[e.item as usize] as u128).sum::<u128>();
        }
        Ok(acc)
    };
    let fresh = || Accumulator::new(max_k, cutoffs.len(), n_items);

    let acc = if options.workers == 1 {
        events.iter().try_fold(fresh(), step)?
    } else {
        let run = || {
            events
                .par_iter()
                .try_fold(fresh, step)
                .try_reduce(fresh, |a, b| Ok(a.merge(b)))
        };
        if options.workers == 0 {
            run()?
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(options.workers)
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?
                .install(run)?
        }
    };

    let n = acc.n_events as f64;
    let metrics = cutoffs
        .iter()
        .enumerate()
        .map(|(c, &k)| {
            let hits: u64 = acc.hits_at[1..=k].iter().sum();
            let rr: f64 = (1..=k).map(|p| acc.hits_at[p] as f64 / p as f64).sum();
            let covered = acc.best_rank.iter().filter(|&&r| r != 0 && r as usize <= k).count();
            CutoffMetrics {
                k,
                hr: hits as f64 / n,
                mrr: rr / n,
                cov: covered as f64 / n_items as f64,
                pop: acc.pop_sum[c] as f64 / (n * k as f64 * max_freq as f64),
            }
        })
        .collect();
    let mut latencies = acc.latencies;
    Ok(Evaluation {
        n_events: acc.n_events,
        metrics,
        latency: LatencyStats::from_samples(&mut latencies),
    })
}

/// One metrics line per (model, split, cutoff).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model: String,
    pub split: String,
    pub manifest: String,
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
    pub cov: f64,
    pub pop: f64,
    pub n_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn new(model: &str, split: &str, manifest: &str, eval: &Evaluation) -> Self {
        Self {
            records: eval
                .metrics
                .iter()
                .map(|m| MetricRecord {
                    model: model.to_string(),
                    split: split.to_string(),
                    manifest: manifest.to_string(),
                    k: m.k,
                    hr: m.hr,
                    mrr: m.mrr,
                    cov: m.cov,
                    pop: m.pop,
                    n_events: eval.n_events,
                })
                .collect(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wall_secs: f64,
    /// Peak resident set size while the task ran; absent when the platform
    /// offers no accounting. Approximate: the kernel high-water mark is reset
    /// before the task where supported, otherwise it covers the whole process.
    pub peak_rss_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub model: String,
    pub split: String,
    pub train_secs: f64,
    pub peak_rss_bytes: Option<u64>,
    pub eval_secs: f64,
    pub latency_mean_ms: Option<f64>,
    pub latency_p95_ms: Option<f64>,
}

fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

fn read_peak_rss() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Runs `task`, timing it with a monotonic clock and sampling peak memory.
pub fn measure_resources<T>(task: impl FnOnce() -> T) -> (T, Measurement) {
    reset_peak_rss();
    let started = Instant::now();
    let out = task();
    let wall_secs = started.elapsed().as_secs_f64();
    (
        out,
        Measurement {
            wall_secs,
            peak_rss_bytes: read_peak_rss(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::dataset;

    #[test]
    fn prefix_expansion_example() {
        let ds = dataset(&[&["1", "2", "3", "4"]]);
        let ev: Vec<(Vec<ItemIdx>, ItemIdx)> = expand_prefixes(&ds).map(|e| (e.prefix.to_vec(), e.target)).collect();
        assert_eq!(ev, vec![(vec![0], 1), (vec![0, 1], 2), (vec![0, 1, 2], 3)]);
    }

    #[test]
    fn score_event_cases() {
        let r = crate::ranking::rank(&[5.0, 4.0, 3.0, 2.0], 4, &[], &[0; 4]);
        assert_eq!(score_event(&r, 0, 5), (1, 1.0));
        assert_eq!(score_event(&r, 2, 5), (1, 1.0 / 3.0));
        assert_eq!(score_event(&r, 2, 2), (0, 0.0));
    }

    #[test]
    fn latency_percentile() {
        let mut s: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        let l = LatencyStats::from_samples(&mut s).unwrap();
        assert!((l.p95_ms - 95.0).abs() < 1e-9);
        assert!((l.mean_ms - 50.5).abs() < 1e-9);
    }

    #[test]
    fn sleep_is_timed() {
        let ((), m) = measure_resources(|| std::thread::sleep(Duration::from_millis(100)));
        assert!(m.wall_secs >= 0.1 && m.wall_secs < 0.5, "{}", m.wall_secs);
    }
}
