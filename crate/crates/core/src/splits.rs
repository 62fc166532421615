//! Train/test split families: temporal holdout plus the length, frequency,
//! recency, size and time-span variants.
//!
//! Time boundaries are half-open `[start, end)` intervals over UTC days; the
//! newer side of a cut owns the boundary instant.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{collapse_repeats, filter_test_items, utc_day, Role, Session, SessionDataset, SECONDS_PER_DAY};
use crate::error::{Error, Result};

/// Random sampling uses ChaCha8 seeded through `seed_from_u64`.
pub type SplitRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqBound {
    /// Train frequency ≤ n.
    AtMost(u64),
    /// Train frequency < n.
    Below(u64),
    /// Train frequency > n.
    Above(u64),
}

impl FreqBound {
    pub fn admits(self, freq: u64) -> bool {
        match self {
            FreqBound::AtMost(n) => freq <= n,
            FreqBound::Below(n) => freq < n,
            FreqBound::Above(n) => freq > n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recency {
    Recent,
    Old,
    Mixed,
}

fn default_period() -> i64 {
    5
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    /// Keep train sessions with `lo <= len < hi` (`hi = None` is unbounded).
    TrainSessionLength { lo: usize, hi: Option<usize> },
    /// Keep test sessions with `lo <= len < hi`.
    TestSessionLength { lo: usize, hi: Option<usize> },
    /// Keep test clicks whose item's train frequency satisfies `bound`.
    TestItemFrequency { bound: FreqBound },
    /// Equal-length periods of the train timespan.
    TrainRecency {
        recency: Recency,
        #[serde(default = "default_period")]
        period_days: i64,
    },
    /// Uniform sample of ⌊n/P⌋ train sessions.
    TrainFraction { denominator: usize },
    /// Train sessions from the last `days` days of the train period.
    TrainTimespan { days: i64 },
    /// Re-split the full dataset with the last `days` days as test.
    TemporalHoldout { days: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: SplitKind,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(name: impl Into<String>, kind: SplitKind) -> Self {
        Self {
            name: name.into(),
            kind,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(format!("{}: {msg}", self.name)));
        match self.kind {
            SplitKind::TrainSessionLength { lo, hi } | SplitKind::TestSessionLength { lo, hi } => {
                if let Some(hi) = hi {
                    if hi <= lo {
                        return bad(format!("length bounds [{lo}, {hi}) are empty"));
                    }
                }
            }
            SplitKind::TrainFraction { denominator } if denominator < 1 => {
                return bad("fraction denominator must be ≥ 1".into())
            }
            SplitKind::TrainTimespan { days } | SplitKind::TemporalHoldout { days } if days < 1 => {
                return bad("day count must be ≥ 1".into())
            }
            SplitKind::TrainRecency { period_days, .. } if period_days < 1 => {
                return bad("recency period must be ≥ 1 day".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether the derived side is the train set (otherwise the test set).
    pub fn derives_train(&self) -> bool {
        matches!(
            self.kind,
            SplitKind::TrainSessionLength { .. }
                | SplitKind::TrainRecency { .. }
                | SplitKind::TrainFraction { .. }
                | SplitKind::TrainTimespan { .. }
                | SplitKind::TemporalHoldout { .. }
        )
    }
}

/// Splits `ds` so that sessions starting in the final `n_days` UTC days form
/// the test set. The test set is filtered against the train vocabulary.
pub fn temporal_holdout(ds: &SessionDataset, n_days: i64) -> Result<(SessionDataset, SessionDataset)> {
    if n_days < 1 {
        return Err(Error::InvalidSpec("holdout needs at least one day".into()));
    }
    if ds.is_empty() {
        return Err(Error::Empty("cannot hold out from an empty dataset".into()));
    }
    let first_day = utc_day(ds.sessions().first().map(|s| s.start_time).unwrap_or(0));
    let last_day = utc_day(ds.sessions().last().map(|s| s.start_time).unwrap_or(0));
    let span_days = last_day - first_day + 1;
    if span_days <= n_days {
        return Err(Error::TooShort {
            span_days,
            needed: n_days,
        });
    }
    let cutoff = (last_day - n_days + 1) * SECONDS_PER_DAY;
    let (test, train): (Vec<Session>, Vec<Session>) =
        ds.sessions().iter().cloned().partition(|s| s.start_time >= cutoff);
    let train = SessionDataset::compacted(train, ds.vocabulary(), Role::Train);
    let test = SessionDataset::with_vocabulary(test, ds.shared_vocabulary(), Role::Test);
    let test = filter_test_items(&train, &test);
    if test.is_empty() {
        return Err(Error::EmptySplit("holdout test set".into()));
    }
    Ok((train, test))
}

/// The preprocessed dataset and its base temporal holdout.
#[derive(Debug, Clone)]
pub struct BaseSplit {
    pub full: Arc<SessionDataset>,
    pub train: Arc<SessionDataset>,
    pub test: Arc<SessionDataset>,
    source_hash: String,
}

impl BaseSplit {
    pub fn from_holdout(full: SessionDataset, holdout_days: i64) -> Result<Self> {
        let (train, test) = temporal_holdout(&full, holdout_days)?;
        Ok(Self::new(full, train, test))
    }

    pub fn new(full: SessionDataset, train: SessionDataset, test: SessionDataset) -> Self {
        let mut hasher = Sha256::new();
        for part in [&full, &train, &test] {
            hasher.update(part.content_hash().as_bytes());
        }
        Self {
            full: Arc::new(full),
            train: Arc::new(train),
            test: Arc::new(test),
            source_hash: hex::encode(hasher.finalize()),
        }
    }

    pub fn source_hash(&self) -> &str {
        &self.source_hash
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub sessions: usize,
    pub clicks: u64,
    pub items: usize,
    pub avg_session_length: f64,
    pub avg_item_frequency: f64,
    pub hash: String,
}

impl SplitCounts {
    pub fn of(ds: &SessionDataset) -> Self {
        let clicks = ds.n_clicks();
        let items = ds.freq().iter().filter(|&&f| f > 0).count();
        let ratio = |n: u64, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        Self {
            sessions: ds.sessions().len(),
            clicks,
            items,
            avg_session_length: ratio(clicks, ds.sessions().len()),
            avg_item_frequency: ratio(clicks, items),
            hash: ds.content_hash(),
        }
    }
}

pub const MANIFEST_TAG: &str = "sbr-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub spec: SplitSpec,
    pub source_hash: String,
    pub train: SplitCounts,
    pub test: SplitCounts,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Short content address of the manifest.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Checks that the counts describe `train` and `test`.
    pub fn verify(&self, train: &SessionDataset, test: &SessionDataset) -> bool {
        self.train == SplitCounts::of(train) && self.test == SplitCounts::of(test)
    }
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub train: Arc<SessionDataset>,
    pub test: Arc<SessionDataset>,
    pub manifest: Manifest,
}

impl SplitResult {
    /// The derived side of the split.
    pub fn derived(&self) -> &SessionDataset {
        if self.manifest.spec.derives_train() {
            &self.train
        } else {
            &self.test
        }
    }
}

/// The unmodified base pair wrapped as a split.
pub fn identity_split(base: &BaseSplit, name: &str) -> SplitResult {
    let spec = SplitSpec::new(name, SplitKind::TrainFraction { denominator: 1 });
    finish(base, spec, Arc::clone(&base.train), Arc::clone(&base.test))
}

pub fn generate_split(base: &BaseSplit, spec: &SplitSpec) -> Result<SplitResult> {
    spec.validate()?;
    let train_src = base.train.as_ref();
    let test_src = base.test.as_ref();

    let keep_train = |pred: &dyn Fn(&Session) -> bool| -> Vec<Session> {
        train_src.sessions().iter().filter(|s| pred(s)).cloned().collect()
    };
    let in_len = |lo: usize, hi: Option<usize>| move |s: &Session| s.len() >= lo && hi.is_none_or(|h| s.len() < h);

    let (train, test) = match spec.kind {
        SplitKind::TemporalHoldout { days } => {
            let (train, test) = temporal_holdout(&base.full, days)?;
            (Arc::new(train), Arc::new(test))
        }
        SplitKind::TrainSessionLength { lo, hi } => {
            let f = in_len(lo, hi);
            with_train(train_src.derive(keep_train(&f)), test_src, spec)?
        }
        SplitKind::TrainFraction { denominator } => {
            let n = train_src.sessions().len();
            let take = n / denominator;
            let mut rng = SplitRng::seed_from_u64(spec.seed);
            let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
            picked.sort_unstable();
            let sessions = picked.into_iter().map(|i| train_src.sessions()[i].clone()).collect();
            with_train(train_src.derive(sessions), test_src, spec)?
        }
        SplitKind::TrainTimespan { days } => {
            let (_, end) = day_range(train_src)?;
            let from = end - days * SECONDS_PER_DAY;
            with_train(train_src.derive(keep_train(&|s| s.start_time >= from)), test_src, spec)?
        }
        SplitKind::TrainRecency { recency, period_days } => {
            let (begin, end) = day_range(train_src)?;
            let period = period_days * SECONDS_PER_DAY;
            if end - begin < 2 * period {
                return Err(Error::TooShort {
                    span_days: (end - begin) / SECONDS_PER_DAY,
                    needed: 2 * period_days - 1,
                });
            }
            let half = period / 2;
            let window = |lo: i64, hi: i64| move |s: &Session| s.start_time >= lo && s.start_time < hi;
            let sessions = match recency {
                Recency::Recent => keep_train(&window(end - period, end)),
                Recency::Old => keep_train(&window(begin, begin + period)),
                Recency::Mixed => {
                    let newer = window(end - half, end);
                    let older = window(begin, begin + half);
                    keep_train(&|s| newer(s) || older(s))
                }
            };
            with_train(train_src.derive(sessions), test_src, spec)?
        }
        SplitKind::TestSessionLength { lo, hi } => {
            let f = in_len(lo, hi);
            let sessions = test_src.sessions().iter().filter(|s| f(s)).cloned().collect();
            (Arc::clone(&base.train), Arc::new(test_src.derive(sessions)))
        }
        SplitKind::TestItemFrequency { bound } => {
            let train_freq = train_src.freq();
            let sessions = test_src
                .sessions()
                .iter()
                .filter_map(|s| {
                    let mut items: Vec<_> = s
                        .items
                        .iter()
                        .copied()
                        .filter(|&i| bound.admits(train_freq[i as usize]))
                        .collect();
                    collapse_repeats(&mut items);
                    (items.len() >= 2).then(|| Session { items, ..s.clone() })
                })
                .collect();
            (Arc::clone(&base.train), Arc::new(test_src.derive(sessions)))
        }
    };

    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptySplit(spec.name.clone()));
    }
    train.validate(true)?;
    test.validate(true)?;
    Ok(finish(base, spec.clone(), train, test))
}

fn with_train(
    train: SessionDataset,
    test: &SessionDataset,
    spec: &SplitSpec,
) -> Result<(Arc<SessionDataset>, Arc<SessionDataset>)> {
    if train.is_empty() {
        return Err(Error::EmptySplit(spec.name.clone()));
    }
    let test = filter_test_items(&train, test);
    Ok((Arc::new(train), Arc::new(test)))
}

/// `[midnight of first start day, midnight after last start day)`.
fn day_range(ds: &SessionDataset) -> Result<(i64, i64)> {
    let first = ds.sessions().first().ok_or_else(|| Error::Empty("train set".into()))?;
    let last = ds.sessions().last().expect("non-empty");
    Ok((
        utc_day(first.start_time) * SECONDS_PER_DAY,
        (utc_day(last.start_time) + 1) * SECONDS_PER_DAY,
    ))
}

fn finish(base: &BaseSplit, spec: SplitSpec, train: Arc<SessionDataset>, test: Arc<SessionDataset>) -> SplitResult {
    let manifest = Manifest {
        format: MANIFEST_TAG.to_owned(),
        spec,
        source_hash: base.source_hash.clone(),
        train: SplitCounts::of(&train),
        test: SplitCounts::of(&test),
    };
    SplitResult { train, test, manifest }
}

/// Preset split families.
pub mod presets {
    use super::*;

    /// Train lengths `[2,5)`, `[5,10)`, `[10,∞)`.
    pub fn train_lengths() -> Vec<SplitSpec> {
        vec![
            SplitSpec::new("train-len-short", SplitKind::TrainSessionLength { lo: 2, hi: Some(5) }),
            SplitSpec::new(
                "train-len-medium",
                SplitKind::TrainSessionLength { lo: 5, hi: Some(10) },
            ),
            SplitSpec::new("train-len-long", SplitKind::TrainSessionLength { lo: 10, hi: None }),
        ]
    }

    /// Test lengths ≤5, 6..=10 and >10.
    pub fn test_lengths() -> Vec<SplitSpec> {
        vec![
            SplitSpec::new("test-len-short", SplitKind::TestSessionLength { lo: 2, hi: Some(6) }),
            SplitSpec::new("test-len-medium", SplitKind::TestSessionLength { lo: 6, hi: Some(11) }),
            SplitSpec::new("test-len-long", SplitKind::TestSessionLength { lo: 11, hi: None }),
        ]
    }

    /// Cumulative upper bounds plus one top bucket above the last bound,
    /// e.g. `[50, 100, 200, 300]` → ≤50, ≤100, ≤200, ≤300, >300.
    pub fn test_item_frequency(bounds: &[u64]) -> Vec<SplitSpec> {
        let mut out: Vec<SplitSpec> = bounds
            .iter()
            .map(|&b| {
                SplitSpec::new(
                    format!("test-freq-le{b}"),
                    SplitKind::TestItemFrequency {
                        bound: FreqBound::AtMost(b),
                    },
                )
            })
            .collect();
        if let Some(&top) = bounds.last() {
            out.push(SplitSpec::new(
                format!("test-freq-gt{top}"),
                SplitKind::TestItemFrequency {
                    bound: FreqBound::Above(top),
                },
            ));
        }
        out
    }

    pub fn train_recency(period_days: i64) -> Vec<SplitSpec> {
        [Recency::Recent, Recency::Old, Recency::Mixed]
            .into_iter()
            .map(|recency| {
                let name = match recency {
                    Recency::Recent => "recency-recent",
                    Recency::Old => "recency-old",
                    Recency::Mixed => "recency-mixed",
                };
                SplitSpec::new(name, SplitKind::TrainRecency { recency, period_days })
            })
            .collect()
    }

    pub fn train_fractions(denominators: &[usize], seed: u64) -> Vec<SplitSpec> {
        denominators
            .iter()
            .map(|&p| {
                SplitSpec::new(format!("fraction-1-{p}"), SplitKind::TrainFraction { denominator: p }).with_seed(seed)
            })
            .collect()
    }

    pub fn train_timespans(days: &[i64]) -> Vec<SplitSpec> {
        days.iter()
            .map(|&m| SplitSpec::new(format!("timespan-{m}d"), SplitKind::TrainTimespan { days: m }))
            .collect()
    }
}
