//! Sessions, vocabularies and the cleaning steps applied before any model
//! sees the data.

mod canonical;
mod ingest;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use canonical::{read_dataset, write_dataset, FORMAT_TAG};
pub use ingest::{
    ingest_events, ingest_file, sessionize, Column, Event, EventLog, IngestReport, Schema, SessionRule, TimeFormat,
};

/// Dense item index into a [`Vocabulary`].
pub type ItemIdx = u32;

pub const SECONDS_PER_DAY: i64 = 86_400;

/// UTC day number of an epoch timestamp.
pub fn utc_day(ts: i64) -> i64 {
    ts.div_euclid(SECONDS_PER_DAY)
}

/// Bijection between external item identifiers and dense indices.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    ids: Vec<String>,
    index: HashMap<String, ItemIdx>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.ids == other.ids
    }
}

impl Eq for Vocabulary {}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as ItemIdx).is_some() {
                return Err(Error::InvalidDataset(format!("duplicate item id `{id}`")));
            }
        }
        Ok(Self { ids, index })
    }

    pub fn intern(&mut self, id: &str) -> ItemIdx {
        if let Some(&idx) = self.index.get(id) {
            return idx;
        }
        let idx = self.ids.len() as ItemIdx;
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), idx);
        idx
    }

    pub fn get(&self, id: &str) -> Option<ItemIdx> {
        self.index.get(id).copied()
    }

    pub fn id(&self, idx: ItemIdx) -> &str {
        &self.ids[idx as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: u64,
    /// Timestamp of the first click.
    pub start_time: i64,
    /// Timestamp of the last click.
    pub end_time: i64,
    pub items: Vec<ItemIdx>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// An immutable collection of sessions over a shared vocabulary.
///
/// Train sets own a compacted vocabulary (every entry occurs at least once).
/// Test sets produced by [`filter_test_items`] borrow the vocabulary of the
/// train set they were filtered against, so item indices line up with the
/// models fitted on that train set.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    sessions: Vec<Session>,
    vocabulary: Arc<Vocabulary>,
    freq: Vec<u64>,
    role: Role,
}

impl SessionDataset {
    /// Builds a dataset whose vocabulary is re-interned in order of first
    /// appearance over `sessions`. Items in `sessions` index into `source`.
    pub fn compacted(mut sessions: Vec<Session>, source: &Vocabulary, role: Role) -> Self {
        sort_sessions(&mut sessions);
        let mut remap: HashMap<ItemIdx, ItemIdx> = HashMap::new();
        let mut vocabulary = Vocabulary::new();
        for session in &mut sessions {
            for item in &mut session.items {
                *item = *remap
                    .entry(*item)
                    .or_insert_with(|| vocabulary.intern(source.id(*item)));
            }
        }
        Self::with_vocabulary(sessions, Arc::new(vocabulary), role)
    }

    /// Builds a dataset over an existing vocabulary without re-indexing.
    pub fn with_vocabulary(mut sessions: Vec<Session>, vocabulary: Arc<Vocabulary>, role: Role) -> Self {
        sort_sessions(&mut sessions);
        let mut freq = vec![0u64; vocabulary.len()];
        for session in &sessions {
            for &item in &session.items {
                freq[item as usize] += 1;
            }
        }
        Self {
            sessions,
            vocabulary,
            freq,
            role,
        }
    }

    /// Rebuilds a derived dataset: train sets are compacted, test sets keep
    /// their vocabulary.
    pub fn derive(&self, sessions: Vec<Session>) -> Self {
        match self.role {
            Role::Train => Self::compacted(sessions, &self.vocabulary, Role::Train),
            Role::Test => Self::with_vocabulary(sessions, Arc::clone(&self.vocabulary), Role::Test),
        }
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn shared_vocabulary(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocabulary)
    }

    /// Occurrence count per item index.
    pub fn freq(&self) -> &[u64] {
        &self.freq
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn n_items(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn n_clicks(&self) -> u64 {
        self.freq.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Checks the structural invariants. `cleaned` additionally requires the
    /// post-preprocessing guarantees (length ≥ 2, no consecutive repeats).
    pub fn validate(&self, cleaned: bool) -> Result<()> {
        let n = self.vocabulary.len();
        let mut counts = vec![0u64; n];
        for (i, s) in self.sessions.iter().enumerate() {
            if s.items.is_empty() {
                return Err(Error::InvalidDataset(format!("session {} is empty", s.id)));
            }
            if i > 0 && self.sessions[i - 1].start_time > s.start_time {
                return Err(Error::InvalidDataset("sessions not sorted by start time".into()));
            }
            if s.end_time < s.start_time || s.start_time < 0 {
                return Err(Error::InvalidDataset(format!("session {} has bad times", s.id)));
            }
            for &item in &s.items {
                if item as usize >= n {
                    return Err(Error::InvalidDataset(format!(
                        "session {} references item {item} outside vocabulary",
                        s.id
                    )));
                }
                counts[item as usize] += 1;
            }
            if cleaned {
                if s.items.len() < 2 {
                    return Err(Error::InvalidDataset(format!("session {} shorter than 2", s.id)));
                }
                if s.items.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::InvalidDataset(format!(
                        "session {} has consecutive repeats",
                        s.id
                    )));
                }
            }
        }
        if counts != self.freq {
            return Err(Error::InvalidDataset("frequency table out of sync".into()));
        }
        Ok(())
    }
}

fn sort_sessions(sessions: &mut [Session]) {
    sessions.sort_by_key(|s| (s.start_time, s.id));
}

/// Replaces runs of the same item with a single click.
pub fn collapse_repeats(items: &mut Vec<ItemIdx>) {
    items.dedup();
}

/// Collapses consecutive repeats, then drops sessions left with fewer than
/// two clicks.
pub fn preprocess(ds: &SessionDataset) -> SessionDataset {
    let sessions = ds
        .sessions
        .iter()
        .filter_map(|s| {
            let mut items = s.items.clone();
            collapse_repeats(&mut items);
            (items.len() >= 2).then(|| Session { items, ..s.clone() })
        })
        .collect();
    ds.derive(sessions)
}

/// Re-encodes `test` into the vocabulary of `train`, dropping clicks on items
/// the train set has never seen, then re-applies the cleaning rules.
pub fn filter_test_items(train: &SessionDataset, test: &SessionDataset) -> SessionDataset {
    let train_vocab = train.shared_vocabulary();
    let test_vocab = test.vocabulary();
    let sessions = test
        .sessions
        .iter()
        .filter_map(|s| {
            let mut items: Vec<ItemIdx> = s
                .items
                .iter()
                .filter_map(|&i| train_vocab.get(test_vocab.id(i)))
                .collect();
            collapse_repeats(&mut items);
            (items.len() >= 2).then(|| Session { items, ..s.clone() })
        })
        .collect();
    SessionDataset::with_vocabulary(sessions, train_vocab, Role::Test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_items: usize,
    pub n_sessions: usize,
    pub n_clicks: u64,
    pub timespan_days: i64,
    pub avg_item_frequency: f64,
    pub avg_session_length: f64,
}

pub fn compute_stats(ds: &SessionDataset) -> Result<DatasetStats> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot compute statistics of an empty dataset".into()));
    }
    let n_items = ds.freq.iter().filter(|&&f| f > 0).count();
    let n_sessions = ds.sessions.len();
    let n_clicks = ds.n_clicks();
    let first = ds.sessions.iter().map(|s| s.start_time).min().unwrap_or(0);
    let last = ds.sessions.iter().map(|s| s.end_time).max().unwrap_or(0);
    let span = last - first;
    let timespan_days = ((span + SECONDS_PER_DAY - 1) / SECONDS_PER_DAY).max(1);
    Ok(DatasetStats {
        n_items,
        n_sessions,
        n_clicks,
        timespan_days,
        avg_item_frequency: n_clicks as f64 / n_items as f64,
        avg_session_length: n_clicks as f64 / n_sessions as f64,
    })
}
