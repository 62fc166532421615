use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{utc_day, ItemIdx, Role, Session, SessionDataset, Vocabulary};
use crate::error::{Error, Result};

/// A column selected by header name or zero-based position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

impl Column {
    fn resolve(&self, headers: Option<&csv::StringRecord>) -> Result<usize> {
        match (self, headers) {
            (Column::Index(i), _) => Ok(*i),
            (Column::Name(name), Some(headers)) => headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::MissingColumn(name.clone())),
            (Column::Name(name), None) => Err(Error::MissingColumn(format!(
                "{name} (named columns need a header row)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFormat {
    /// Integer or fractional epoch seconds.
    #[default]
    Seconds,
    /// Epoch milliseconds.
    Millis,
    /// RFC 3339 / ISO 8601 date-time, e.g. `2014-04-07T10:51:09.277Z`.
    Iso8601,
    /// Calendar day with a chrono format string; mapped to midnight UTC.
    Date(String),
}

impl TimeFormat {
    pub fn parse(&self, raw: &str) -> Option<i64> {
        let raw = raw.trim();
        let ts = match self {
            TimeFormat::Seconds => match raw.parse::<i64>() {
                Ok(v) => v,
                Err(_) => {
                    let v = raw.parse::<f64>().ok()?;
                    if !v.is_finite() {
                        return None;
                    }
                    v.floor() as i64
                }
            },
            TimeFormat::Millis => raw.parse::<i64>().ok()?.div_euclid(1000),
            TimeFormat::Iso8601 => match DateTime::parse_from_rfc3339(raw) {
                Ok(dt) => dt.timestamp(),
                Err(_) => NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S%.f")
                    .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%.f"))
                    .ok()?
                    .and_utc()
                    .timestamp(),
            },
            TimeFormat::Date(fmt) => NaiveDate::parse_from_str(raw, fmt)
                .ok()?
                .and_hms_opt(0, 0, 0)?
                .and_utc()
                .timestamp(),
        };
        (ts >= 0).then_some(ts)
    }
}

/// Maps delimiter-separated columns onto click events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub session: Column,
    pub item: Column,
    pub time: Column,
    pub time_format: TimeFormat,
    pub delimiter: char,
    pub has_header: bool,
    /// Optional event-type column; when set only rows whose value is listed in
    /// `keep_event_types` are used. Other rows are skipped, not rejected.
    pub event_type: Option<Column>,
    pub keep_event_types: Vec<String>,
    pub max_reject_rate: f64,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            session: Column::Name("session_id".into()),
            item: Column::Name("item_id".into()),
            time: Column::Name("ts".into()),
            time_format: TimeFormat::Seconds,
            delimiter: ',',
            has_header: true,
            event_type: None,
            keep_event_types: Vec::new(),
            max_reject_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub session_key: String,
    pub item: ItemIdx,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub skipped: usize,
}

/// Events in input order with items interned into `vocabulary`.
#[derive(Debug, Clone)]
pub struct EventLog {
    pub events: Vec<Event>,
    pub vocabulary: Vocabulary,
    pub report: IngestReport,
}

pub fn ingest_file(path: impl AsRef<Path>, schema: &Schema) -> Result<EventLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_events(file, schema)
}

pub fn ingest_events<R: Read>(source: R, schema: &Schema) -> Result<EventLog> {
    if !schema.delimiter.is_ascii() {
        return Err(Error::Config(format!(
            "delimiter {:?} must be a single ASCII character",
            schema.delimiter
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(source);

    let headers = if schema.has_header {
        Some(reader.headers().map_err(|e| Error::Source(e.to_string()))?.clone())
    } else {
        None
    };
    let session_col = schema.session.resolve(headers.as_ref())?;
    let item_col = schema.item.resolve(headers.as_ref())?;
    let time_col = schema.time.resolve(headers.as_ref())?;
    let type_col = schema
        .event_type
        .as_ref()
        .map(|c| c.resolve(headers.as_ref()))
        .transpose()?;

    let mut vocabulary = Vocabulary::new();
    let mut events = Vec::new();
    let mut report = IngestReport::default();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.is_io_error() => return Err(Error::Source(e.to_string())),
            Err(_) => {
                report.records += 1;
                report.rejected += 1;
                continue;
            }
        }
        report.records += 1;
        if let Some(col) = type_col {
            match record.get(col) {
                Some(t) if schema.keep_event_types.iter().any(|k| k == t.trim()) => {}
                _ => {
                    report.skipped += 1;
                    continue;
                }
            }
        }
        let fields = (
            record.get(session_col).map(str::trim),
            record.get(item_col).map(str::trim),
            record.get(time_col).and_then(|t| schema.time_format.parse(t)),
        );
        match fields {
            (Some(key), Some(item), Some(timestamp)) if !key.is_empty() && !item.is_empty() => {
                events.push(Event {
                    session_key: key.to_owned(),
                    item: vocabulary.intern(item),
                    timestamp,
                });
                report.accepted += 1;
            }
            _ => report.rejected += 1,
        }
    }

    let considered = report.records - report.skipped;
    if considered > 0 {
        let rate = report.rejected as f64 / considered as f64;
        if rate > schema.max_reject_rate {
            return Err(Error::RejectRate {
                rejected: report.rejected,
                total: considered,
                rate,
                limit: schema.max_reject_rate,
            });
        }
    }
    if report.rejected > 0 {
        log::warn!("ingest: rejected {} of {} records", report.rejected, considered);
    }
    Ok(EventLog {
        events,
        vocabulary,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionRule {
    /// Group on the session key.
    #[default]
    ByKey,
    /// Group on (user key, UTC day) for logs with day granularity.
    ByKeyAndDay,
}

/// Groups events into sessions.
///
/// Events inside a session are ordered by timestamp, keeping input order on
/// ties. Session ids are dense and follow (start time, key) order, and the
/// vocabulary is re-interned by first appearance over that order, so the
/// result does not depend on how the input events were shuffled.
pub fn sessionize(log: &EventLog, rule: SessionRule) -> Result<SessionDataset> {
    if log.events.is_empty() {
        return Err(Error::Empty("no events to sessionize".into()));
    }
    let mut groups: HashMap<(&str, i64), Vec<(i64, ItemIdx)>> = HashMap::new();
    for e in &log.events {
        let day = match rule {
            SessionRule::ByKey => 0,
            SessionRule::ByKeyAndDay => utc_day(e.timestamp),
        };
        groups
            .entry((e.session_key.as_str(), day))
            .or_default()
            .push((e.timestamp, e.item));
    }
    let mut grouped: Vec<_> = groups
        .into_iter()
        .map(|(key, mut clicks)| {
            clicks.sort_by_key(|&(ts, _)| ts);
            (clicks[0].0, key, clicks)
        })
        .collect();
    grouped.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let sessions = grouped
        .into_iter()
        .enumerate()
        .map(|(id, (start_time, _, clicks))| Session {
            id: id as u64,
            start_time,
            end_time: clicks.last().map(|c| c.0).unwrap_or(start_time),
            items: clicks.into_iter().map(|(_, item)| item).collect(),
        })
        .collect();
    Ok(SessionDataset::compacted(sessions, &log.vocabulary, Role::Train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::ids;
    use crate::dataset::SECONDS_PER_DAY;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn schema() -> Schema {
        Schema::default()
    }

    #[test]
    fn three_line_csv() {
        let csv = "session_id,item_id,ts\ns1,a,10\ns1,b,11\ns2,a,12\n";
        let log = ingest_events(csv.as_bytes(), &schema()).unwrap();
        assert_eq!(log.events.len(), 3);
        assert_eq!(log.report.accepted, 3);
        assert_eq!(log.events[2].session_key, "s2");
        assert_eq!(log.vocabulary.id(log.events[2].item), "a");
    }

    #[test]
    fn empty_item_is_rejected_and_counted() {
        let mut rows = String::from("session_id,item_id,ts\n");
        for i in 0..200 {
            rows.push_str(&format!("s{},{},{}\n", i % 7, i % 11, i));
        }
        rows.push_str("s1,,300\n");
        let log = ingest_events(rows.as_bytes(), &schema()).unwrap();
        assert_eq!(log.report.rejected, 1);
        assert_eq!(log.events.len(), 200);
    }

    #[test]
    fn reject_rate_above_threshold_errors() {
        let csv = "session_id,item_id,ts\ns1,a,10\ns1,,11\ns2,a,xx\n";
        let err = ingest_events(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(
            err,
            Error::RejectRate {
                rejected: 2,
                total: 3,
                ..
            }
        ));
    }

    #[test]
    fn missing_named_column() {
        let csv = "sid,item_id,ts\ns1,a,10\n";
        let err = ingest_events(csv.as_bytes(), &schema()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "session_id"));
    }

    #[test]
    fn day_granular_source_maps_to_midnight_utc() {
        let schema = Schema {
            session: Column::Name("user_id".into()),
            time: Column::Name("day".into()),
            time_format: TimeFormat::Date("%Y-%m-%d".into()),
            ..Schema::default()
        };
        let csv = "user_id,item_id,day\nu1,a,2015-09-01\nu1,b,2015-11-01\nu2,c,1970-01-02\n";
        let log = ingest_events(csv.as_bytes(), &schema).unwrap();
        // 2015-09-01: 16679 days after the epoch; 2015-11-01: 16740.
        assert_eq!(log.events[0].timestamp, 16_679 * 86_400);
        assert_eq!(log.events[0].timestamp, 1_441_065_600);
        assert_eq!(log.events[1].timestamp, 1_446_336_000);
        assert_eq!(log.events[2].timestamp, 86_400);
    }

    #[test]
    fn positional_columns_without_header() {
        let schema = Schema {
            session: Column::Index(0),
            time: Column::Index(1),
            item: Column::Index(2),
            time_format: TimeFormat::Iso8601,
            has_header: false,
            ..Schema::default()
        };
        let csv = "1,2014-04-07T10:51:09.277Z,214536502,0\n1,2014-04-07T10:54:09.868Z,214536500,0\n";
        let log = ingest_events(csv.as_bytes(), &schema).unwrap();
        assert_eq!(log.events.len(), 2);
        assert_eq!(log.events[0].timestamp, 1_396_867_869);
    }

    #[test]
    fn event_type_filter_skips_without_rejecting() {
        let schema = Schema {
            event_type: Some(Column::Name("event".into())),
            keep_event_types: vec!["view".into(), "addtocart".into()],
            ..Schema::default()
        };
        let csv = "session_id,item_id,ts,event\ns,a,1,view\ns,b,2,transaction\ns,c,3,addtocart\n";
        let log = ingest_events(csv.as_bytes(), &schema).unwrap();
        assert_eq!(log.events.len(), 2);
        assert_eq!(log.report.skipped, 1);
        assert_eq!(log.report.rejected, 0);
    }

    fn log_of(events: &[(&str, &str, i64)]) -> EventLog {
        let mut vocabulary = Vocabulary::new();
        let events = events
            .iter()
            .map(|&(k, i, t)| Event {
                session_key: k.into(),
                item: vocabulary.intern(i),
                timestamp: t,
            })
            .collect();
        EventLog {
            events,
            vocabulary,
            report: IngestReport::default(),
        }
    }

    #[test]
    fn one_key_in_time_order() {
        let log = log_of(&[("k", "c", 3), ("k", "a", 1), ("k", "b", 2)]);
        let ds = sessionize(&log, SessionRule::ByKey).unwrap();
        assert_eq!(ds.sessions().len(), 1);
        assert_eq!(ids(&ds, 0), ["a", "b", "c"]);
        assert_eq!(ds.sessions()[0].start_time, 1);
        assert_eq!(ds.sessions()[0].end_time, 3);
    }

    #[test]
    fn by_key_and_day_splits_days() {
        let d = SECONDS_PER_DAY;
        let log = log_of(&[("u", "a", 5 * d + 10), ("u", "b", 5 * d + 20), ("u", "c", 6 * d + 1)]);
        let ds = sessionize(&log, SessionRule::ByKeyAndDay).unwrap();
        assert_eq!(ds.sessions().len(), 2);
        assert_eq!(ids(&ds, 0), ["a", "b"]);
        assert_eq!(ids(&ds, 1), ["c"]);
        let by_key = sessionize(&log, SessionRule::ByKey).unwrap();
        assert_eq!(by_key.sessions().len(), 1);
    }

    #[test]
    fn interleaved_keys_match_sort_then_group() {
        let events = [
            ("A", "x", 1),
            ("B", "y", 2),
            ("A", "z", 3),
            ("B", "x", 4),
            ("A", "y", 5),
        ];
        let ds = sessionize(&log_of(&events), SessionRule::ByKey).unwrap();

        // oracle: sort by (key, ts) and cut at key changes
        let mut sorted = events.to_vec();
        sorted.sort_by_key(|&(k, _, t)| (k, t));
        let mut expected: Vec<(i64, Vec<&str>)> = Vec::new();
        let mut last_key = "";
        for (k, i, t) in sorted {
            if k != last_key {
                expected.push((t, Vec::new()));
                last_key = k;
            }
            expected.last_mut().unwrap().1.push(i);
        }
        expected.sort_by_key(|e| e.0);
        assert_eq!(ds.sessions().len(), expected.len());
        for (n, (start, items)) in expected.iter().enumerate() {
            assert_eq!(ds.sessions()[n].start_time, *start);
            assert_eq!(ids(&ds, n), *items);
        }
    }

    #[test]
    fn ties_keep_input_order() {
        let log = log_of(&[("k", "b", 1), ("k", "a", 1), ("k", "c", 0)]);
        let ds = sessionize(&log, SessionRule::ByKey).unwrap();
        assert_eq!(ids(&ds, 0), ["c", "b", "a"]);
    }

    #[test]
    fn empty_input_errors() {
        assert!(matches!(
            sessionize(&log_of(&[]), SessionRule::ByKey),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn shuffling_events_does_not_change_the_dataset() {
        let mut events = Vec::new();
        for k in 0..15 {
            for j in 0..(k % 4 + 1) {
                events.push((
                    format!("s{k}"),
                    format!("i{}", (k * 3 + j) % 9),
                    (k * 7 + j * 13) as i64,
                ));
            }
        }
        let as_refs = |ev: &[(String, String, i64)]| {
            let tmp: Vec<(&str, &str, i64)> = ev.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)).collect();
            sessionize(&log_of(&tmp), SessionRule::ByKey).unwrap()
        };
        let reference = as_refs(&events);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            events.shuffle(&mut rng);
            assert_eq!(as_refs(&events), reference);
        }
    }
}
