//! Line-delimited canonical form of a [`SessionDataset`].
//!
//! The first line is a JSON header carrying the format tag, the role and the
//! full vocabulary (external item ids in index order). Every following line
//! is one session with dense item indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ItemIdx, Role, Session, SessionDataset, Vocabulary};
use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "sbr-dataset/1";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    role: Role,
    items: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: u64,
    start: i64,
    end: i64,
    items: Vec<ItemIdx>,
}

impl SessionDataset {
    pub fn write_canonical<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            format: FORMAT_TAG.to_owned(),
            role: self.role,
            items: self.vocabulary.ids().to_vec(),
        };
        let io = |e| Error::Source(format!("write failed: {e}"));
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n").map_err(io)?;
        for s in &self.sessions {
            let line = Line {
                id: s.id,
                start: s.start_time,
                end: s.end_time,
                items: s.items.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_canonical<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Cache("missing header line".into()))?
            .map_err(|e| Error::Source(e.to_string()))?;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != FORMAT_TAG {
            return Err(Error::Cache(format!(
                "unsupported dataset format `{}` (expected `{FORMAT_TAG}`)",
                header.format
            )));
        }
        let vocabulary = Vocabulary::from_ids(header.items)?;
        let mut sessions = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::Source(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line)?;
            sessions.push(Session {
                id: l.id,
                start_time: l.start,
                end_time: l.end,
                items: l.items,
            });
        }
        let ds = SessionDataset::with_vocabulary(sessions, Arc::new(vocabulary), header.role);
        ds.validate(false)?;
        Ok(ds)
    }

    /// SHA-256 of the canonical encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut hasher = HashWriter(Sha256::new());
        self.write_canonical(&mut hasher).expect("hashing never fails");
        hex::encode(hasher.0.finalize())
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

pub fn write_dataset(ds: &SessionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    ds.write_canonical(&mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<SessionDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    SessionDataset::read_canonical(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::testing::dataset;

    #[test]
    fn round_trips_and_hash_is_stable() {
        let ds = dataset(&[&["a", "b"], &["b", "c", "a"]]);
        let mut buf = Vec::new();
        ds.write_canonical(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(r#"{"format":"sbr-dataset/1","role":"train","items":["a","b","c"]}"#));
        let back = SessionDataset::read_canonical(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.content_hash(), ds.content_hash());
        assert_eq!(ds.content_hash().len(), 64);
    }

    #[test]
    fn rejects_unknown_version() {
        let text = "{\"format\":\"sbr-dataset/9\",\"role\":\"train\",\"items\":[]}\n";
        assert!(matches!(
            SessionDataset::read_canonical(text.as_bytes()),
            Err(Error::Cache(_))
        ));
    }
}
