//! Line protocol for external predictors running as child processes.
//!
//! ```text
//! FIT <dataset-path>      →  READY [<protocol>]
//! PRED <K> <id,id,...>    →  OK <id:score id:score ...>
//! BYE                     →  (child exits)
//! ```
//! Any request may instead be answered with `ERR <message>`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ItemIdx, Vocabulary};
use crate::error::Result;
use crate::ranking::{RankedItem, Ranking, Recommender};

pub const PROTOCOL: &str = "sbr-bridge/1";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("cannot launch `{command}`: {source}")]
    Launch {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("no reply to {stage} within {secs} s")]
    Timeout { stage: &'static str, secs: f64 },
    #[error("protocol mismatch: expected {expected}, child speaks {got}")]
    VersionMismatch { expected: String, got: String },
    #[error("malformed reply `{line}`: {reason}")]
    Malformed { line: String, reason: String },
    #[error("child reported an error: {0}")]
    Remote(String),
    #[error("child process exited")]
    ChildExited,
    #[error("bridge is unusable after an earlier failure")]
    Poisoned,
    #[error("pipe error: {0}")]
    Pipe(#[from] std::io::Error),
    #[error("invalid bridge configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub handshake_timeout_secs: f64,
    pub request_timeout_secs: f64,
    pub protocol: String,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            command: Vec::new(),
            handshake_timeout_secs: 600.0,
            request_timeout_secs: 30.0,
            protocol: PROTOCOL.to_string(),
        }
    }
}

impl BridgeConfig {
    pub fn new<S: Into<String>>(command: impl IntoIterator<Item = S>) -> Self {
        Self {
            command: command.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.command.is_empty() {
            return Err(BridgeError::Config("empty launch command".into()));
        }
        let ok = |t: f64| t.is_finite() && t > 0.0;
        if !ok(self.handshake_timeout_secs) || !ok(self.request_timeout_secs) {
            return Err(BridgeError::Config("timeouts must be positive".into()));
        }
        Ok(())
    }
}

struct Channel {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
    poisoned: bool,
}

impl Channel {
    fn send(&mut self, line: &str) -> Result<(), BridgeError> {
        self.stdin.write_all(line.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        Ok(())
    }

    fn recv(&mut self, stage: &'static str, secs: f64) -> Result<String, BridgeError> {
        match self.lines.recv_timeout(Duration::from_secs_f64(secs)) {
            Ok(Ok(line)) => Ok(line.trim_end_matches('\r').to_string()),
            Ok(Err(e)) => Err(BridgeError::Pipe(e)),
            Err(RecvTimeoutError::Timeout) => Err(BridgeError::Timeout { stage, secs }),
            Err(RecvTimeoutError::Disconnected) => Err(BridgeError::ChildExited),
        }
    }

    fn request(&mut self, line: &str, stage: &'static str, secs: f64) -> Result<String, BridgeError> {
        if self.poisoned {
            return Err(BridgeError::Poisoned);
        }
        let reply = self.send(line).and_then(|()| self.recv(stage, secs));
        if reply.is_err() {
            self.poisoned = true;
            let _ = self.child.kill();
        }
        reply
    }
}

/// A fitted external model. Requests are serialized; one handle talks to
/// exactly one child process.
pub struct BridgePredictor {
    name: String,
    config: BridgeConfig,
    vocabulary: Arc<Vocabulary>,
    channel: Mutex<Channel>,
}

impl std::fmt::Debug for BridgePredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BridgePredictor")
            .field("name", &self.name)
            .field("command", &self.config.command)
            .finish()
    }
}

impl BridgePredictor {
    /// Launches the child and asks it to fit the canonical dataset at
    /// `train_path`, whose vocabulary is `vocabulary`.
    pub fn fit(
        name: &str,
        config: &BridgeConfig,
        train_path: &Path,
        vocabulary: Arc<Vocabulary>,
    ) -> Result<Self, BridgeError> {
        config.validate()?;
        let mut child = Command::new(&config.command[0])
            .args(&config.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| BridgeError::Launch {
                command: config.command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut channel = Channel {
            child,
            stdin,
            lines: rx,
            poisoned: false,
        };
        let reply = channel.request(
            &format!("FIT {}", train_path.display()),
            "FIT",
            config.handshake_timeout_secs,
        )?;
        let mut tokens = reply.split_whitespace();
        match tokens.next() {
            Some("READY") => {
                if let Some(version) = tokens.next() {
                    if version != config.protocol {
                        let _ = channel.child.kill();
                        return Err(BridgeError::VersionMismatch {
                            expected: config.protocol.clone(),
                            got: version.to_string(),
                        });
                    }
                }
            }
            Some("ERR") => {
                let _ = channel.child.kill();
                return Err(BridgeError::Remote(reply[3..].trim().to_string()));
            }
            _ => {
                let _ = channel.child.kill();
                return Err(BridgeError::Malformed {
                    line: reply,
                    reason: "expected READY".into(),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            config: config.clone(),
            vocabulary,
            channel: Mutex::new(channel),
        })
    }

    /// Sends one prediction request and parses the reply into a ranking of
    /// at most `k` items.
    pub fn predict(&self, prefix: &[ItemIdx], k: usize) -> Result<Ranking, BridgeError> {
        let ids: Vec<&str> = prefix.iter().map(|&i| self.vocabulary.id(i)).collect();
        let line = format!("PRED {k} {}", ids.join(","));
        let reply = {
            let mut ch = self.channel.lock().unwrap_or_else(|p| p.into_inner());
            ch.request(&line, "PRED", self.config.request_timeout_secs)?
        };
        self.parse_reply(&reply, k)
    }

    fn parse_reply(&self, reply: &str, k: usize) -> Result<Ranking, BridgeError> {
        let malformed = |reason: String| BridgeError::Malformed {
            line: reply.to_string(),
            reason,
        };
        let mut tokens = reply.split_whitespace();
        match tokens.next() {
            Some("OK") => {}
            Some("ERR") => return Err(BridgeError::Remote(reply[3..].trim().to_string())),
            _ => return Err(malformed("expected OK".into())),
        }
        let mut entries = Vec::new();
        for tok in tokens {
            let (id, score) = tok
                .rsplit_once(':')
                .ok_or_else(|| malformed(format!("`{tok}` is not id:score")))?;
            let item = self
                .vocabulary
                .get(id)
                .ok_or_else(|| malformed(format!("unknown item `{id}`")))?;
            let score: f64 = score.parse().map_err(|_| malformed(format!("bad score in `{tok}`")))?;
            entries.push(RankedItem { item, score });
        }
        if entries.len() > k {
            return Err(malformed(format!("{} items for K = {k}", entries.len())));
        }
        Ranking::new(entries).map_err(|e| malformed(e.to_string()))
    }
}

impl Drop for BridgePredictor {
    fn drop(&mut self) {
        let ch = self.channel.get_mut().unwrap_or_else(|p| p.into_inner());
        if !ch.poisoned {
            let _ = ch.send("BYE");
        }
        for _ in 0..50 {
            if matches!(ch.child.try_wait(), Ok(Some(_))) {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = ch.child.kill();
        let _ = ch.child.wait();
    }
}

impl Recommender for BridgePredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        let ranking = self.predict(prefix, k + exclusions.len())?;
        if exclusions.is_empty() {
            return Ok(ranking);
        }
        let kept = ranking
            .entries()
            .iter()
            .filter(|e| !exclusions.contains(&e.item))
            .take(k)
            .copied()
            .collect();
        Ranking::new(kept)
    }
}
