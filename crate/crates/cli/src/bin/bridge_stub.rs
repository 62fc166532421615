//! Reference external predictor for the bridge protocol.
//!
//! Modes:
//! - `popularity`: ranks items by train click count.
//! - `fixed ID...`: always returns the given ids with descending scores.
//! - `silent`: reads requests and never answers.
//! - `mismatch`: acknowledges with a foreign protocol version.
//! - `unsorted`: answers predictions with ascending scores.

use std::io::{self, BufRead, Write};
use std::process::ExitCode;

use sbr_core::bridge::PROTOCOL;
use sbr_core::dataset::read_dataset;

enum Mode {
    Popularity,
    Fixed(Vec<String>),
    Silent,
    Mismatch,
    Unsorted,
}

/// Ids with their train counts, most clicked first, ties in vocabulary order.
fn popularity(path: &str) -> Result<Vec<(String, u64)>, String> {
    let ds = read_dataset(path.trim()).map_err(|e| e.to_string())?;
    let mut items: Vec<(usize, u64)> = ds.freq().iter().copied().enumerate().filter(|&(_, f)| f > 0).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(items
        .into_iter()
        .map(|(i, f)| (ds.vocabulary().id(i as _).to_string(), f))
        .collect())
}

fn reply(out: &mut impl Write, line: &str) -> io::Result<()> {
    writeln!(out, "{line}")?;
    out.flush()
}

fn serve(mode: Mode) -> io::Result<()> {
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    let mut ranked: Vec<(String, u64)> = Vec::new();
    for line in stdin.lock().lines() {
        let line = line?;
        let (cmd, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
        if matches!(mode, Mode::Silent) {
            if cmd == "BYE" {
                return Ok(());
            }
            continue;
        }
        match cmd {
            "FIT" => match &mode {
                Mode::Mismatch => reply(&mut out, "READY sbr-bridge/0")?,
                Mode::Popularity => match popularity(rest) {
                    Ok(r) => {
                        ranked = r;
                        reply(&mut out, &format!("READY {PROTOCOL}"))?
                    }
                    Err(e) => reply(&mut out, &format!("ERR {e}"))?,
                },
                _ => reply(&mut out, &format!("READY {PROTOCOL}"))?,
            },
            "PRED" => {
                let k: usize = match rest.split(' ').next().and_then(|t| t.parse().ok()) {
                    Some(k) => k,
                    None => {
                        reply(&mut out, "ERR bad K")?;
                        continue;
                    }
                };
                let pairs: Vec<String> = match &mode {
                    Mode::Popularity => ranked.iter().take(k).map(|(id, f)| format!("{id}:{f}")).collect(),
                    Mode::Fixed(ids) => ids
                        .iter()
                        .take(k)
                        .enumerate()
                        .map(|(i, id)| format!("{id}:{}", ids.len() - i))
                        .collect(),
                    Mode::Unsorted => ["1:0.1", "2:0.5", "3:0.9"]
                        .iter()
                        .take(k)
                        .map(|s| s.to_string())
                        .collect(),
                    Mode::Mismatch | Mode::Silent => Vec::new(),
                };
                reply(&mut out, format!("OK {}", pairs.join(" ")).trim_end())?;
            }
            "BYE" => return Ok(()),
            other => reply(&mut out, &format!("ERR unknown request {other}"))?,
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = match args.first().map(String::as_str) {
        Some("popularity") => Mode::Popularity,
        Some("fixed") => Mode::Fixed(args[1..].to_vec()),
        Some("silent") => Mode::Silent,
        Some("mismatch") => Mode::Mismatch,
        Some("unsorted") => Mode::Unsorted,
        _ => {
            eprintln!("usage: sbr-bridge-stub popularity|fixed ID...|silent|mismatch|unsorted");
            return ExitCode::from(2);
        }
    };
    match serve(mode) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
