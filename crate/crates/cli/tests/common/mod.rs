#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const DAY: i64 = 86_400;
pub const START: i64 = 1_600_000_000;

/// Small deterministic generator; tests need no RNG dependency.
pub struct Lcg(u64);

impl Lcg {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407))
    }

    pub fn next(&mut self, n: u64) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 33) % n
    }
}

/// Click log over `days` days with a planted successor pattern.
pub fn click_log(days: i64, sessions_per_day: usize, n_items: u64, seed: u64) -> String {
    let mut rng = Lcg::new(seed);
    let mut out = String::from("session_id,item_id,ts\n");
    let mut sid = 0;
    for d in 0..days {
        for s in 0..sessions_per_day {
            sid += 1;
            let len = 2 + rng.next(6);
            let mut t = START + d * DAY + 600 * s as i64;
            let mut item = rng.next(n_items).min(rng.next(n_items));
            for _ in 0..len {
                writeln!(out, "s{sid},i{item},{t}").unwrap();
                t += 30;
                item = if rng.next(10) < 7 {
                    (item * 7 + 3) % n_items
                } else {
                    rng.next(n_items).min(rng.next(n_items))
                };
            }
        }
    }
    out
}

pub fn write_log(dir: &Path) -> PathBuf {
    let path = dir.join("clicks.csv");
    std::fs::write(&path, click_log(12, 25, 40, 11)).unwrap();
    path
}

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, body).unwrap();
    path
}

pub fn sbrbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbrbench"))
        .args(args)
        .env_remove("SBR_OUTPUT_DIR")
        .env_remove("SBR_WORKERS")
        .output()
        .expect("binary runs")
}

pub fn stub() -> &'static str {
    env!("CARGO_BIN_EXE_sbr-bridge-stub")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn describe(out: &Output) -> String {
    format!(
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}
