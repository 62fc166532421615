use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{AlgorithmSpec, DatasetSource, ExperimentConfig, Preprocess, SourceFormat};
use crate::algorithms::{fit, AlgorithmConfig, FitContext};
use crate::dataset::{ingest_file, preprocess, read_dataset, sessionize, SessionDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, measure_resources, EvalOptions, MetricRecord, MetricReport, ResourceReport};
use crate::splits::{generate_split, identity_split, BaseSplit, SplitResult};
use crate::tuning::{config_to_json, derive_seed, make_validation_split, random_search, SearchResult, TrialRecord};

pub const BASE_SPLIT_NAME: &str = "base";
const CELL_FILE: &str = "cell.json";
const TUNING_CUTOFF: usize = 20;

/// Reads the configured source, optionally cleans it and takes the
/// temporal holdout.
pub fn load_base_split(source: &DatasetSource, pre: &Preprocess) -> Result<BaseSplit> {
    let ds = match source.format {
        SourceFormat::Events => {
            let log = ingest_file(&source.path, &source.schema)?;
            sessionize(&log, source.session_rule)?
        }
        SourceFormat::Canonical => read_dataset(&source.path)?,
    };
    let ds = if pre.clean { preprocess(&ds) } else { ds };
    BaseSplit::from_holdout(ds, pre.holdout_days)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// Everything a finished (split, model) cell produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub split: String,
    pub model: String,
    pub manifest: Option<String>,
    pub fingerprint: String,
    pub status: CellStatus,
    pub error: Option<String>,
    pub seed: u64,
    pub config: Option<AlgorithmConfig>,
    pub best_trial: Option<usize>,
    pub validation_hr20: Option<f64>,
    pub metrics: Vec<MetricRecord>,
    pub resources: Option<ResourceReport>,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrialRow<'a> {
    split: &'a str,
    model: &'a str,
    #[serde(flatten)]
    trial: TrialRecord,
}

/// Completion log line, appended as cells finish.
#[derive(Serialize)]
struct JournalEntry<'a> {
    split: &'a str,
    model: &'a str,
    status: CellStatus,
    error: Option<&'a str>,
    metrics: &'a [MetricRecord],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub split: String,
    pub model: String,
    pub status: CellStatus,
    pub reused: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl RunSummary {
    pub fn n_failed(&self) -> usize {
        self.cells.iter().filter(|c| c.status == CellStatus::Failed).count()
    }

    /// 0 when every cell succeeded, 1 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.n_failed() == 0 {
            0
        } else {
            1
        }
    }
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Seed of a cell: a function of the master seed and the cell's names only.
pub fn cell_seed(master: u64, split: &str, model: &str) -> u64 {
    derive_seed(master, stable_hash(&[split, model]))
}

fn fingerprint(spec: &AlgorithmSpec, config: &ExperimentConfig) -> Result<String> {
    let value = serde_json::json!({
        "algorithm": spec,
        "cutoffs": config.cutoffs,
        "exclusion": config.exclusion,
        "seed": config.seed,
    });
    let digest = Sha256::digest(serde_json::to_vec(&value)?);
    Ok(hex::encode(&digest[..8]))
}

fn dir_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn cell_dir(output: &Path, split: &str, model: &str) -> PathBuf {
    output
        .join("cells")
        .join(format!("{}__{}", dir_name(split), dir_name(model)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_cell(path: &Path) -> Option<CellRecord> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

struct Cell<'a> {
    split_name: String,
    split: std::result::Result<&'a SplitResult, String>,
    spec: &'a AlgorithmSpec,
    model: String,
}

fn fit_with_stopping(
    config: &AlgorithmConfig,
    train: &SessionDataset,
    validation: Option<&SessionDataset>,
    name: &str,
    workdir: &Path,
) -> Result<crate::algorithms::FittedModel> {
    let ctx = FitContext {
        name: Some(name),
        validation,
        patience: None,
        workdir: Some(workdir),
    };
    fit(config, train, &ctx)
}

fn run_cell(cell: &Cell<'_>, config: &ExperimentConfig, fingerprint: String, dir: &Path) -> CellRecord {
    let seed = cell_seed(config.seed, &cell.split_name, &cell.model);
    let mut record = CellRecord {
        split: cell.split_name.clone(),
        model: cell.model.clone(),
        manifest: cell.split.as_ref().ok().map(|s| s.manifest.id()),
        fingerprint,
        status: CellStatus::Failed,
        error: None,
        seed,
        config: None,
        best_trial: None,
        validation_hr20: None,
        metrics: Vec::new(),
        resources: None,
        trials: Vec::new(),
    };
    let split = match &cell.split {
        Ok(s) => s,
        Err(e) => {
            record.error = Some(e.clone());
            return record;
        }
    };
    match execute(cell.spec, &cell.model, split, config, seed, dir, &mut record) {
        Ok(()) => record.status = CellStatus::Ok,
        Err(e) => {
            log::error!("cell {}/{} failed: {e}", cell.split_name, cell.model);
            record.error = Some(e.to_string());
        }
    }
    record
}

/// Random search over the algorithm's space, scored by HR@20 on `validation`.
fn tune_on(
    spec: &AlgorithmSpec,
    model_name: &str,
    fit_set: &SessionDataset,
    validation: &SessionDataset,
    stopping: bool,
    seed: u64,
    dir: &Path,
) -> Result<SearchResult> {
    let space = spec.search_space()?;
    random_search(&space, spec.n_trials(), seed, |params, trial_seed| {
        let mut cfg = spec.config_with(&config_to_json(params))?;
        if !spec.seed_pinned() {
            cfg.set_seed(trial_seed);
        }
        let val = stopping.then_some(validation);
        let model = fit_with_stopping(&cfg, fit_set, val, model_name, dir)?;
        let eval = evaluate(
            &model,
            fit_set,
            validation,
            &[TUNING_CUTOFF],
            &EvalOptions::sequential(),
        )?;
        Ok(eval.metrics[0].hr)
    })
}

/// Tunes one algorithm on the train side of `split` without a final fit.
pub fn tune_algorithm(
    spec: &AlgorithmSpec,
    split: &SplitResult,
    master_seed: u64,
    workdir: &Path,
) -> Result<SearchResult> {
    let model_name = spec.display_name()?;
    let seed = cell_seed(master_seed, &split.manifest.spec.name, &model_name);
    let stopping = spec.early_stopping.unwrap_or(true) && spec.base_config()?.uses_early_stopping();
    let (fit_set, validation) = make_validation_split(&split.train)?;
    tune_on(spec, &model_name, &fit_set, &validation, stopping, seed, workdir)
}

fn execute(
    spec: &AlgorithmSpec,
    model_name: &str,
    split: &SplitResult,
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    record: &mut CellRecord,
) -> Result<()> {
    let train = split.train.as_ref();
    let base = spec.base_config()?;
    let stopping = spec.early_stopping.unwrap_or(true) && base.uses_early_stopping();
    let needs_validation = spec.tune || stopping;
    let held_out = if needs_validation {
        Some(make_validation_split(train)?)
    } else {
        None
    };

    let mut chosen = base;
    if spec.tune {
        let (fit_set, validation) = held_out.as_ref().expect("validation split present");
        let result = tune_on(spec, model_name, fit_set, validation, stopping, seed, dir)?;
        record.trials = result.trials.clone();
        record.best_trial = Some(result.best_trial);
        record.validation_hr20 = Some(result.best_score);
        chosen = spec.config_with(&config_to_json(&result.best))?;
    }
    if !spec.seed_pinned() {
        chosen.set_seed(seed);
    }
    record.config = Some(chosen.clone());

    let (fitted, train_m) = measure_resources(|| match (&held_out, stopping) {
        (Some((fit_set, validation)), true) => fit_with_stopping(&chosen, fit_set, Some(validation), model_name, dir),
        _ => fit_with_stopping(&chosen, train, None, model_name, dir),
    });
    let fitted = fitted?;

    let options = EvalOptions {
        exclusion: config.exclusion,
        workers: 0,
        record_latency: true,
    };
    let (eval, eval_m) = measure_resources(|| evaluate(&fitted, train, &split.test, &config.cutoffs, &options));
    let eval = eval?;
    let manifest = split.manifest.id();
    record.metrics = MetricReport::new(model_name, &record.split, &manifest, &eval).records;
    record.resources = Some(ResourceReport {
        model: model_name.to_string(),
        split: record.split.clone(),
        train_secs: train_m.wall_secs,
        peak_rss_bytes: train_m.peak_rss_bytes,
        eval_secs: eval_m.wall_secs,
        latency_mean_ms: eval.latency.map(|l| l.mean_ms),
        latency_p95_ms: eval.latency.map(|l| l.p95_ms),
    });
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Builds the configured splits of `base`; an empty list gives the base pair.
pub fn build_splits(base: &BaseSplit, config: &ExperimentConfig) -> Vec<(String, Result<SplitResult>)> {
    if config.splits.is_empty() {
        return vec![(BASE_SPLIT_NAME.to_string(), Ok(identity_split(base, BASE_SPLIT_NAME)))];
    }
    config
        .splits
        .iter()
        .map(|s| (s.name.clone(), generate_split(base, s)))
        .collect()
}

/// Runs every (split, algorithm) cell and writes the result files under
/// `config.output_dir`. Cells whose stored output matches the current split
/// manifest and algorithm settings are reused. A failing cell is recorded
/// and the grid continues.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let base = load_base_split(&config.dataset, &config.preprocess)?;
    run_experiment_on(config, &base)
}

pub fn run_experiment_on(config: &ExperimentConfig, base: &BaseSplit) -> Result<RunSummary> {
    config.validate()?;
    let out = &config.output_dir;
    let manifest_dir = out.join("manifests");
    fs::create_dir_all(&manifest_dir).map_err(|e| Error::io(&manifest_dir, e))?;
    write_atomic(&out.join("experiment.toml"), config.to_toml()?.as_bytes())?;

    let splits = build_splits(base, config);
    for (name, split) in &splits {
        match split {
            Ok(s) => {
                let path = manifest_dir.join(format!("{}.json", s.manifest.id()));
                write_atomic(&path, s.manifest.to_json().as_bytes())?;
            }
            Err(e) => log::error!("split {name} failed: {e}"),
        }
    }

    let mut cells = Vec::new();
    for (name, split) in &splits {
        for spec in &config.algorithms {
            cells.push(Cell {
                split_name: name.clone(),
                split: split.as_ref().map_err(|e| e.to_string()),
                spec,
                model: spec.display_name()?,
            });
        }
    }

    let journal_path = out.join("journal.jsonl");
    let journal = std::sync::Mutex::new(
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| Error::io(&journal_path, e))?,
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<(CellRecord, bool)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let dir = cell_dir(out, &cell.split_name, &cell.model);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let fp = fingerprint(cell.spec, config)?;
                let path = dir.join(CELL_FILE);
                if let (Some(prev), Ok(split)) = (read_cell(&path), &cell.split) {
                    if prev.status == CellStatus::Ok
                        && prev.fingerprint == fp
                        && prev.manifest.as_deref() == Some(split.manifest.id().as_str())
                    {
                        log::info!("reusing {}/{}", cell.split_name, cell.model);
                        return Ok((prev, true));
                    }
                }
                log::info!("running {}/{}", cell.split_name, cell.model);
                let record = run_cell(cell, config, fp, &dir);
                write_atomic(&path, serde_json::to_string_pretty(&record)?.as_bytes())?;
                let mut line = serde_json::to_vec(&JournalEntry {
                    split: &record.split,
                    model: &record.model,
                    status: record.status,
                    error: record.error.as_deref(),
                    metrics: &record.metrics,
                })?;
                line.push(b'\n');
                let mut j = journal.lock().unwrap_or_else(|p| p.into_inner());
                j.write_all(&line).map_err(|e| Error::io(&journal_path, e))?;
                Ok((record, false))
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    write_jsonl(
        &out.join("metrics.jsonl"),
        results.iter().flat_map(|(r, _)| r.metrics.iter()),
    )?;
    write_jsonl(
        &out.join("resources.jsonl"),
        results.iter().filter_map(|(r, _)| r.resources.as_ref()),
    )?;
    write_jsonl(
        &out.join("trials.jsonl"),
        results.iter().flat_map(|(r, _)| {
            r.trials.iter().map(|t| TrialRow {
                split: &r.split,
                model: &r.model,
                trial: t.clone(),
            })
        }),
    )?;

    let index = serde_json::json!({
        "name": config.name,
        "seed": config.seed,
        "cutoffs": config.cutoffs,
        "source_hash": base.source_hash(),
        "splits": splits.iter().map(|(name, s)| serde_json::json!({
            "name": name,
            "manifest": s.as_ref().ok().map(|s| s.manifest.id()),
            "error": s.as_ref().err().map(|e| e.to_string()),
        })).collect::<Vec<_>>(),
        "cells": results.iter().map(|(r, reused)| serde_json::json!({
            "split": r.split,
            "model": r.model,
            "status": r.status,
            "reused": reused,
            "error": r.error,
            "dir": cell_dir(Path::new(""), &r.split, &r.model),
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        &out.join("index.json"),
        serde_json::to_string_pretty(&index)?.as_bytes(),
    )?;

    Ok(RunSummary {
        output_dir: out.clone(),
        cells: results
            .into_iter()
            .map(|(r, reused)| CellOutcome {
                split: r.split,
                model: r.model,
                status: r.status,
                reused,
                error: r.error,
            })
            .collect(),
    })
}

/// Reads `metrics.jsonl` from a results directory.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Reads every split manifest stored in a results directory, keyed by id.
pub fn read_manifests(dir: &Path) -> Result<std::collections::HashMap<String, crate::splits::Manifest>> {
    let mdir = dir.join("manifests");
    let mut out = std::collections::HashMap::new();
    for entry in fs::read_dir(&mdir).map_err(|e| Error::io(&mdir, e))? {
        let path = entry.map_err(|e| Error::io(&mdir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let m: crate::splits::Manifest = serde_json::from_str(&text)?;
            out.insert(m.id(), m);
        }
    }
    Ok(out)
}
