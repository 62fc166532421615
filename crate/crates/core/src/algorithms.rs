//! Uniform construction, fitting and caching of every predictor kind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::baselines::{RuleTable, RulesConfig, SPop, SPopConfig, VsknnConfig, VsknnIndex};
use crate::bridge::{BridgeConfig, BridgePredictor};
use crate::dataset::{write_dataset, ItemIdx, SessionDataset};
use crate::embeddings::{
    train_item2vec_monitored, train_smf_monitored, Item2VecConfig, ItemEmbeddings, Monitor, SmfConfig, SmfModel,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::ranking::{Ranking, Recommender};

pub const CACHE_TAG: &[u8; 12] = b"sbr-model/1\n";

/// Native kinds in their canonical order.
pub const NATIVE_KINDS: [&str; 6] = ["spop", "ar", "sr", "vsknn", "smf", "item2vec"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AlgorithmConfig {
    Spop(SPopConfig),
    Ar(RulesConfig),
    Sr(RulesConfig),
    Vsknn(VsknnConfig),
    Smf(SmfConfig),
    Item2vec(Item2VecConfig),
    Bridge(BridgeConfig),
}

impl AlgorithmConfig {
    /// Builds a config from a kind name and a JSON object of parameters;
    /// parameters not given keep their defaults.
    pub fn from_params(kind: &str, params: &serde_json::Value) -> Result<Self> {
        let mut obj = match params {
            serde_json::Value::Object(m) => m.clone(),
            serde_json::Value::Null => serde_json::Map::new(),
            other => return Err(Error::Config(format!("parameters must be a table, got {other}"))),
        };
        let kind = normalize_kind(kind);
        obj.insert("kind".into(), serde_json::Value::String(kind.clone()));
        serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| Error::Config(format!("algorithm `{kind}`: {e}")))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AlgorithmConfig::Spop(_) => "spop",
            AlgorithmConfig::Ar(_) => "ar",
            AlgorithmConfig::Sr(_) => "sr",
            AlgorithmConfig::Vsknn(_) => "vsknn",
            AlgorithmConfig::Smf(_) => "smf",
            AlgorithmConfig::Item2vec(_) => "item2vec",
            AlgorithmConfig::Bridge(_) => "bridge",
        }
    }

    /// Display name used in reports.
    pub fn display_name(&self) -> &'static str {
        match self {
            AlgorithmConfig::Spop(_) => "S-POP",
            AlgorithmConfig::Ar(_) => "AR",
            AlgorithmConfig::Sr(_) => "SR",
            AlgorithmConfig::Vsknn(_) => "VSKNN",
            AlgorithmConfig::Smf(_) => "SMF",
            AlgorithmConfig::Item2vec(_) => "Item2Vec",
            AlgorithmConfig::Bridge(_) => "Bridge",
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            AlgorithmConfig::Vsknn(c) => c.seed = seed,
            AlgorithmConfig::Smf(c) => c.seed = seed,
            AlgorithmConfig::Item2vec(c) => c.seed = seed,
            _ => {}
        }
    }

    pub fn uses_early_stopping(&self) -> bool {
        matches!(self, AlgorithmConfig::Smf(_) | AlgorithmConfig::Item2vec(_))
    }
}

pub fn normalize_kind(kind: &str) -> String {
    match kind.to_ascii_lowercase().as_str() {
        "s-pop" | "s_pop" => "spop".into(),
        other => other.to_string(),
    }
}

/// A fitted predictor of any kind.
#[derive(Debug)]
pub enum FittedModel {
    Spop(SPop),
    Rules(RuleTable),
    Vsknn(VsknnIndex),
    Smf(SmfModel),
    Item2vec(ItemEmbeddings),
    Bridge(BridgePredictor),
}

impl FittedModel {
    fn as_recommender(&self) -> &dyn Recommender {
        match self {
            FittedModel::Spop(m) => m,
            FittedModel::Rules(m) => m,
            FittedModel::Vsknn(m) => m,
            FittedModel::Smf(m) => m,
            FittedModel::Item2vec(m) => m,
            FittedModel::Bridge(m) => m,
        }
    }
}

impl Recommender for FittedModel {
    fn name(&self) -> &str {
        self.as_recommender().name()
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        self.as_recommender().recommend(prefix, k, exclusions)
    }
}

/// Extra inputs some fits need.
#[derive(Debug, Default, Clone)]
pub struct FitContext<'a> {
    /// Display name for bridged models.
    pub name: Option<&'a str>,
    /// Held-out sessions for early stopping of the trained models.
    pub validation: Option<&'a SessionDataset>,
    pub patience: Option<usize>,
    /// Where bridged models receive their exported train set.
    pub workdir: Option<&'a Path>,
}

const STOPPING_CUTOFF: usize = 20;

fn validation_hr(rec: &dyn Recommender, train: &SessionDataset, validation: &SessionDataset) -> Result<f64> {
    let eval = evaluate(rec, train, validation, &[STOPPING_CUTOFF], &EvalOptions::sequential())?;
    Ok(eval.metrics[0].hr)
}

pub fn fit(config: &AlgorithmConfig, train: &SessionDataset, ctx: &FitContext<'_>) -> Result<FittedModel> {
    let patience = ctx.patience.unwrap_or(crate::tuning::DEFAULT_PATIENCE);
    Ok(match config {
        AlgorithmConfig::Spop(c) => FittedModel::Spop(SPop::fit(train, c.clone())?),
        AlgorithmConfig::Ar(c) => FittedModel::Rules(RuleTable::fit_association(train, c.clone())),
        AlgorithmConfig::Sr(c) => FittedModel::Rules(RuleTable::fit_sequential(train, c.clone())),
        AlgorithmConfig::Vsknn(c) => FittedModel::Vsknn(VsknnIndex::fit(train, c.clone())?),
        AlgorithmConfig::Smf(c) => {
            let model = match ctx.validation {
                Some(val) => {
                    let mut check = |m: &SmfModel| validation_hr(m, train, val);
                    let monitor = Monitor {
                        patience,
                        validate: &mut check,
                    };
                    train_smf_monitored(train, c, Some(monitor))?
                }
                None => train_smf_monitored(train, c, None)?,
            };
            FittedModel::Smf(model)
        }
        AlgorithmConfig::Item2vec(c) => {
            let model = match ctx.validation {
                Some(val) => {
                    let mut check = |m: &ItemEmbeddings| validation_hr(m, train, val);
                    let monitor = Monitor {
                        patience,
                        validate: &mut check,
                    };
                    train_item2vec_monitored(train, c, Some(monitor))?
                }
                None => train_item2vec_monitored(train, c, None)?,
            };
            FittedModel::Item2vec(model)
        }
        AlgorithmConfig::Bridge(c) => {
            let dir: PathBuf = ctx.workdir.map_or_else(std::env::temp_dir, Path::to_path_buf);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("train-{}.jsonl", &train.content_hash()[..16]));
            if !path.exists() {
                static NEXT: AtomicU64 = AtomicU64::new(0);
                let tmp = path.with_extension(format!(
                    "{}.{}.tmp",
                    std::process::id(),
                    NEXT.fetch_add(1, Ordering::Relaxed)
                ));
                write_dataset(train, &tmp)?;
                std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            }
            let name = ctx.name.unwrap_or("Bridge");
            FittedModel::Bridge(BridgePredictor::fit(name, c, &path, train.shared_vocabulary())?)
        }
    })
}

#[derive(Serialize, Deserialize)]
enum CachedModel {
    Spop(SPop),
    Rules(RuleTable),
    Vsknn(VsknnIndex),
    Smf(SmfModel),
    Item2vec(ItemEmbeddings),
}

/// Writes a fitted native model to a version-tagged binary file.
pub fn save_model(model: &FittedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cached = match model {
        FittedModel::Spop(m) => CachedModel::Spop(m.clone()),
        FittedModel::Rules(m) => CachedModel::Rules(m.clone()),
        FittedModel::Vsknn(m) => CachedModel::Vsknn(m.clone()),
        FittedModel::Smf(m) => CachedModel::Smf(m.clone()),
        FittedModel::Item2vec(m) => CachedModel::Item2vec(m.clone()),
        FittedModel::Bridge(_) => return Err(Error::Cache("bridged models are not cacheable".into())),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(CACHE_TAG).map_err(|e| Error::io(path, e))?;
    ciborium::into_writer(&cached, &mut out).map_err(|e| Error::Cache(e.to_string()))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FittedModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let mut tag = [0u8; CACHE_TAG.len()];
    input.read_exact(&mut tag).map_err(|e| Error::io(path, e))?;
    if &tag != CACHE_TAG {
        return Err(Error::Cache(format!(
            "{} is not a model cache of this version",
            path.display()
        )));
    }
    let cached: CachedModel = ciborium::from_reader(input).map_err(|e| Error::Cache(e.to_string()))?;
    Ok(match cached {
        CachedModel::Spop(m) => FittedModel::Spop(m),
        CachedModel::Rules(m) => FittedModel::Rules(m),
        CachedModel::Vsknn(m) => FittedModel::Vsknn(m),
        CachedModel::Smf(m) => FittedModel::Smf(m),
        CachedModel::Item2vec(m) => FittedModel::Item2vec(m),
    })
}
