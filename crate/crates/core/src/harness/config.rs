use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::algorithms::AlgorithmConfig;
use crate::dataset::{Schema, SessionRule};
use crate::error::{Error, Result};
use crate::eval::{ExclusionPolicy, DEFAULT_CUTOFFS};
use crate::splits::SplitSpec;
use crate::tuning::{presets, ParamSpace, DEFAULT_TRIALS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceFormat {
    /// Delimited click log read through a [`Schema`].
    #[default]
    Events,
    /// A dataset file in the canonical session format.
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    pub path: PathBuf,
    #[serde(default)]
    pub format: SourceFormat,
    #[serde(default)]
    pub schema: Schema,
    #[serde(default)]
    pub session_rule: SessionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    /// Collapse repeats and drop single-click sessions.
    pub clean: bool,
    /// Days at the end of the log that form the test set.
    pub holdout_days: i64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            clean: true,
            holdout_days: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    pub kind: String,
    /// Report name; defaults to the algorithm's display name.
    #[serde(default)]
    pub name: Option<String>,
    /// Pinned parameters. Tuned values override them.
    #[serde(default)]
    pub params: serde_json::Map<String, serde_json::Value>,
    #[serde(default)]
    pub tune: bool,
    #[serde(default)]
    pub trials: Option<usize>,
    /// Search space; defaults to the built-in preset for the kind.
    #[serde(default)]
    pub space: Option<ParamSpace>,
    /// Hold out the newest train sessions for early stopping of trained
    /// models. Defaults to on for kinds that support it.
    #[serde(default)]
    pub early_stopping: Option<bool>,
}

impl AlgorithmSpec {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            name: None,
            params: serde_json::Map::new(),
            tune: false,
            trials: None,
            space: None,
            early_stopping: None,
        }
    }

    pub fn with_param(mut self, key: &str, value: serde_json::Value) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    /// Config with the pinned parameters only.
    pub fn base_config(&self) -> Result<AlgorithmConfig> {
        AlgorithmConfig::from_params(&self.kind, &serde_json::Value::Object(self.params.clone()))
    }

    /// Config with `overrides` applied over the pinned parameters.
    pub fn config_with(&self, overrides: &serde_json::Value) -> Result<AlgorithmConfig> {
        let mut params = self.params.clone();
        if let serde_json::Value::Object(o) = overrides {
            for (k, v) in o {
                params.insert(k.clone(), v.clone());
            }
        }
        AlgorithmConfig::from_params(&self.kind, &serde_json::Value::Object(params))
    }

    pub fn display_name(&self) -> Result<String> {
        Ok(match &self.name {
            Some(n) => n.clone(),
            None => self.base_config()?.display_name().to_string(),
        })
    }

    pub fn search_space(&self) -> Result<ParamSpace> {
        match &self.space {
            Some(s) => Ok(s.clone()),
            None => presets::for_algorithm(&self.kind)
                .ok_or_else(|| Error::Config(format!("no search space for `{}`; give one explicitly", self.kind))),
        }
    }

    pub fn n_trials(&self) -> usize {
        self.trials.unwrap_or(DEFAULT_TRIALS)
    }

    pub fn seed_pinned(&self) -> bool {
        self.params.contains_key("seed")
    }
}

fn default_cutoffs() -> Vec<usize> {
    DEFAULT_CUTOFFS.to_vec()
}

fn default_workers() -> usize {
    1
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub preprocess: Preprocess,
    /// Derived splits; none means the base holdout only.
    #[serde(default)]
    pub splits: Vec<SplitSpec>,
    pub algorithms: Vec<AlgorithmSpec>,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub exclusion: ExclusionPolicy,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths in it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.dataset.path.is_relative() {
            self.dataset.path = base.join(&self.dataset.path);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("cutoffs must be non-empty and ≥ 1".into()));
        }
        if self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("cutoffs must be strictly ascending".into()));
        }
        if self.preprocess.holdout_days < 1 {
            return Err(Error::Config("holdout_days must be ≥ 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms configured".into()));
        }
        let mut names = HashSet::new();
        for a in &self.algorithms {
            a.base_config()?;
            if a.tune {
                a.search_space()?.validate()?;
                if a.n_trials() == 0 {
                    return Err(Error::Config(format!("`{}`: trials must be ≥ 1", a.kind)));
                }
            }
            let name = a.display_name()?;
            if !names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate algorithm name `{name}`")));
            }
        }
        let mut split_names = HashSet::new();
        for s in &self.splits {
            s.validate()?;
            if !split_names.insert(s.name.clone()) {
                return Err(Error::Config(format!("duplicate split name `{}`", s.name)));
            }
        }
        Ok(())
    }
}
