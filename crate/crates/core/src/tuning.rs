//! Random hyperparameter search, temporal validation splits and the early
//! stopping rule shared by the trained models.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{collapse_repeats, Role, Session, SessionDataset};
use crate::error::{Error, Result};

pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_TRIALS: usize = 20;
/// Minimum number of train sessions for a validation split.
pub const MIN_VALIDATION_SOURCE: usize = 10;

/// Mixes a master seed with a stream index (SplitMix64 finalizer).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Stops after `patience` consecutive epochs without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 0.0,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, score: f64) -> StopDecision {
        let improved = self.best.is_none_or(|b| score > b + self.min_delta);
        if improved {
            self.best = Some(score);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Float(f) => Some(f),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
            Value::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scale", rename_all = "snake_case")]
pub enum Domain {
    /// `lo, lo + step, …, hi`.
    Linear {
        lo: f64,
        hi: f64,
        step: f64,
    },
    /// `base^n` for each listed exponent.
    Pow {
        base: f64,
        exps: Vec<i32>,
    },
    Categorical {
        values: Vec<String>,
    },
    Fixed {
        value: Value,
    },
}

fn round_decimal(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

impl Domain {
    pub fn linear(lo: f64, hi: f64, step: f64) -> Self {
        Domain::Linear { lo, hi, step }
    }

    pub fn pow(base: f64, exps: &[i32]) -> Self {
        Domain::Pow {
            base,
            exps: exps.to_vec(),
        }
    }

    pub fn categorical(values: &[&str]) -> Self {
        Domain::Categorical {
            values: values.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn fixed(value: Value) -> Self {
        Domain::Fixed { value }
    }

    fn integral(&self) -> bool {
        match *self {
            Domain::Linear { lo, hi, step } => [lo, hi, step].iter().all(|v| v.fract() == 0.0),
            Domain::Pow { base, ref exps } => base.fract() == 0.0 && exps.iter().all(|&e| e >= 0),
            _ => false,
        }
    }

    /// Every member of the discretized domain, in ascending order.
    pub fn values(&self) -> Vec<Value> {
        let numeric = |x: f64| {
            if self.integral() {
                Value::Int(x.round() as i64)
            } else {
                Value::Float(round_decimal(x))
            }
        };
        match self {
            &Domain::Linear { lo, hi, step } => {
                let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
                (0..n).map(|i| numeric(lo + i as f64 * step)).collect()
            }
            Domain::Pow { base, exps } => exps.iter().map(|&e| numeric(base.powi(e))).collect(),
            Domain::Categorical { values } => values.iter().cloned().map(Value::Str).collect(),
            Domain::Fixed { value } => vec![value.clone()],
        }
    }

    pub fn contains(&self, value: &Value) -> bool {
        self.values().contains(value)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            &Domain::Linear { lo, hi, step } => lo.is_finite() && hi.is_finite() && step > 0.0 && lo <= hi,
            Domain::Pow { base, exps } => *base > 0.0 && !exps.is_empty(),
            Domain::Categorical { values } => !values.is_empty(),
            Domain::Fixed { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("empty or malformed domain {self:?}")))
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Value {
        let values = self.values();
        values.choose(rng).cloned().expect("validated domain is non-empty")
    }
}

pub type Config = BTreeMap<String, Value>;

/// Converts a sampled configuration to a JSON object.
pub fn config_to_json(config: &Config) -> serde_json::Value {
    serde_json::to_value(config).expect("config values serialize")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSpace(pub BTreeMap<String, Domain>);

impl ParamSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: &str, domain: Domain) -> Self {
        self.0.insert(name.to_string(), domain);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.0.values().try_for_each(Domain::validate)
    }

    pub fn contains(&self, config: &Config) -> bool {
        config.len() == self.0.len() && self.0.iter().all(|(k, d)| config.get(k).is_some_and(|v| d.contains(v)))
    }
}

/// Independent uniform draw per parameter.
pub fn sample_config<R: Rng>(space: &ParamSpace, rng: &mut R) -> Config {
    space
        .0
        .iter()
        .map(|(name, domain)| (name.clone(), domain.sample(rng)))
        .collect()
}

/// Tuned ranges per native algorithm. Constants appear as fixed domains.
pub mod presets {
    use super::{Domain, ParamSpace, Value};

    const WEIGHTINGS: &[&str] = &["linear", "same", "div", "log", "quadratic"];

    pub fn spop() -> ParamSpace {
        ParamSpace::new().with("top_n", Domain::linear(10.0, 1000.0, 10.0))
    }

    pub fn ar() -> ParamSpace {
        ParamSpace::new().with("pruning", Domain::linear(0.0, 10.0, 1.0))
    }

    pub fn sr() -> ParamSpace {
        ar().with("weighting", Domain::categorical(WEIGHTINGS))
    }

    pub fn vsknn() -> ParamSpace {
        ParamSpace::new()
            .with("k", Domain::linear(50.0, 500.0, 10.0))
            .with("sample_size", Domain::linear(100.0, 10000.0, 100.0))
            .with("sampling", Domain::categorical(&["random", "recent"]))
            .with(
                "similarity",
                Domain::categorical(&["jaccard", "cosine", "binary", "tanimoto"]),
            )
            .with("weighting", Domain::categorical(WEIGHTINGS))
            .with("weighting_score", Domain::categorical(WEIGHTINGS))
    }

    pub fn smf() -> ParamSpace {
        ParamSpace::new()
            .with("learning_rate", Domain::pow(10.0, &[-3, -2, -1]))
            .with("factors", Domain::linear(50.0, 200.0, 10.0))
            .with("negatives", Domain::linear(100.0, 4000.0, 100.0))
            .with("momentum", Domain::fixed(Value::Float(0.2)))
            .with("regularization", Domain::fixed(Value::Float(0.5)))
            .with("dropout", Domain::linear(0.1, 0.5, 0.1))
            .with("skip_prob", Domain::fixed(Value::Float(0.1)))
            .with("batch_size", Domain::fixed(Value::Int(32)))
            .with("epochs", Domain::fixed(Value::Int(10)))
    }

    pub fn item2vec() -> ParamSpace {
        ParamSpace::new()
            .with("start_lr", Domain::linear(0.01, 0.05, 0.01))
            .with("final_lr", Domain::pow(10.0, &[-5, -4, -3]))
            .with("window", Domain::linear(3.0, 9.0, 1.0))
            .with("dim", Domain::pow(2.0, &[5, 6, 7, 8, 9]))
            .with("negatives", Domain::linear(10.0, 100.0, 10.0))
            .with("epochs", Domain::fixed(Value::Int(20)))
            .with("min_freq", Domain::fixed(Value::Int(1)))
            .with("subsample", Domain::fixed(Value::Float(0.0001)))
    }

    /// Preset for a native algorithm name, if one exists.
    pub fn for_algorithm(name: &str) -> Option<ParamSpace> {
        Some(match name.to_ascii_lowercase().as_str() {
            "spop" | "s-pop" => spop(),
            "ar" => ar(),
            "sr" => sr(),
            "vsknn" => vsknn(),
            "smf" => smf(),
            "item2vec" => item2vec(),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub config: Config,
    /// Validation HR@20, absent when the trial failed.
    pub hr20: Option<f64>,
    pub error: Option<String>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub best: Config,
    pub best_trial: usize,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Evaluates `n_trials` sampled configs with `objective(config, trial_seed)`
/// and keeps the highest score, ties going to the earlier trial. Trials run
/// in parallel; results do not depend on scheduling.
pub fn random_search<F>(space: &ParamSpace, n_trials: usize, seed: u64, objective: F) -> Result<SearchResult>
where
    F: Fn(&Config, u64) -> Result<f64> + Sync,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("random search needs at least one trial".into()));
    }
    let trials: Vec<TrialRecord> = (0..n_trials)
        .into_par_iter()
        .map(|trial| {
            let trial_seed = derive_seed(seed, trial as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
            let config = sample_config(space, &mut rng);
            let started = Instant::now();
            let outcome = objective(&config, trial_seed).and_then(|s| {
                if s.is_finite() {
                    Ok(s)
                } else {
                    Err(Error::Config(format!("non-finite validation score {s}")))
                }
            });
            let (hr20, error) = match outcome {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            };
            TrialRecord {
                trial,
                seed: trial_seed,
                config,
                hr20,
                error,
                wall_clock_secs: started.elapsed().as_secs_f64(),
            }
        })
        .collect();

    let mut best: Option<(usize, f64)> = None;
    for t in &trials {
        if let Some(s) = t.hr20 {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((t.trial, s));
            }
        }
    }
    match best {
        Some((i, score)) => Ok(SearchResult {
            best: trials[i].config.clone(),
            best_trial: i,
            best_score: score,
            trials,
        }),
        None => {
            let diagnostics = trials
                .iter()
                .map(|t| format!("trial {}: {}", t.trial, t.error.as_deref().unwrap_or("?")))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::AllTrialsFailed(n_trials, diagnostics))
        }
    }
}

/// Holds out the newest tenth of the train sessions (by start time) for
/// validation. Both parts keep the train vocabulary, so a model fitted on the
/// first part scores the train set's test data directly. Validation clicks on
/// items absent from the fit part are dropped.
pub fn make_validation_split(train: &SessionDataset) -> Result<(SessionDataset, SessionDataset)> {
    let n = train.sessions().len();
    if n < MIN_VALIDATION_SOURCE {
        return Err(Error::EmptySplit(format!(
            "validation split needs at least {MIN_VALIDATION_SOURCE} train sessions, got {n}"
        )));
    }
    let n_val = n / 10;
    let sessions = train.sessions();
    let fit = SessionDataset::with_vocabulary(sessions[..n - n_val].to_vec(), train.shared_vocabulary(), Role::Train);
    let seen = fit.freq();
    let held_out = sessions[n - n_val..]
        .iter()
        .filter_map(|s| {
            let mut items: Vec<_> = s.items.iter().copied().filter(|&i| seen[i as usize] > 0).collect();
            collapse_repeats(&mut items);
            (items.len() >= 2).then(|| Session { items, ..s.clone() })
        })
        .collect();
    let validation = SessionDataset::with_vocabulary(held_out, train.shared_vocabulary(), Role::Test);
    if validation.is_empty() {
        return Err(Error::EmptySplit(
            "validation sessions have no items seen in the fit set".into(),
        ));
    }
    Ok((fit, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_discretizations() {
        let factors = presets::smf().0["factors"].values();
        assert_eq!(factors.len(), 16);
        assert_eq!(factors[0], Value::Int(50));
        assert_eq!(factors[15], Value::Int(200));
        assert_eq!(
            presets::smf().0["learning_rate"].values(),
            vec![Value::Float(0.001), Value::Float(0.01), Value::Float(0.1)]
        );
        assert_eq!(
            presets::item2vec().0["start_lr"].values(),
            [0.01, 0.02, 0.03, 0.04, 0.05].map(Value::Float).to_vec()
        );
        assert_eq!(
            presets::item2vec().0["dim"].values(),
            [32, 64, 128, 256, 512].map(Value::Int).to_vec()
        );
        assert_eq!(
            presets::smf().0["dropout"].values(),
            [0.1, 0.2, 0.3, 0.4, 0.5].map(Value::Float).to_vec()
        );
    }

    #[test]
    fn early_stopper_waits_for_patience() {
        let mut s = EarlyStopper::new(2);
        assert!(s.observe(0.1).improved);
        assert!(s.observe(0.2).improved);
        let d = s.observe(0.2);
        assert!(!d.improved && !d.stop);
        let d = s.observe(0.15);
        assert!(!d.improved && d.stop);
        assert_eq!(s.best(), Some(0.2));
    }

    #[test]
    fn single_trial_is_best() {
        let space = presets::ar();
        let r = random_search(&space, 1, 3, |c, _| Ok(c["pruning"].as_f64().unwrap())).unwrap();
        assert_eq!(r.best_trial, 0);
        assert_eq!(r.trials.len(), 1);
    }

    #[test]
    fn ties_go_to_earlier_trial() {
        let r = random_search(&presets::vsknn(), 20, 9, |_, _| Ok(0.5)).unwrap();
        assert_eq!(r.best_trial, 0);
    }

    #[test]
    fn search_is_deterministic() {
        let f = |c: &Config, s: u64| Ok(c["k"].as_f64().unwrap() + (s % 7) as f64);
        let a = random_search(&presets::vsknn(), 20, 5, f).unwrap();
        let b = random_search(&presets::vsknn(), 20, 5, f).unwrap();
        let strip = |r: &SearchResult| {
            r.trials
                .iter()
                .map(|t| (t.config.clone(), t.hr20, t.seed))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn failures_are_recorded_and_all_failed_is_an_error() {
        let r = random_search(&presets::ar(), 4, 0, |_, s| {
            if s % 2 == 0 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(0.1)
            }
        });
        if let Ok(r) = r {
            assert!(r.trials.iter().all(|t| t.hr20.is_some() != t.error.is_some()));
        }
        let err = random_search(&presets::ar(), 3, 0, |_, _| Err(Error::Config("no".into())));
        assert!(matches!(err, Err(Error::AllTrialsFailed(3, _))));
    }

    fn chain(n: usize) -> SessionDataset {
        let names: Vec<[String; 3]> = (0..n)
            .map(|i| {
                [
                    format!("i{}", i % 5),
                    format!("i{}", (i + 1) % 5),
                    format!("i{}", (i + 2) % 5),
                ]
            })
            .collect();
        let refs: Vec<Vec<&str>> = names.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
        let slices: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
        crate::dataset::testing::dataset(&slices)
    }

    #[test]
    fn validation_split_takes_newest_tenth() {
        for (n, fit_n, val_n) in [(100, 90, 10), (10, 9, 1), (25, 23, 2)] {
            let ds = chain(n);
            let (fit, val) = make_validation_split(&ds).unwrap();
            assert_eq!((fit.sessions().len(), val.sessions().len()), (fit_n, val_n));
            let newest_fit = fit.sessions().iter().map(|s| s.start_time).max().unwrap();
            assert!(val.sessions().iter().all(|s| s.start_time > newest_fit));
            fit.validate(true).unwrap();
            val.validate(true).unwrap();
            assert_eq!(fit.vocabulary(), ds.vocabulary());
        }
        assert!(make_validation_split(&chain(9)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn samples_stay_in_domain(seed in any::<u64>(), which in 0usize..6) {
            let space = [
                presets::spop(), presets::ar(), presets::sr(),
                presets::vsknn(), presets::smf(), presets::item2vec(),
            ][which].clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_config(&space, &mut rng);
            prop_assert!(space.contains(&c));
        }
    }
}
