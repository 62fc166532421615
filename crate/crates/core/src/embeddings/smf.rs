use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpr_max::bpr_max_loss;
use super::item2vec::dot;
use super::{init_uniform, Monitor};
use crate::dataset::{ItemIdx, SessionDataset};
use crate::error::{Error, Result};
use crate::ranking::{rank, Ranking, Recommender, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmfConfig {
    pub factors: usize,
    pub learning_rate: f64,
    /// Uniform negatives drawn per training event.
    pub negatives: usize,
    pub momentum: f64,
    /// Score regularization weight of the BPR-max loss.
    pub regularization: f64,
    /// Probability of dropping each prefix item from the session mean.
    pub dropout: f64,
    /// Probability of skipping a training event in an epoch.
    pub skip_prob: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SmfConfig {
    fn default() -> Self {
        Self {
            factors: 100,
            learning_rate: 0.1,
            negatives: 100,
            momentum: 0.2,
            regularization: 0.5,
            dropout: 0.1,
            skip_prob: 0.1,
            batch_size: 32,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Item factors `I`, last-item transition factors `T` and the mixing
/// weights of the session and transition terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmfModel {
    n_items: usize,
    factors: usize,
    item: Vec<f64>,
    transition: Vec<f64>,
    w1: f64,
    w2: f64,
    freq: Vec<u64>,
    epoch_losses: Vec<f64>,
}

/// Dense gradient of one event loss, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmfGradient {
    pub item: Vec<f64>,
    pub transition: Vec<f64>,
    pub w1: f64,
    pub w2: f64,
}

#[derive(Default)]
struct SparseGradient {
    item: BTreeMap<ItemIdx, Vec<f64>>,
    transition: BTreeMap<ItemIdx, Vec<f64>>,
    w1: f64,
    w2: f64,
}

impl SparseGradient {
    fn add(map: &mut BTreeMap<ItemIdx, Vec<f64>>, row: ItemIdx, scale: f64, v: &[f64]) {
        let acc = map.entry(row).or_insert_with(|| vec![0.0; v.len()]);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += scale * x;
        }
    }
}

impl SmfModel {
    pub fn init(train: &SessionDataset, config: &SmfConfig) -> Result<Self> {
        let n = train.n_items();
        if n < 2 {
            return Err(Error::Empty("SMF needs at least two items".into()));
        }
        if config.factors == 0 || config.batch_size == 0 || config.negatives == 0 {
            return Err(Error::Config(
                "SMF factors, batch_size and negatives must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&config.dropout) || !(0.0..1.0).contains(&config.skip_prob) {
            return Err(Error::Config("SMF dropout and skip_prob must lie in [0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let item = init_uniform(&mut rng, n * config.factors);
        let transition = init_uniform(&mut rng, n * config.factors);
        Ok(Self {
            n_items: n,
            factors: config.factors,
            item,
            transition,
            w1: 0.5,
            w2: 0.5,
            freq: train.freq().to_vec(),
            epoch_losses: Vec::new(),
        })
    }

    pub fn from_parts(
        factors: usize,
        item: Vec<f64>,
        transition: Vec<f64>,
        w1: f64,
        w2: f64,
        freq: Vec<u64>,
    ) -> Result<Self> {
        let n = freq.len();
        if factors == 0 || item.len() != n * factors || transition.len() != n * factors {
            return Err(Error::Config("SMF parameter shape mismatch".into()));
        }
        Ok(Self {
            n_items: n,
            factors,
            item,
            transition,
            w1,
            w2,
            freq,
            epoch_losses: Vec::new(),
        })
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.item
    }

    pub fn transition_factors(&self) -> &[f64] {
        &self.transition
    }

    pub fn weights(&self) -> (f64, f64) {
        (self.w1, self.w2)
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    fn row(&self, m: &[f64], i: ItemIdx) -> Option<std::ops::Range<usize>> {
        let i = i as usize;
        (i < self.n_items)
            .then(|| i * self.factors..(i + 1) * self.factors)
            .filter(|r| r.end <= m.len())
    }

    /// Session mean of prefix item factors, each scaled by its mask entry.
    fn session_mean(&self, prefix: &[ItemIdx], mask: Option<&[f64]>) -> Vec<f64> {
        let mut mean = vec![0.0; self.factors];
        if prefix.is_empty() {
            return mean;
        }
        let inv = 1.0 / prefix.len() as f64;
        for (p, &item) in prefix.iter().enumerate() {
            let scale = mask.map_or(1.0, |m| m[p]) * inv;
            if scale == 0.0 {
                continue;
            }
            if let Some(r) = self.row(&self.item, item) {
                for (m, v) in mean.iter_mut().zip(&self.item[r]) {
                    *m += scale * v;
                }
            }
        }
        mean
    }

    fn last_transition(&self, prefix: &[ItemIdx]) -> Vec<f64> {
        prefix
            .last()
            .and_then(|&l| self.row(&self.transition, l))
            .map_or_else(|| vec![0.0; self.factors], |r| self.transition[r].to_vec())
    }

    /// Query vector `w1·mean + w2·T_last`; scores are its dot with item factors.
    fn query(&self, prefix: &[ItemIdx], mask: Option<&[f64]>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mean = self.session_mean(prefix, mask);
        let last = self.last_transition(prefix);
        let q = mean.iter().zip(&last).map(|(m, t)| self.w1 * m + self.w2 * t).collect();
        (q, mean, last)
    }

    pub fn score(&self, prefix: &[ItemIdx]) -> ScoreVector {
        let (q, _, _) = self.query(prefix, None);
        ScoreVector::from_vec(self.item.chunks_exact(self.factors).map(|row| dot(&q, row)).collect())
    }

    fn event(
        &self,
        prefix: &[ItemIdx],
        mask: Option<&[f64]>,
        target: ItemIdx,
        negatives: &[ItemIdx],
        lambda: f64,
    ) -> Result<(f64, SparseGradient)> {
        let (q, mean, last) = self.query(prefix, mask);
        let score_of = |i: ItemIdx| self.row(&self.item, i).map_or(0.0, |r| dot(&q, &self.item[r]));
        let r_neg: Vec<f64> = negatives.iter().map(|&n| score_of(n)).collect();
        let bpr = bpr_max_loss(score_of(target), &r_neg, lambda)?;

        let mut grad = SparseGradient::default();
        // dL/dq accumulates Σ g_j I_j
        let mut dq = vec![0.0; self.factors];
        let outputs = std::iter::once((target, bpr.grad_target))
            .chain(negatives.iter().copied().zip(bpr.grad_negatives.iter().copied()));
        for (item, g) in outputs {
            if g == 0.0 {
                continue;
            }
            let Some(r) = self.row(&self.item, item) else { continue };
            let row = &self.item[r];
            for (d, v) in dq.iter_mut().zip(row) {
                *d += g * v;
            }
            grad.w1 += g * dot(&mean, row);
            grad.w2 += g * dot(&last, row);
            SparseGradient::add(&mut grad.item, item, g, &q);
        }
        if !prefix.is_empty() {
            let inv = 1.0 / prefix.len() as f64;
            for (p, &item) in prefix.iter().enumerate() {
                let scale = mask.map_or(1.0, |m| m[p]) * inv * self.w1;
                if scale != 0.0 && self.row(&self.item, item).is_some() {
                    SparseGradient::add(&mut grad.item, item, scale, &dq);
                }
            }
            let l = *prefix.last().expect("non-empty");
            if self.row(&self.transition, l).is_some() {
                SparseGradient::add(&mut grad.transition, l, self.w2, &dq);
            }
        }
        Ok((bpr.loss, grad))
    }

    /// BPR-max loss of one training event without dropout.
    pub fn event_loss(&self, prefix: &[ItemIdx], target: ItemIdx, negatives: &[ItemIdx], lambda: f64) -> Result<f64> {
        Ok(self.event(prefix, None, target, negatives, lambda)?.0)
    }

    /// Analytic gradient of [`SmfModel::event_loss`] with respect to every parameter.
    pub fn event_gradient(
        &self,
        prefix: &[ItemIdx],
        target: ItemIdx,
        negatives: &[ItemIdx],
        lambda: f64,
    ) -> Result<SmfGradient> {
        let (_, sparse) = self.event(prefix, None, target, negatives, lambda)?;
        let mut item = vec![0.0; self.item.len()];
        let mut transition = vec![0.0; self.transition.len()];
        for (dense, map) in [(&mut item, &sparse.item), (&mut transition, &sparse.transition)] {
            for (&row, g) in map {
                let start = row as usize * self.factors;
                dense[start..start + self.factors].copy_from_slice(g);
            }
        }
        Ok(SmfGradient {
            item,
            transition,
            w1: sparse.w1,
            w2: sparse.w2,
        })
    }
}

struct Velocity {
    item: Vec<f64>,
    transition: Vec<f64>,
    w1: f64,
    w2: f64,
}

fn momentum_step(
    params: &mut [f64],
    velocity: &mut [f64],
    factors: usize,
    grads: &BTreeMap<ItemIdx, Vec<f64>>,
    scale: f64,
    lr: f64,
    mu: f64,
) {
    for (&row, g) in grads {
        let r = row as usize * factors..(row as usize + 1) * factors;
        for ((p, v), gi) in params[r.clone()].iter_mut().zip(&mut velocity[r]).zip(g) {
            *v = mu * *v - lr * scale * gi;
            *p += *v;
        }
    }
}

pub fn train_smf(train: &SessionDataset, config: &SmfConfig) -> Result<SmfModel> {
    train_smf_monitored(train, config, None)
}

pub fn train_smf_monitored(
    train: &SessionDataset,
    config: &SmfConfig,
    mut monitor: Option<Monitor<'_, SmfModel>>,
) -> Result<SmfModel> {
    let mut model = SmfModel::init(train, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let events: Vec<(usize, usize)> = train
        .sessions()
        .iter()
        .enumerate()
        .flat_map(|(s, sess)| (1..sess.items.len()).map(move |p| (s, p)))
        .collect();
    let mut velocity = Velocity {
        item: vec![0.0; model.item.len()],
        transition: vec![0.0; model.transition.len()],
        w1: 0.0,
        w2: 0.0,
    };
    let n = model.n_items as ItemIdx;
    let keep = 1.0 - config.dropout;
    let mut order: Vec<usize> = (0..events.len()).collect();
    let mut stopper = monitor.as_ref().map(|m| crate::tuning::EarlyStopper::new(m.patience));
    let mut best: Option<SmfModel> = None;
    let mut negatives = Vec::with_capacity(config.negatives);
    let mut mask = Vec::new();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_events = 0usize;
        let mut batch = SparseGradient::default();
        let mut in_batch = 0usize;
        for (pos, &e) in order.iter().enumerate() {
            if config.skip_prob > 0.0 && rng.random::<f64>() < config.skip_prob {
                if pos + 1 < order.len() || in_batch == 0 {
                    continue;
                }
            } else {
                let (s, p) = events[e];
                let items = &train.sessions()[s].items;
                let (prefix, target) = (&items[..p], items[p]);
                negatives.clear();
                for _ in 0..config.negatives {
                    let x = rng.random_range(0..n - 1);
                    negatives.push(if x >= target { x + 1 } else { x });
                }
                mask.clear();
                for _ in 0..prefix.len() {
                    let kept = config.dropout == 0.0 || rng.random::<f64>() < keep;
                    mask.push(if kept { 1.0 / keep } else { 0.0 });
                }
                let (loss, g) = model.event(prefix, Some(&mask), target, &negatives, config.regularization)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                n_events += 1;
                for (row, v) in &g.item {
                    SparseGradient::add(&mut batch.item, *row, 1.0, v);
                }
                for (row, v) in &g.transition {
                    SparseGradient::add(&mut batch.transition, *row, 1.0, v);
                }
                batch.w1 += g.w1;
                batch.w2 += g.w2;
                in_batch += 1;
            }
            if in_batch == config.batch_size || (pos + 1 == order.len() && in_batch > 0) {
                let scale = 1.0 / in_batch as f64;
                let (lr, mu, f) = (config.learning_rate, config.momentum, model.factors);
                momentum_step(&mut model.item, &mut velocity.item, f, &batch.item, scale, lr, mu);
                momentum_step(
                    &mut model.transition,
                    &mut velocity.transition,
                    f,
                    &batch.transition,
                    scale,
                    lr,
                    mu,
                );
                velocity.w1 = mu * velocity.w1 - lr * scale * batch.w1;
                velocity.w2 = mu * velocity.w2 - lr * scale * batch.w2;
                model.w1 += velocity.w1;
                model.w2 += velocity.w2;
                batch = SparseGradient::default();
                in_batch = 0;
            }
        }
        let mean = if n_events == 0 {
            0.0
        } else {
            epoch_loss / n_events as f64
        };
        let finite = model.item.iter().chain(&model.transition).all(|v| v.is_finite())
            && model.w1.is_finite()
            && model.w2.is_finite();
        if !mean.is_finite() || !finite {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        model.epoch_losses.push(mean);

        if let (Some(m), Some(stopper)) = (monitor.as_mut(), stopper.as_mut()) {
            let score = (m.validate)(&model)?;
            let decision = stopper.observe(score);
            if decision.improved {
                best = Some(model.clone());
            }
            if decision.stop {
                break;
            }
        }
    }
    Ok(match best {
        Some(mut b) => {
            b.epoch_losses = model.epoch_losses;
            b
        }
        None => model,
    })
}

impl Recommender for SmfModel {
    fn name(&self) -> &str {
        "SMF"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        Ok(rank(&self.score(prefix), k, exclusions, &self.freq))
    }
}
