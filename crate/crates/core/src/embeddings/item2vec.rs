use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpr_max::sigmoid;
use super::{init_uniform, Monitor};
use crate::dataset::{ItemIdx, SessionDataset, Vocabulary};
use crate::error::{Error, Result};
use crate::ranking::{rank, Ranking, Recommender, ScoreVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Item2VecConfig {
    pub dim: usize,
    /// Maximum context distance; the effective window is drawn per center.
    pub window: usize,
    pub negatives: usize,
    pub start_lr: f64,
    pub final_lr: f64,
    /// Frequent-item subsampling threshold; 0 disables it.
    pub subsample: f64,
    /// Items with fewer occurrences are not trained.
    pub min_freq: u64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Item2VecConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 5,
            negatives: 20,
            start_lr: 0.03,
            final_lr: 0.0001,
            subsample: 1e-4,
            min_freq: 1,
            epochs: 10,
            seed: 0,
        }
    }
}

/// Skip-gram item vectors. `input` rows are the item embeddings used for
/// scoring; `output` rows are the context vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddings {
    dim: usize,
    input: Vec<f64>,
    output: Vec<f64>,
    trained: Vec<bool>,
    freq: Vec<u64>,
    epoch_losses: Vec<f64>,
}

impl ItemEmbeddings {
    /// Untrained parameters exactly as training starts from them.
    pub fn init(train: &SessionDataset, config: &Item2VecConfig) -> Result<Self> {
        if train.n_items() == 0 {
            return Err(Error::Empty("Item2Vec needs a non-empty vocabulary".into()));
        }
        if config.dim == 0 || config.window == 0 {
            return Err(Error::Config("Item2Vec dim and window must be ≥ 1".into()));
        }
        let n = train.n_items();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let input = init_uniform(&mut rng, n * config.dim);
        let output = init_uniform(&mut rng, n * config.dim);
        let freq = train.freq().to_vec();
        Ok(Self {
            dim: config.dim,
            input,
            output,
            trained: freq.iter().map(|&f| f >= config.min_freq).collect(),
            freq,
            epoch_losses: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_items(&self) -> usize {
        self.freq.len()
    }

    pub fn vector(&self, item: ItemIdx) -> &[f64] {
        let i = item as usize * self.dim;
        &self.input[i..i + self.dim]
    }

    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    /// Builds embeddings from explicit item vectors (row-major).
    pub fn from_vectors(dim: usize, vectors: Vec<f64>, freq: Vec<u64>) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * freq.len() {
            return Err(Error::Config("embedding matrix shape mismatch".into()));
        }
        Ok(Self {
            dim,
            output: vec![0.0; vectors.len()],
            input: vectors,
            trained: vec![true; freq.len()],
            freq,
            epoch_losses: Vec::new(),
        })
    }

    fn known(&self, item: ItemIdx) -> bool {
        self.trained.get(item as usize).copied().unwrap_or(false)
    }

    /// Mean of the known prefix item vectors, `None` when none are known.
    pub fn session_vector(&self, prefix: &[ItemIdx]) -> Option<Vec<f64>> {
        let mut mean = vec![0.0; self.dim];
        let mut count = 0usize;
        for &item in prefix.iter().filter(|&&i| self.known(i)) {
            for (m, v) in mean.iter_mut().zip(self.vector(item)) {
                *m += v;
            }
            count += 1;
        }
        if count == 0 {
            return None;
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        Some(mean)
    }

    /// Cosine between the session vector and every item vector.
    pub fn score(&self, prefix: &[ItemIdx]) -> ScoreVector {
        let mut scores = ScoreVector::zeros(self.n_items());
        let Some(session) = self.session_vector(prefix) else {
            return scores;
        };
        let session_norm = norm(&session);
        if session_norm == 0.0 {
            return scores;
        }
        for item in 0..self.n_items() as ItemIdx {
            if !self.known(item) {
                continue;
            }
            let v = self.vector(item);
            let vn = norm(v);
            if vn > 0.0 {
                scores[item as usize] = dot(&session, v) / (session_norm * vn);
            }
        }
        scores
    }

    /// Writes `n dim` followed by one `item v1 .. vd` row per item.
    pub fn export_text<W: Write>(&self, vocabulary: &Vocabulary, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.n_items(), self.dim)?;
        for item in 0..self.n_items() as ItemIdx {
            write!(out, "{}", vocabulary.id(item))?;
            for v in self.vector(item) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `-ln σ(v·u⁺) − Σ ln σ(−v·u⁻)`
pub fn sgns_loss(input: &[f64], positive: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -sigmoid(dot(input, positive)).ln();
    for neg in negatives {
        loss -= sigmoid(-dot(input, neg)).ln();
    }
    loss
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgnsGradient {
    pub input: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Closed-form gradient of [`sgns_loss`].
pub fn sgns_gradient(input: &[f64], positive: &[f64], negatives: &[&[f64]]) -> SgnsGradient {
    let g_pos = sigmoid(dot(input, positive)) - 1.0;
    let mut grad_input: Vec<f64> = positive.iter().map(|u| g_pos * u).collect();
    let grad_positive = input.iter().map(|v| g_pos * v).collect();
    let grad_negatives = negatives
        .iter()
        .map(|neg| {
            let g = sigmoid(dot(input, neg));
            for (gi, u) in grad_input.iter_mut().zip(neg.iter()) {
                *gi += g * u;
            }
            input.iter().map(|v| g * v).collect()
        })
        .collect();
    SgnsGradient {
        input: grad_input,
        positive: grad_positive,
        negatives: grad_negatives,
    }
}

/// One simultaneous SGD step on a (center, context, negatives) triple.
/// Returns the loss before the update.
fn sgns_step(model: &mut ItemEmbeddings, center: ItemIdx, context: ItemIdx, negatives: &[ItemIdx], lr: f64) -> f64 {
    let d = model.dim;
    let row = |i: ItemIdx| i as usize * d..(i as usize + 1) * d;
    let input = model.input[row(center)].to_vec();
    let positive = model.output[row(context)].to_vec();
    let negs: Vec<Vec<f64>> = negatives.iter().map(|&n| model.output[row(n)].to_vec()).collect();
    let neg_refs: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
    let loss = sgns_loss(&input, &positive, &neg_refs);
    let grad = sgns_gradient(&input, &positive, &neg_refs);
    for (p, g) in model.input[row(center)].iter_mut().zip(&grad.input) {
        *p -= lr * g;
    }
    for (p, g) in model.output[row(context)].iter_mut().zip(&grad.positive) {
        *p -= lr * g;
    }
    for (&n, g) in negatives.iter().zip(&grad.negatives) {
        for (p, gv) in model.output[row(n)].iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    loss
}

/// Applies one SGNS update to explicit vectors; exposed for gradient checks.
pub fn sgns_update(input: &mut [f64], positive: &mut [f64], negatives: &mut [Vec<f64>], lr: f64) -> f64 {
    let neg_refs: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    let loss = sgns_loss(input, positive, &neg_refs);
    let grad = sgns_gradient(input, positive, &neg_refs);
    for (p, g) in input.iter_mut().zip(&grad.input) {
        *p -= lr * g;
    }
    for (p, g) in positive.iter_mut().zip(&grad.positive) {
        *p -= lr * g;
    }
    for (n, g) in negatives.iter_mut().zip(&grad.negatives) {
        for (p, gv) in n.iter_mut().zip(g) {
            *p -= lr * gv;
        }
    }
    loss
}

pub fn train_item2vec(train: &SessionDataset, config: &Item2VecConfig) -> Result<ItemEmbeddings> {
    train_item2vec_monitored(train, config, None)
}

pub fn train_item2vec_monitored(
    train: &SessionDataset,
    config: &Item2VecConfig,
    mut monitor: Option<Monitor<'_, ItemEmbeddings>>,
) -> Result<ItemEmbeddings> {
    let mut model = ItemEmbeddings::init(train, config)?;
    if config.epochs == 0 {
        return Ok(model);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let noise_weights: Vec<f64> = model
        .freq
        .iter()
        .zip(&model.trained)
        .map(|(&f, &t)| if t { (f as f64).powf(0.75) } else { 0.0 })
        .collect();
    let noise =
        WeightedIndex::new(&noise_weights).map_err(|e| Error::Config(format!("Item2Vec noise distribution: {e}")))?;

    let total: u64 = model
        .freq
        .iter()
        .zip(&model.trained)
        .filter(|(_, &t)| t)
        .map(|(&f, _)| f)
        .sum();
    let keep_prob: Vec<f64> = model
        .freq
        .iter()
        .map(|&f| {
            if config.subsample <= 0.0 || f == 0 {
                1.0
            } else {
                let t = config.subsample * total as f64;
                (((f as f64 / t).sqrt() + 1.0) * t / f as f64).min(1.0)
            }
        })
        .collect();

    let planned = (config.epochs as u64 * train.n_clicks()).max(1) as f64;
    let mut processed = 0u64;
    let mut order: Vec<usize> = (0..train.sessions().len()).collect();
    let mut stopper = monitor.as_ref().map(|m| crate::tuning::EarlyStopper::new(m.patience));
    let mut best: Option<ItemEmbeddings> = None;
    let mut negatives = Vec::with_capacity(config.negatives);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut pairs = 0u64;
        for &si in &order {
            let session = &train.sessions()[si];
            processed += session.items.len() as u64;
            let lr = config.start_lr - (config.start_lr - config.final_lr) * (processed as f64 / planned).min(1.0);
            let kept: Vec<ItemIdx> = session
                .items
                .iter()
                .copied()
                .filter(|&i| model.trained[i as usize])
                .filter(|&i| rng.random::<f64>() < keep_prob[i as usize])
                .collect();
            for (c, &center) in kept.iter().enumerate() {
                let span = rng.random_range(1..=config.window);
                let lo = c.saturating_sub(span);
                let hi = (c + span).min(kept.len() - 1);
                for (x, &context) in kept.iter().enumerate().take(hi + 1).skip(lo) {
                    if x == c || context == center {
                        continue;
                    }
                    negatives.clear();
                    for _ in 0..config.negatives {
                        let n = noise.sample(&mut rng) as ItemIdx;
                        if n != context {
                            negatives.push(n);
                        }
                    }
                    epoch_loss += sgns_step(&mut model, center, context, &negatives, lr);
                    pairs += 1;
                }
            }
        }
        let mean = if pairs == 0 { 0.0 } else { epoch_loss / pairs as f64 };
        if !mean.is_finite() {
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

impl Recommender for ItemEmbeddings {
    fn name(&self) -> &str {
        "Item2Vec"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, exclusions: &[ItemIdx]) -> Result<Ranking> {
        Ok(rank(&self.score(prefix), k, exclusions, &self.freq))
    }
}
