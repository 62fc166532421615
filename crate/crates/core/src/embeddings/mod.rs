//! Gradient-trained baselines: skip-gram item embeddings and session-based
//! matrix factorization.

mod bpr_max;
mod item2vec;
mod smf;

use rand::Rng;

pub use bpr_max::{bpr_max_loss, BprMax, LOG_FLOOR};
pub use item2vec::{
    sgns_gradient, sgns_loss, sgns_update, train_item2vec, train_item2vec_monitored, Item2VecConfig, ItemEmbeddings,
    SgnsGradient,
};
pub use smf::{train_smf, train_smf_monitored, SmfConfig, SmfGradient, SmfModel};

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

pub(crate) fn init_uniform<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect()
}

/// Per-epoch validation hook for early stopping. `validate` returns the
/// validation HR@20 of the current parameters.
pub struct Monitor<'a, M> {
    pub patience: usize,
    pub validate: &'a mut dyn FnMut(&M) -> crate::Result<f64>,
}

impl<'a, M> Monitor<'a, M> {
    pub fn new(validate: &'a mut dyn FnMut(&M) -> crate::Result<f64>) -> Self {
        Self {
            patience: crate::tuning::DEFAULT_PATIENCE,
            validate,
        }
    }
}
