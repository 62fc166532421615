use crate::error::{Error, Result};

/// Floor applied to the argument of the logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BprMax {
    pub loss: f64,
    /// dL / d r_target
    pub grad_target: f64,
    /// dL / d r_j for every negative
    pub grad_negatives: Vec<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// BPR-max: `-ln Σ_j s_j σ(r_t − r_j) + λ Σ_j s_j r_j²` with `s = softmax(r_neg)`.
pub fn bpr_max_loss(target: f64, negatives: &[f64], lambda: f64) -> Result<BprMax> {
    if negatives.is_empty() {
        return Err(Error::Config("BPR-max needs at least one negative".into()));
    }
    let max = negatives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = negatives.iter().map(|&r| (r - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    let soft: Vec<f64> = exp.iter().map(|e| e / z).collect();
    let sig: Vec<f64> = negatives.iter().map(|&r| sigmoid(target - r)).collect();

    let a: f64 = soft.iter().zip(&sig).map(|(s, g)| s * g).sum();
    let reg: f64 = soft.iter().zip(negatives).map(|(s, r)| s * r * r).sum();
    let clamped = a < LOG_FLOOR;
    let loss = -a.max(LOG_FLOOR).ln() + lambda * reg;

    // d(-ln A): zero once the floor is active
    let inv_a = if clamped { 0.0 } else { 1.0 / a };
    let grad_target = -inv_a * soft.iter().zip(&sig).map(|(s, g)| s * g * (1.0 - g)).sum::<f64>();
    let grad_negatives = (0..negatives.len())
        .map(|k| {
            let (s, g, r) = (soft[k], sig[k], negatives[k]);
            let da = s * (g - a) - s * g * (1.0 - g);
            let dreg = s * (r * r - reg) + 2.0 * s * r;
            -inv_a * da + lambda * dreg
        })
        .collect();
    Ok(BprMax {
        loss,
        grad_target,
        grad_negatives,
    })
}
