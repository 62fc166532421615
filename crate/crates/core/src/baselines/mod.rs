//! Instance-based baselines: session popularity, association and sequential
//! rules, and vector-multiplication session KNN.

mod rules;
mod spop;
mod vsknn;

use serde::{Deserialize, Serialize};

pub use rules::{RuleKind, RuleTable, RulesConfig};
pub use spop::{SPop, SPopConfig};
pub use vsknn::{Sampling, Similarity, VsknnConfig, VsknnIndex};

/// Named decay functions shared by position weighting and rule distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Linear,
    Same,
    Div,
    Log,
    Quadratic,
}

impl Weighting {
    pub const ALL: [Weighting; 5] = [
        Weighting::Linear,
        Weighting::Same,
        Weighting::Div,
        Weighting::Log,
        Weighting::Quadratic,
    ];

    /// Weight of 1-based position `i` in a sequence of length `len`; the
    /// last position is the most recent.
    pub fn position(self, i: usize, len: usize) -> f64 {
        debug_assert!(i >= 1 && i <= len);
        let (i, l) = (i as f64, len as f64);
        match self {
            Weighting::Same => 1.0,
            Weighting::Div => i / l,
            Weighting::Linear => (1.0 - 0.1 * (l - i)).max(0.0),
            Weighting::Log => 1.0 / ((l - i + 1.7).log10() + 1.0),
            Weighting::Quadratic => (i / l) * (i / l),
        }
    }

    /// Weight of a rule between items `distance ≥ 1` positions apart.
    pub fn distance(self, distance: usize) -> f64 {
        debug_assert!(distance >= 1);
        let d = distance as f64;
        match self {
            Weighting::Linear => {
                if distance < 10 {
                    1.0 - 0.1 * d
                } else {
                    0.0
                }
            }
            Weighting::Same => 1.0,
            Weighting::Div => 1.0 / d,
            Weighting::Log => 1.0 / (d + 1.7).log10(),
            Weighting::Quadratic => 1.0 / (d * d),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Linear => "linear",
            Weighting::Same => "same",
            Weighting::Div => "div",
            Weighting::Log => "log",
            Weighting::Quadratic => "quadratic",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_weights() {
        assert_eq!(Weighting::Same.position(1, 4), 1.0);
        assert_eq!(Weighting::Div.position(2, 4), 0.5);
        assert!((Weighting::Linear.position(1, 4) - 0.7).abs() < 1e-15);
        assert_eq!(Weighting::Linear.position(1, 12), 0.0);
        assert_eq!(Weighting::Quadratic.position(2, 4), 0.25);
        // most recent item: log10(1.7) + 1
        assert!((Weighting::Log.position(4, 4) - 1.0 / (1.7f64.log10() + 1.0)).abs() < 1e-15);
        for w in Weighting::ALL {
            assert!(w.position(5, 5) > 0.0);
        }
    }

    #[test]
    fn linear_distance_decays_to_zero_at_ten() {
        assert!((Weighting::Linear.distance(1) - 0.9).abs() < 1e-15);
        assert!((Weighting::Linear.distance(9) - 0.1).abs() < 1e-15);
        assert_eq!(Weighting::Linear.distance(10), 0.0);
    }
}
