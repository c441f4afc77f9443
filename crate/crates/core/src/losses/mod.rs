//! Balancing, independence, and outcome objectives.

mod balance;
mod independence;
mod outcome;
mod reweight;
mod rff;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use balance::{median_bandwidth, mmd2_weighted, mmd2_weighted_graph, Bandwidth};
pub use independence::{
    decorrelation_loss, decorrelation_loss_graph, hsic_rff_weighted, pairwise_hsic,
};
pub use outcome::{factual_loss_graph, l2_penalty, outcome_loss, outcome_loss_graph};
pub use reweight::{
    weight_loss, weight_penalty, HapBanks, SampleWeights, WeightLoss, THETA_AT_ONE,
};
pub use rff::{rff_features, standardize_cols, LayerBank, RffBank, RffSide};

/// Coefficients of the balance, decorrelation, and head-regularization terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            gamma1: 0.0,
            gamma2: 0.0,
            gamma3: 0.0,
            lambda: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.gamma1,
            self.gamma2,
            self.gamma3,
            self.lambda,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syn8_optimum_is_valid() {
        let lw = LossWeights {
            alpha: 5e-2,
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 0.1,
            lambda: 1e-4,
        };
        lw.validate().unwrap();
        assert!(LossWeights { alpha: -1.0, ..lw }.validate().is_err());
    }
}
