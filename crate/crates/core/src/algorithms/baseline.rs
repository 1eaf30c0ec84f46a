use serde::{Deserialize, Serialize};

use super::HyperParams;
use crate::error::{Error, Result};

/// Linear value head predicting the reward of a question from its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// `d` feature weights followed by the bias.
    pub weights: Vec<f64>,
}

impl BaselineParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; feature_dim + 1],
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() + 1 != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len() - 1,
                actual: x.len(),
            });
        }
        let (bias, w) = self.weights.split_last().expect("bias present");
        Ok(w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
    }
}

/// `scale * (predicted - reward)^2`.
pub fn baseline_loss(predicted: f64, reward: f64, hp: &HyperParams) -> f64 {
    let d = predicted - reward;
    hp.baseline_loss_scale * d * d
}

/// Mean baseline loss over one group's rewards.
pub fn group_baseline_loss(bp: &BaselineParams, x: &[f64], rewards: &[f64], hp: &HyperParams) -> Result<f64> {
    let b = bp.predict(x)?;
    Ok(rewards.iter().map(|r| baseline_loss(b, *r, hp)).sum::<f64>() / rewards.len().max(1) as f64)
}

/// Gradient of `group_baseline_loss` with respect to the baseline weights.
pub fn baseline_gradient(bp: &BaselineParams, x: &[f64], rewards: &[f64], hp: &HyperParams) -> Result<Vec<f64>> {
    let b = bp.predict(x)?;
    let n = rewards.len().max(1) as f64;
    let dl_db: f64 = rewards
        .iter()
        .map(|r| 2.0 * hp.baseline_loss_scale * (b - r))
        .sum::<f64>()
        / n;
    Ok(x.iter().map(|v| dl_db * v).chain(std::iter::once(dl_db)).collect())
}
