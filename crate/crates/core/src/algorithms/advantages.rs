use crate::error::{Error, Result};

fn group_mean(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group-relative advantages need at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// `(r - mean) / std` with the population standard deviation. A group with
/// zero spread gets all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let mu = group_mean(rewards)?;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mu).collect();
    let var = centered.iter().map(|c| c * c).sum::<f64>() / rewards.len() as f64;
    let sigma = var.sqrt();
    // rounding noise on a constant group must not be blown up into +-1
    let scale = rewards.iter().fold(0.0f64, |m, r| m.max(r.abs())).max(1.0);
    if sigma <= 1e-12 * scale {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(centered.into_iter().map(|c| c / sigma).collect())
}

/// `r - mean`, keeping the raw reward scale.
pub fn modified_grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let mu = group_mean(rewards)?;
    Ok(rewards.iter().map(|r| r - mu).collect())
}

/// `r - b` for a baseline `b` shared by the group.
pub fn remax_advantages(rewards: &[f64], baseline: f64) -> Vec<f64> {
    rewards.iter().map(|r| r - baseline).collect()
}
