//! Surrogate objectives and their analytic gradients.
//!
//! GRPO and ReMax return objectives to maximise; DPO returns a loss to
//! minimise. `gradient` always differentiates the value `objective_value`
//! returns, so callers negate it for the maximised objectives.

use serde::{Deserialize, Serialize};

use super::HyperParams;
use crate::error::{Error, Result};
use crate::policy::{
    entropy_from, kl_from, logprob_from, PolicyParams, ReferenceParams, Response, SlotLogProbs, N_ANSWER, N_CONTENT,
};

/// G responses to one question with their rewards, advantages and the
/// per-token log-probabilities under the sampling policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub question_id: String,
    pub features: Vec<f64>,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub old_logprobs: Vec<Vec<f64>>,
}

impl GroupRollout {
    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    fn check(&self) -> Result<()> {
        let g = self.responses.len();
        if g == 0
            || self.rewards.len() != g
            || self.advantages.len() != g
            || self.old_logprobs.len() != g
            || self
                .responses
                .iter()
                .zip(&self.old_logprobs)
                .any(|(r, o)| o.len() != r.len())
        {
            return Err(Error::InvalidArgument(format!(
                "group {} has inconsistent lengths",
                self.question_id
            )));
        }
        Ok(())
    }
}

pub enum Objective<'a> {
    Grpo {
        group: &'a GroupRollout,
        reference: &'a ReferenceParams,
    },
    Remax {
        group: &'a GroupRollout,
        reference: &'a ReferenceParams,
    },
    Dpo {
        features: &'a [f64],
        winner: &'a Response,
        loser: &'a Response,
        reference: &'a ReferenceParams,
    },
}

pub fn objective_value(obj: &Objective<'_>, params: &PolicyParams, hp: &HyperParams) -> Result<f64> {
    match obj {
        Objective::Grpo { group, reference } => grpo_objective(group, params, reference, hp),
        Objective::Remax { group, reference } => remax_objective(group, params, reference, hp),
        Objective::Dpo {
            features,
            winner,
            loser,
            reference,
        } => dpo_loss(params, reference, features, winner, loser, hp),
    }
}

pub fn gradient(obj: &Objective<'_>, params: &PolicyParams, hp: &HyperParams) -> Result<PolicyParams> {
    match obj {
        Objective::Grpo { group, reference } => grpo_gradient(group, params, reference, hp),
        Objective::Remax { group, reference } => remax_gradient(group, params, reference, hp),
        Objective::Dpo {
            features,
            winner,
            loser,
            reference,
        } => dpo_gradient(params, reference, features, winner, loser, hp),
    }
}

fn regularizer(p: &SlotLogProbs, q: &SlotLogProbs, content_length: usize, hp: &HyperParams) -> f64 {
    -hp.kl_coeff * kl_from(p, q, content_length) + hp.entropy_coeff * entropy_from(p, content_length)
}

/// Adds the gradient of `-kl_coeff * KL(p || q) + entropy_coeff * H(p)`.
fn accumulate_regularizer_grad(
    grad: &mut PolicyParams,
    x: &[f64],
    p: &SlotLogProbs,
    q: &SlotLogProbs,
    hp: &HyperParams,
) {
    let content_length = grad.content_length() as f64;
    // dKL/dz_j = p_j (log p_j - log q_j - KL), dH/dz_j = -p_j (log p_j + H)
    fn coefs<const N: usize>(lp: &[f64; N], lq: &[f64; N], beta: f64, c_ent: f64) -> [f64; N] {
        let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
        let h: f64 = -lp.iter().map(|a| a.exp() * a).sum::<f64>();
        std::array::from_fn(|j| {
            let pj = lp[j].exp();
            -beta * pj * (lp[j] - lq[j] - kl) - c_ent * pj * (lp[j] + h)
        })
    }
    let cc: [f64; N_CONTENT] = coefs(&p.content, &q.content, hp.kl_coeff, hp.entropy_coeff);
    let ca: [f64; N_ANSWER] = coefs(&p.answer, &q.answer, hp.kl_coeff, hp.entropy_coeff);
    grad.accumulate_content(x, &cc, content_length);
    grad.accumulate_answer(x, &ca, 1.0);
}

fn clip(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

fn token_ratios(group: &GroupRollout, lp: &SlotLogProbs) -> Result<Vec<Vec<f64>>> {
    group
        .responses
        .iter()
        .zip(&group.old_logprobs)
        .map(|(r, old)| {
            logprob_from(lp, r)
                .iter()
                .zip(old)
                .map(|(new, old)| {
                    let ratio = (new - old).exp();
                    if ratio.is_finite() {
                        Ok(ratio)
                    } else {
                        Err(Error::Numeric(format!(
                            "non-finite importance ratio in group {}",
                            group.question_id
                        )))
                    }
                })
                .collect()
        })
        .collect()
}

/// Clipped token-level surrogate, token-mean per response, group mean, minus
/// the KL penalty plus the entropy bonus.
pub fn grpo_objective(
    group: &GroupRollout,
    params: &PolicyParams,
    reference: &ReferenceParams,
    hp: &HyperParams,
) -> Result<f64> {
    group.check()?;
    let lp = params.slot_logprobs(&group.features)?;
    let lq = reference.params().slot_logprobs(&group.features)?;
    let ratios = token_ratios(group, &lp)?;
    let g = group.group_size() as f64;
    let surrogate: f64 = ratios
        .iter()
        .zip(&group.advantages)
        .map(|(rs, &a)| {
            rs.iter()
                .map(|&ratio| (ratio * a).min(clip(ratio, hp.clip_eps) * a))
                .sum::<f64>()
                / rs.len() as f64
        })
        .sum::<f64>()
        / g;
    Ok(surrogate + regularizer(&lp, &lq, params.content_length(), hp))
}

pub fn grpo_gradient(
    group: &GroupRollout,
    params: &PolicyParams,
    reference: &ReferenceParams,
    hp: &HyperParams,
) -> Result<PolicyParams> {
    group.check()?;
    let x = &group.features;
    let lp = params.slot_logprobs(x)?;
    let lq = reference.params().slot_logprobs(x)?;
    let ratios = token_ratios(group, &lp)?;
    let g = group.group_size() as f64;
    let mut grad = PolicyParams::zeros(params.feature_dim(), params.vocab());
    for ((r, rs), &a) in group.responses.iter().zip(&ratios).zip(&group.advantages) {
        let weight = 1.0 / (g * rs.len() as f64);
        let active = |ratio: f64| {
            let inside = (1.0 - hp.clip_eps..=1.0 + hp.clip_eps).contains(&ratio);
            inside || ratio * a < clip(ratio, hp.clip_eps) * a
        };
        // d ratio / d theta = ratio * d logprob / d theta
        for (t, tok) in r.content.iter().enumerate() {
            if active(rs[t]) {
                grad.accumulate_content_token_grad(x, &lp, *tok, weight * a * rs[t]);
            }
        }
        let last = rs[rs.len() - 1];
        if active(last) {
            grad.accumulate_answer_token_grad(x, &lp, r.answer, weight * a * last);
        }
    }
    accumulate_regularizer_grad(&mut grad, x, &lp, &lq, hp);
    Ok(grad)
}

/// Advantage-weighted sequence log-likelihood, group mean, minus the KL
/// penalty plus the entropy bonus.
pub fn remax_objective(
    group: &GroupRollout,
    params: &PolicyParams,
    reference: &ReferenceParams,
    hp: &HyperParams,
) -> Result<f64> {
    group.check()?;
    let lp = params.slot_logprobs(&group.features)?;
    let lq = reference.params().slot_logprobs(&group.features)?;
    let g = group.group_size() as f64;
    let pg: f64 = group
        .responses
        .iter()
        .zip(&group.advantages)
        .map(|(r, a)| a * logprob_from(&lp, r).iter().sum::<f64>())
        .sum::<f64>()
        / g;
    Ok(pg + regularizer(&lp, &lq, params.content_length(), hp))
}

pub fn remax_gradient(
    group: &GroupRollout,
    params: &PolicyParams,
    reference: &ReferenceParams,
    hp: &HyperParams,
) -> Result<PolicyParams> {
    group.check()?;
    let x = &group.features;
    let lp = params.slot_logprobs(x)?;
    let lq = reference.params().slot_logprobs(x)?;
    let g = group.group_size() as f64;
    let mut grad = PolicyParams::zeros(params.feature_dim(), params.vocab());
    for (r, a) in group.responses.iter().zip(&group.advantages) {
        grad.accumulate_logprob_grad(x, &lp, r, a / g);
    }
    accumulate_regularizer_grad(&mut grad, x, &lp, &lq, hp);
    Ok(grad)
}

fn dpo_margin(
    params: &PolicyParams,
    reference: &ReferenceParams,
    x: &[f64],
    winner: &Response,
    loser: &Response,
    hp: &HyperParams,
) -> Result<(f64, SlotLogProbs)> {
    let lp = params.slot_logprobs(x)?;
    let lq = reference.params().slot_logprobs(x)?;
    let seq = |l: &SlotLogProbs, r: &Response| logprob_from(l, r).iter().sum::<f64>();
    let margin = (seq(&lp, winner) - seq(&lq, winner)) - (seq(&lp, loser) - seq(&lq, loser));
    Ok((hp.dpo_beta * margin, lp))
}

/// `ln(1 + e^v)` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// `-ln sigmoid(beta * [(log pi(w) - log ref(w)) - (log pi(l) - log ref(l))])`.
pub fn dpo_loss(
    params: &PolicyParams,
    reference: &ReferenceParams,
    x: &[f64],
    winner: &Response,
    loser: &Response,
    hp: &HyperParams,
) -> Result<f64> {
    let (z, _) = dpo_margin(params, reference, x, winner, loser, hp)?;
    Ok(softplus(-z))
}

pub fn dpo_gradient(
    params: &PolicyParams,
    reference: &ReferenceParams,
    x: &[f64],
    winner: &Response,
    loser: &Response,
    hp: &HyperParams,
) -> Result<PolicyParams> {
    let (z, lp) = dpo_margin(params, reference, x, winner, loser, hp)?;
    // dloss/dz = -sigmoid(-z)
    let s = -crate::data::logistic(-z) * hp.dpo_beta;
    let mut grad = PolicyParams::zeros(params.feature_dim(), params.vocab());
    grad.accumulate_logprob_grad(x, &lp, winner, s);
    grad.accumulate_logprob_grad(x, &lp, loser, -s);
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::grpo_advantages;
    use crate::policy::tests::{random_params, random_x};
    use crate::policy::{sample_response, snapshot_reference, AnswerToken, ContentToken, Vocabulary};
    use crate::rng::{self, Stream};
    use approx::assert_abs_diff_eq;

    fn rollout(params: &PolicyParams, x: &[f64], rewards: Vec<f64>, advantages: Vec<f64>, seed: u64) -> GroupRollout {
        let mut r = rng::stream(seed, Stream::Sampling);
        let responses: Vec<Response> = (0..rewards.len())
            .map(|_| sample_response(params, x, &mut r).unwrap())
            .collect();
        GroupRollout {
            question_id: "q".into(),
            features: x.to_vec(),
            old_logprobs: responses.iter().map(|r| r.token_logprobs.clone()).collect(),
            responses,
            rewards,
            advantages,
        }
    }

    #[test]
    fn grpo_at_old_params_is_mean_advantage_plus_entropy() {
        let p = random_params(2, 0.4, 1);
        let x = random_x(2, 1);
        let rewards = vec![-0.9, -0.1, -0.4, -0.6];
        let adv = grpo_advantages(&rewards).unwrap();
        let g = rollout(&p, &x, rewards, adv.clone(), 3);
        let hp = HyperParams::default();
        let reference = snapshot_reference(&p);
        let j = grpo_objective(&g, &p, &reference, &hp).unwrap();
        let mean_adv = adv.iter().sum::<f64>() / 4.0;
        let h = crate::policy::entropy(&p, &x).unwrap();
        assert_abs_diff_eq!(j, mean_adv + hp.entropy_coeff * h, epsilon = 1e-12);
    }

    #[test]
    fn zero_advantage_leaves_regularizer_only() {
        let p = random_params(2, 0.4, 2);
        let q = random_params(2, 0.4, 3);
        let x = random_x(2, 2);
        let g = rollout(&p, &x, vec![-0.5; 3], vec![0.0; 3], 4);
        let hp = HyperParams::default();
        let reference = snapshot_reference(&q);
        let kl = crate::policy::kl_divergence(&p, &reference, &x).unwrap();
        let h = crate::policy::entropy(&p, &x).unwrap();
        let expected = -hp.kl_coeff * kl + hp.entropy_coeff * h;
        assert_abs_diff_eq!(
            grpo_objective(&g, &p, &reference, &hp).unwrap(),
            expected,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            remax_objective(&g, &p, &reference, &hp).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn clipped_branch_is_selected() {
        // one content-free token, ratio 1.5, A = 1, eps = 0.2 -> 1.2
        let vocab = Vocabulary { content_length: 0 };
        let p = PolicyParams::zeros(1, vocab);
        let r = Response {
            content: vec![],
            answer: AnswerToken::Prob(10),
            token_logprobs: vec![(1.0f64 / 102.0).ln() - 1.5f64.ln()],
        };
        let g = GroupRollout {
            question_id: "q".into(),
            features: vec![0.0],
            old_logprobs: vec![r.token_logprobs.clone()],
            responses: vec![r],
            rewards: vec![0.0],
            advantages: vec![1.0],
        };
        let hp = HyperParams {
            kl_coeff: 0.0,
            entropy_coeff: 0.0,
            ..HyperParams::default()
        };
        let reference = snapshot_reference(&p);
        let j = grpo_objective(&g, &p, &reference, &hp).unwrap();
        assert_abs_diff_eq!(j, 1.2, epsilon = 1e-12);
        // clipped branch has zero gradient
        let grad = grpo_gradient(&g, &p, &reference, &hp).unwrap();
        assert!(grad.weights().iter().all(|w| *w == 0.0));
    }

    #[test]
    fn remax_uniform_logprob_sum() {
        let p = PolicyParams::zeros(2, Vocabulary::default());
        let g = rollout(&p, &[0.5, -0.5], vec![-0.3], vec![1.0], 6);
        let hp = HyperParams {
            kl_coeff: 0.0,
            entropy_coeff: 0.0,
            ..HyperParams::default()
        };
        let j = remax_objective(&g, &p, &snapshot_reference(&p), &hp).unwrap();
        assert_abs_diff_eq!(j, 8.0 * (1.0f64 / 3.0).ln() + (1.0f64 / 102.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn remax_matches_direct_summation() {
        let old = random_params(3, 0.5, 10);
        let p = random_params(3, 0.5, 11);
        let q = random_params(3, 0.5, 12);
        let x = random_x(3, 10);
        let g = rollout(&old, &x, vec![-0.1, -0.5, -0.9], vec![0.4, 0.0, -0.4], 7);
        let hp = HyperParams::default();
        let reference = snapshot_reference(&q);

        // brute force from raw weights
        let d = 3;
        let logits = |w: &PolicyParams, n: usize, off: usize| -> Vec<f64> {
            (0..n)
                .map(|j| {
                    (0..=d)
                        .map(|k| if k < d { x[k] } else { 1.0 } * w.weights()[off + k * n + j])
                        .sum()
                })
                .collect()
        };
        let logsm = |z: Vec<f64>| -> Vec<f64> {
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            z.iter().map(|v| v - s.ln()).collect()
        };
        let (pc, pa) = (logsm(logits(&p, 3, 0)), logsm(logits(&p, 102, 12)));
        let (qc, qa) = (logsm(logits(&q, 3, 0)), logsm(logits(&q, 102, 12)));
        let mut pg = 0.0;
        for (r, a) in g.responses.iter().zip(&g.advantages) {
            let s: f64 = r.content.iter().map(|t| pc[t.index()]).sum::<f64>() + pa[r.answer.index()];
            pg += a * s;
        }
        pg /= 3.0;
        let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x.exp() * (x - y)).sum::<f64>();
        let ent = |a: &[f64]| -a.iter().map(|x| x.exp() * x).sum::<f64>();
        let expected =
            pg - hp.kl_coeff * (8.0 * kl(&pc, &qc) + kl(&pa, &qa)) + hp.entropy_coeff * (8.0 * ent(&pc) + ent(&pa));
        assert_abs_diff_eq!(
            remax_objective(&g, &p, &reference, &hp).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dpo_cases() {
        let p = random_params(2, 0.5, 20);
        let x = random_x(2, 20);
        let hp = HyperParams::default();
        let mut rr = rng::stream(1, Stream::Preference);
        let w = sample_response(&p, &x, &mut rr).unwrap();
        let l = sample_response(&p, &x, &mut rr).unwrap();
        let reference = snapshot_reference(&p);
        assert_abs_diff_eq!(
            dpo_loss(&p, &reference, &x, &w, &l, &hp).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );

        // push the winner's answer token far up relative to the reference
        let vocab = Vocabulary { content_length: 1 };
        let base = PolicyParams::zeros(1, vocab);
        let mut tuned = base.clone();
        tuned.set_answer_weight(1, 70, 1e4);
        let win = Response {
            content: vec![ContentToken::Rationale],
            answer: AnswerToken::Prob(70),
            token_logprobs: vec![0.0; 2],
        };
        let lose = Response {
            answer: AnswerToken::Prob(10),
            ..win.clone()
        };
        let loss = dpo_loss(&tuned, &snapshot_reference(&base), &[0.0], &win, &lose, &hp).unwrap();
        assert!(loss < 1e-12, "loss {loss}");

        // brute-force formula
        let q = random_params(2, 0.5, 21);
        let refq = snapshot_reference(&q);
        let seq = |pp: &PolicyParams, r: &Response| crate::policy::logprob(pp, &x, r).unwrap().iter().sum::<f64>();
        let z = 0.1 * ((seq(&p, &w) - seq(&q, &w)) - (seq(&p, &l) - seq(&q, &l)));
        let expected = -(1.0 / (1.0 + (-z).exp())).ln();
        assert_abs_diff_eq!(dpo_loss(&p, &refq, &x, &w, &l, &hp).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn entropy_gradient_is_linear_in_coefficient() {
        let p = random_params(2, 0.5, 30);
        let x = random_x(2, 30);
        let g = rollout(&p, &x, vec![-0.2, -0.4], vec![0.0, 0.0], 8);
        let reference = snapshot_reference(&p);
        let hp1 = HyperParams {
            kl_coeff: 0.0,
            entropy_coeff: 0.001,
            ..HyperParams::default()
        };
        let hp2 = HyperParams {
            entropy_coeff: 0.002,
            ..hp1
        };
        let g1 = remax_gradient(&g, &p, &reference, &hp1).unwrap();
        let g2 = remax_gradient(&g, &p, &reference, &hp2).unwrap();
        for (a, b) in g1.weights().iter().zip(g2.weights()) {
            assert_abs_diff_eq!(2.0 * a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn unused_feature_rows_have_zero_gradient() {
        // x_0 = 0 makes every weight on feature row 0 irrelevant
        let p = random_params(2, 0.5, 40);
        let x = vec![0.0, 0.7];
        let g = rollout(&p, &x, vec![-0.2, -0.4], vec![0.5, -0.5], 9);
        let reference = snapshot_reference(&random_params(2, 0.5, 41));
        let grad = remax_gradient(&g, &p, &reference, &HyperParams::default()).unwrap();
        for j in 0..N_CONTENT {
            assert_eq!(grad.content_weight(0, j), 0.0);
        }
        for j in 0..N_ANSWER {
            assert_eq!(grad.answer_weight(0, j), 0.0);
        }
    }

    #[test]
    fn non_finite_ratio_is_error() {
        let p = random_params(1, 0.5, 50);
        let x = random_x(1, 50);
        let mut g = rollout(&p, &x, vec![-0.2, -0.4], vec![1.0, -1.0], 10);
        g.old_logprobs[0][0] = -1e6;
        let reference = snapshot_reference(&p);
        assert!(matches!(
            grpo_objective(&g, &p, &reference, &HyperParams::default()),
            Err(Error::Numeric(_))
        ));
    }
}
