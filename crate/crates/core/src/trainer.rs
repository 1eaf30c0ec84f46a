//! Strictly online single-pass training, offline DPO, and point prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::algorithms::{
    adamw_step, baseline_gradient, dpo_gradient, grpo_advantages, grpo_gradient, modified_grpo_advantages,
    remax_advantages, remax_gradient, Algorithm, BaselineParams, GroupRollout, HyperParams, OptimizerState,
    RemaxBaseline,
};
use crate::data::{Dataset, Question};
use crate::error::{Error, Result};
use crate::evaluation::{extreme_bucket_mass, Forecast};
use crate::policy::{
    parse_probability, sample_from, snapshot_reference, AnswerToken, ContentToken, PolicyParams, Response,
    SlotLogProbs, Vocabulary, ABSTAIN_INDEX, N_CONTENT,
};
use crate::reward::{assess_guardrails, total_reward, PenaltyConfig};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub enabled: bool,
    pub window: usize,
    pub gibberish_threshold: f64,
    pub extreme_mass_threshold: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 200,
            gibberish_threshold: 0.5,
            extreme_mass_threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Questions between reference-policy resets.
    pub outer_iteration_len: usize,
    pub early_stop: EarlyStopConfig,
    pub seed: u64,
    pub guardrails_enabled: bool,
    /// Emit an intermediate checkpoint every this many questions; 0 disables.
    pub checkpoint_every: usize,
    pub content_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Remax,
            outer_iteration_len: 500,
            early_stop: EarlyStopConfig::default(),
            seed: 0,
            guardrails_enabled: true,
            checkpoint_every: 0,
            content_length: crate::policy::DEFAULT_CONTENT_LENGTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, hp: &HyperParams) -> Result<()> {
        let es = &self.early_stop;
        if es.window == 0 {
            return Err(Error::InvalidArgument("early_stop.window must be >= 1".into()));
        }
        for t in [es.gibberish_threshold, es.extreme_mass_threshold] {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidArgument(
                    "early-stop thresholds must lie in (0, 1]".into(),
                ));
            }
        }
        if self.outer_iteration_len == 0 {
            return Err(Error::InvalidArgument("outer_iteration_len must be >= 1".into()));
        }
        if matches!(self.algorithm, Algorithm::Grpo | Algorithm::ModifiedGrpo) && hp.group_size < 2 {
            return Err(Error::InvalidArgument(
                "group-relative algorithms need group_size >= 2".into(),
            ));
        }
        hp.validate()
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary {
            content_length: self.content_length,
        }
    }
}

/// One training question's rollout summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub index: usize,
    pub id: String,
    pub prediction_ts: i64,
    /// Parsed probability of each sampled response.
    pub parsed: Vec<Option<f64>>,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
    pub gibberish_proportion: f64,
    pub non_english_proportion: f64,
    pub explanation_quality: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<QuestionRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningMetrics {
    pub questions: usize,
    pub mean_reward: f64,
    pub parse_failure_rate: f64,
    pub gibberish_proportion: f64,
    pub extreme_bucket_mass: f64,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn metrics(&self) -> RunningMetrics {
        metrics_of(&self.records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn metrics_of(records: &[QuestionRecord]) -> RunningMetrics {
    if records.is_empty() {
        return RunningMetrics::default();
    }
    let n = records.len() as f64;
    let parsed: Vec<Option<f64>> = records.iter().flat_map(|r| r.parsed.iter().copied()).collect();
    let failures = parsed.iter().filter(|p| p.is_none()).count();
    RunningMetrics {
        questions: records.len(),
        mean_reward: records.iter().map(|r| r.mean_reward).sum::<f64>() / n,
        parse_failure_rate: failures as f64 / parsed.len().max(1) as f64,
        gibberish_proportion: records.iter().map(|r| r.gibberish_proportion).sum::<f64>() / n,
        extreme_bucket_mass: extreme_bucket_mass(&parsed),
    }
}

/// True when the window shows gibberish collapse or overconfidence collapse.
pub fn check_early_stop(window: &[QuestionRecord], cfg: &EarlyStopConfig) -> bool {
    if window.is_empty() {
        return false;
    }
    let m = metrics_of(window);
    m.gibberish_proportion > cfg.gibberish_threshold || m.extreme_bucket_mass > cfg.extreme_mass_threshold
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    EarlyStopped { at_index: usize },
    NumericAbort { at_index: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final parameters, or the last good ones after a numeric abort.
    pub params: PolicyParams,
    pub baseline: Option<BaselineParams>,
    pub log: RunLog,
    pub status: RunStatus,
}

/// Intermediate state handed to checkpoint hooks.
pub struct CheckpointView<'a> {
    pub questions_done: usize,
    pub params: &'a PolicyParams,
    pub baseline: Option<&'a BaselineParams>,
    pub log: &'a RunLog,
}

pub type CheckpointHook<'a> = dyn FnMut(&CheckpointView<'_>) -> Result<()> + 'a;

pub fn train_online(
    stream: &Dataset,
    cfg: &TrainConfig,
    hp: &HyperParams,
    penalties: &PenaltyConfig,
) -> Result<TrainOutcome> {
    let dim = stream.feature_dim().unwrap_or(0);
    let init = PolicyParams::zeros(dim, cfg.vocab());
    train_online_from(stream, init, cfg, hp, penalties, &mut |_| Ok(()))
}

fn effective_penalties(cfg: &TrainConfig, penalties: &PenaltyConfig) -> PenaltyConfig {
    if cfg.guardrails_enabled {
        *penalties
    } else {
        PenaltyConfig::disabled()
    }
}

struct Scored {
    parsed: Option<f64>,
    total: f64,
    gib: f64,
    lang: f64,
    expl: f64,
}

fn score(r: &Response, y: u8, penalties: &PenaltyConfig) -> Scored {
    let parsed = parse_probability(r);
    let g = assess_guardrails(r);
    // structured responses always satisfy the schema
    let b = total_reward(parsed, y, &g, penalties, true);
    Scored {
        parsed,
        total: b.total,
        gib: g.gibberish_proportion,
        lang: g.non_english_proportion,
        expl: g.explanation_quality,
    }
}

fn record(index: usize, q: &Question, scored: &[Scored]) -> QuestionRecord {
    let n = scored.len().max(1) as f64;
    let rewards: Vec<f64> = scored.iter().map(|s| s.total).collect();
    QuestionRecord {
        index,
        id: q.id.clone(),
        prediction_ts: q.prediction_ts,
        parsed: scored.iter().map(|s| s.parsed).collect(),
        mean_reward: rewards.iter().sum::<f64>() / n,
        rewards,
        gibberish_proportion: scored.iter().map(|s| s.gib).sum::<f64>() / n,
        non_english_proportion: scored.iter().map(|s| s.lang).sum::<f64>() / n,
        explanation_quality: scored.iter().map(|s| s.expl).sum::<f64>() / n,
    }
}

fn argmax(values: &[f64]) -> usize {
    // first index wins ties
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn greedy_response(lp: &SlotLogProbs, content_length: usize) -> Response {
    let c = argmax(&lp.content);
    let a = argmax(&lp.answer);
    Response {
        content: vec![ContentToken::ALL[c]; content_length],
        answer: AnswerToken::from_index(a).expect("answer index in range"),
        token_logprobs: std::iter::repeat_n(lp.content[c], content_length)
            .chain(std::iter::once(lp.answer[a]))
            .collect(),
    }
}

/// Online single pass over `stream` starting from `init`: each question is
/// sampled, scored, and used for exactly one update, in order.
pub fn train_online_from(
    stream: &Dataset,
    init: PolicyParams,
    cfg: &TrainConfig,
    hp: &HyperParams,
    penalties: &PenaltyConfig,
    on_checkpoint: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate(hp)?;
    penalties.validate()?;
    if cfg.algorithm == Algorithm::Dpo {
        return train_dpo_from(stream, init, cfg, hp, penalties);
    }
    if let Some(d) = stream.feature_dim() {
        if d != init.feature_dim() {
            return Err(Error::Dimension {
                expected: init.feature_dim(),
                actual: d,
            });
        }
    }
    let penalties = effective_penalties(cfg, penalties);
    let mut rng = rng::stream(cfg.seed, Stream::Sampling);
    let mut params = init;
    let mut actor_state = OptimizerState::new(params.weights().len());
    let use_value_head = cfg.algorithm == Algorithm::Remax && hp.remax_baseline == RemaxBaseline::Learned;
    let mut baseline = use_value_head.then(|| BaselineParams::zeros(params.feature_dim()));
    let mut baseline_state = OptimizerState::new(params.feature_dim() + 1);
    let actor_opt = hp.actor_optimizer();
    let baseline_opt = hp.baseline_optimizer();
    let mut reference = snapshot_reference(&params);
    let mut log = RunLog::default();
    let mut status = RunStatus::Completed;

    for (index, q) in stream.questions().iter().enumerate() {
        if index % cfg.outer_iteration_len == 0 {
            reference = snapshot_reference(&params);
        }
        let step = (|| -> Result<QuestionRecord> {
            let x = &q.features;
            let lp = params.slot_logprobs(x)?;
            let responses: Vec<Response> = (0..hp.group_size)
                .map(|_| sample_from(&lp, params.content_length(), &mut rng))
                .collect();
            let scored: Vec<Scored> = responses.iter().map(|r| score(r, q.outcome, &penalties)).collect();
            let rewards: Vec<f64> = scored.iter().map(|s| s.total).collect();
            let advantages = match cfg.algorithm {
                Algorithm::Grpo => grpo_advantages(&rewards)?,
                Algorithm::ModifiedGrpo => modified_grpo_advantages(&rewards)?,
                Algorithm::Remax => {
                    let b = match &baseline {
                        Some(bp) => bp.predict(x)?,
                        None => score(&greedy_response(&lp, params.content_length()), q.outcome, &penalties).total,
                    };
                    remax_advantages(&rewards, b)
                }
                Algorithm::Dpo => unreachable!("dpo handled above"),
            };
            let group = GroupRollout {
                question_id: q.id.clone(),
                features: x.clone(),
                old_logprobs: responses.iter().map(|r| r.token_logprobs.clone()).collect(),
                responses,
                rewards: rewards.clone(),
                advantages,
            };
            let mut grad = match cfg.algorithm {
                Algorithm::Remax => remax_gradient(&group, &params, &reference, hp)?,
                _ => grpo_gradient(&group, &params, &reference, hp)?,
            };
            // ascend the objective
            grad.scale(-1.0);
            let mut next = params.clone();
            adamw_step(next.weights_mut(), grad.weights(), &mut actor_state, &actor_opt)?;
            if !next.is_finite() {
                return Err(Error::Numeric("non-finite parameters after update".into()));
            }
            if let Some(bp) = baseline.as_mut() {
                let bg = baseline_gradient(bp, x, &rewards, hp)?;
                let mut nb = bp.weights.clone();
                adamw_step(&mut nb, &bg, &mut baseline_state, &baseline_opt)?;
                if nb.iter().any(|w| !w.is_finite()) {
                    return Err(Error::Numeric("non-finite baseline after update".into()));
                }
                bp.weights = nb;
            }
            params = next;
            Ok(record(index, q, &scored))
        })();
        match step {
            Ok(rec) => log.records.push(rec),
            Err(Error::Numeric(message)) => {
                status = RunStatus::NumericAbort {
                    at_index: index,
                    message,
                };
                break;
            }
            Err(e) => return Err(e),
        }
        if cfg.checkpoint_every > 0 && (index + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(&CheckpointView {
                questions_done: index + 1,
                params: &params,
                baseline: baseline.as_ref(),
                log: &log,
            })?;
        }
        let es = &cfg.early_stop;
        if es.enabled && log.len() >= es.window && check_early_stop(&log.records[log.len() - es.window..], es) {
            status = RunStatus::EarlyStopped { at_index: index };
            break;
        }
    }

    Ok(TrainOutcome {
        params,
        baseline,
        log,
        status,
    })
}

pub fn train_dpo(
    stream: &Dataset,
    cfg: &TrainConfig,
    hp: &HyperParams,
    penalties: &PenaltyConfig,
) -> Result<TrainOutcome> {
    let dim = stream.feature_dim().unwrap_or(0);
    train_dpo_from(stream, PolicyParams::zeros(dim, cfg.vocab()), cfg, hp, penalties)
}

struct PreferencePair {
    features: Vec<f64>,
    winner: Response,
    loser: Response,
}

/// Offline DPO: two reference samples per question, the higher training
/// reward wins, ties are dropped; then `dpo_epochs` shuffled passes of
/// mini-batch updates.
pub fn train_dpo_from(
    stream: &Dataset,
    init: PolicyParams,
    cfg: &TrainConfig,
    hp: &HyperParams,
    penalties: &PenaltyConfig,
) -> Result<TrainOutcome> {
    hp.validate()?;
    let penalties = effective_penalties(cfg, penalties);
    let reference = snapshot_reference(&init);
    let mut rng = rng::stream(cfg.seed, Stream::Preference);
    let mut pairs = Vec::new();
    let mut log = RunLog::default();
    for (index, q) in stream.questions().iter().enumerate() {
        let lp = reference.params().slot_logprobs(&q.features)?;
        let a = sample_from(&lp, init.content_length(), &mut rng);
        let b = sample_from(&lp, init.content_length(), &mut rng);
        let sa = score(&a, q.outcome, &penalties);
        let sb = score(&b, q.outcome, &penalties);
        log.records.push(record(index, q, &[sa, sb]));
        let (ra, rb) = (log.records[index].rewards[0], log.records[index].rewards[1]);
        if ra != rb {
            let (winner, loser) = if ra > rb { (a, b) } else { (b, a) };
            pairs.push(PreferencePair {
                features: q.features.clone(),
                winner,
                loser,
            });
        }
    }
    if pairs.is_empty() {
        return Err(Error::NoPreferencePairs);
    }

    let opt = hp.dpo_optimizer();
    let mut params = init;
    let mut state = OptimizerState::new(params.weights().len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut status = RunStatus::Completed;
    'epochs: for _ in 0..hp.dpo_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hp.dpo_batch) {
            let step = (|| -> Result<PolicyParams> {
                let mut grad = PolicyParams::zeros(params.feature_dim(), params.vocab());
                for &i in batch {
                    let p = &pairs[i];
                    let g = dpo_gradient(&params, &reference, &p.features, &p.winner, &p.loser, hp)?;
                    grad.add_scaled(&g, 1.0 / batch.len() as f64);
                }
                let mut next = params.clone();
                adamw_step(next.weights_mut(), grad.weights(), &mut state, &opt)?;
                if !next.is_finite() {
                    return Err(Error::Numeric("non-finite parameters after DPO update".into()));
                }
                Ok(next)
            })();
            match step {
                Ok(next) => params = next,
                Err(Error::Numeric(message)) => {
                    status = RunStatus::NumericAbort {
                        at_index: batch[0],
                        message,
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainOutcome {
        params,
        baseline: None,
        log,
        status,
    })
}

/// Deterministic forecast: the most likely answer token, lowest index on ties.
pub fn predict(params: &PolicyParams, q: &Question) -> Result<Option<f64>> {
    params.check_features(&q.features)?;
    let logits = params.answer_logits(&q.features);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite answer logits".into()));
    }
    let best = argmax(&logits);
    Ok(if best == ABSTAIN_INDEX {
        None
    } else {
        Some(best as f64 / 100.0)
    })
}

pub fn predict_dataset(params: &PolicyParams, dataset: &Dataset) -> Result<Vec<Forecast>> {
    dataset
        .questions()
        .iter()
        .map(|q| Ok(Forecast::new(q.id.clone(), predict(params, q)?)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    members: Vec<PolicyParams>,
}

impl EnsembleSpec {
    pub fn new(members: Vec<PolicyParams>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        };
        if members.iter().any(|m| !m.same_shape(first)) {
            return Err(Error::InvalidArgument(
                "ensemble members must share vocabulary and feature dimension".into(),
            ));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[PolicyParams] {
        &self.members
    }
}

/// Mean of the members' forecasts, skipping members that abstain.
pub fn ensemble_predict(spec: &EnsembleSpec, q: &Question) -> Result<Option<f64>> {
    let mut mean: Option<f64> = None;
    let mut k = 0.0;
    for m in &spec.members {
        if let Some(p) = predict(m, q)? {
            k += 1.0;
            // running mean stays bit-exact when every member agrees
            mean = Some(match mean {
                None => p,
                Some(cur) => cur + (p - cur) / k,
            });
        }
    }
    Ok(mean)
}

pub fn ensemble_predict_dataset(spec: &EnsembleSpec, dataset: &Dataset) -> Result<Vec<Forecast>> {
    dataset
        .questions()
        .iter()
        .map(|q| Ok(Forecast::new(q.id.clone(), ensemble_predict(spec, q)?)))
        .collect()
}

/// Average probability of a content token per slot over a dataset's questions.
pub fn mean_content_probability(params: &PolicyParams, dataset: &Dataset, token: ContentToken) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(params.slot_logprobs(&vec![0.0; params.feature_dim()])?.content_probs()[token.index()]);
    }
    let mut total = 0.0;
    for q in dataset.questions() {
        let probs: [f64; N_CONTENT] = params.slot_logprobs(&q.features)?.content_probs();
        total += probs[token.index()];
    }
    Ok(total / dataset.len() as f64)
}
