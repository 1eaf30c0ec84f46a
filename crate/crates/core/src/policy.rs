//! Categorical response policy.
//!
//! A response is `content_length` content tokens followed by one answer token.
//! Content tokens share one distribution across positions; both distributions
//! are softmaxes of a linear map of the bias-augmented feature vector
//! `[x_1, ..., x_d, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CONTENT: usize = 3;
/// 101 probability tokens `P_0 ..= P_100` plus `ABSTAIN`.
pub const N_ANSWER: usize = 102;
pub const ABSTAIN_INDEX: usize = 101;
pub const DEFAULT_CONTENT_LENGTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContentToken {
    Rationale,
    Gibberish,
    NonEnglish,
}

impl ContentToken {
    pub const ALL: [ContentToken; N_CONTENT] = [
        ContentToken::Rationale,
        ContentToken::Gibberish,
        ContentToken::NonEnglish,
    ];

    pub fn index(self) -> usize {
        match self {
            ContentToken::Rationale => 0,
            ContentToken::Gibberish => 1,
            ContentToken::NonEnglish => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// `Prob(j)` stands for probability `j / 100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnswerToken {
    Prob(u8),
    Abstain,
}

impl AnswerToken {
    pub fn index(self) -> usize {
        match self {
            AnswerToken::Prob(j) => j as usize,
            AnswerToken::Abstain => ABSTAIN_INDEX,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0..=100 => Some(AnswerToken::Prob(i as u8)),
            ABSTAIN_INDEX => Some(AnswerToken::Abstain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub content_length: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            content_length: DEFAULT_CONTENT_LENGTH,
        }
    }
}

impl Vocabulary {
    pub fn response_len(&self) -> usize {
        self.content_length + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub content: Vec<ContentToken>,
    pub answer: AnswerToken,
    /// Log-probabilities of the content tokens then the answer token under the
    /// sampling policy.
    pub token_logprobs: Vec<f64>,
}

impl Response {
    pub fn len(&self) -> usize {
        self.content.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn count(&self, token: ContentToken) -> usize {
        self.content.iter().filter(|&&t| t == token).count()
    }
}

/// Both weight matrices in one flat buffer: the `(d+1) x 3` content block
/// followed by the `(d+1) x 102` answer block, each row-major by feature.
///
/// The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    feature_dim: usize,
    vocab: Vocabulary,
    weights: Vec<f64>,
}

/// Per-slot log-probabilities at one feature vector.
#[derive(Debug, Clone)]
pub struct SlotLogProbs {
    pub content: [f64; N_CONTENT],
    pub answer: [f64; N_ANSWER],
}

impl SlotLogProbs {
    pub fn content_probs(&self) -> [f64; N_CONTENT] {
        self.content.map(f64::exp)
    }

    pub fn answer_probs(&self) -> [f64; N_ANSWER] {
        self.answer.map(f64::exp)
    }
}

pub fn log_softmax<const N: usize>(logits: &[f64; N]) -> [f64; N] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.map(|z| z - lse)
}

impl PolicyParams {
    pub fn zeros(feature_dim: usize, vocab: Vocabulary) -> Self {
        let n = (feature_dim + 1) * (N_CONTENT + N_ANSWER);
        Self {
            feature_dim,
            vocab,
            weights: vec![0.0; n],
        }
    }

    pub fn from_weights(feature_dim: usize, vocab: Vocabulary, weights: Vec<f64>) -> Result<Self> {
        let expected = (feature_dim + 1) * (N_CONTENT + N_ANSWER);
        if weights.len() != expected {
            return Err(Error::Dimension {
                expected,
                actual: weights.len(),
            });
        }
        Ok(Self {
            feature_dim,
            vocab,
            weights,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    pub fn content_length(&self) -> usize {
        self.vocab.content_length
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn answer_offset(&self) -> usize {
        (self.feature_dim + 1) * N_CONTENT
    }

    /// Flat index of content weight (feature row `k`, token `j`); `k == d` is the bias.
    pub fn content_index(&self, k: usize, j: usize) -> usize {
        k * N_CONTENT + j
    }

    pub fn answer_index(&self, k: usize, j: usize) -> usize {
        self.answer_offset() + k * N_ANSWER + j
    }

    pub fn content_weight(&self, k: usize, j: usize) -> f64 {
        self.weights[self.content_index(k, j)]
    }

    pub fn answer_weight(&self, k: usize, j: usize) -> f64 {
        self.weights[self.answer_index(k, j)]
    }

    pub fn set_content_weight(&mut self, k: usize, j: usize, v: f64) {
        let i = self.content_index(k, j);
        self.weights[i] = v;
    }

    pub fn set_answer_weight(&mut self, k: usize, j: usize, v: f64) {
        let i = self.answer_index(k, j);
        self.weights[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.feature_dim == other.feature_dim && self.vocab == other.vocab
    }

    pub fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn feature(x: &[f64], k: usize) -> f64 {
        if k == x.len() {
            1.0
        } else {
            x[k]
        }
    }

    pub fn content_logits(&self, x: &[f64]) -> [f64; N_CONTENT] {
        let mut z = [0.0; N_CONTENT];
        for k in 0..=self.feature_dim {
            let phi = Self::feature(x, k);
            let row = &self.weights[k * N_CONTENT..(k + 1) * N_CONTENT];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += phi * w;
            }
        }
        z
    }

    pub fn answer_logits(&self, x: &[f64]) -> [f64; N_ANSWER] {
        let mut z = [0.0; N_ANSWER];
        let off = self.answer_offset();
        for k in 0..=self.feature_dim {
            let phi = Self::feature(x, k);
            let row = &self.weights[off + k * N_ANSWER..off + (k + 1) * N_ANSWER];
            for (zj, w) in z.iter_mut().zip(row) {
                *zj += phi * w;
            }
        }
        z
    }

    pub fn slot_logprobs(&self, x: &[f64]) -> Result<SlotLogProbs> {
        self.check_features(x)?;
        let zc = self.content_logits(x);
        let za = self.answer_logits(x);
        if zc.iter().chain(za.iter()).any(|z| !z.is_finite()) {
            return Err(Error::Numeric("non-finite policy logits".into()));
        }
        Ok(SlotLogProbs {
            content: log_softmax(&zc),
            answer: log_softmax(&za),
        })
    }

    /// Adds `scale * d(logit_j)/d(weights)` for every content logit, given the
    /// per-logit coefficients `coef`.
    pub fn accumulate_content(&mut self, x: &[f64], coef: &[f64; N_CONTENT], scale: f64) {
        for k in 0..=self.feature_dim {
            let phi = Self::feature(x, k) * scale;
            for (j, c) in coef.iter().enumerate() {
                let i = self.content_index(k, j);
                self.weights[i] += phi * c;
            }
        }
    }

    pub fn accumulate_answer(&mut self, x: &[f64], coef: &[f64; N_ANSWER], scale: f64) {
        for k in 0..=self.feature_dim {
            let phi = Self::feature(x, k) * scale;
            for (j, c) in coef.iter().enumerate() {
                let i = self.answer_index(k, j);
                self.weights[i] += phi * c;
            }
        }
    }

    /// `self += scale * grad log pi(response | x)` where the distributions are `lp`.
    pub fn accumulate_logprob_grad(&mut self, x: &[f64], lp: &SlotLogProbs, r: &Response, scale: f64) {
        let pc = lp.content_probs();
        let mut coef = [0.0; N_CONTENT];
        for t in &r.content {
            for j in 0..N_CONTENT {
                coef[j] += f64::from(u8::from(t.index() == j)) - pc[j];
            }
        }
        self.accumulate_content(x, &coef, scale);
        self.accumulate_answer_token_grad(x, lp, r.answer, scale);
    }

    pub fn accumulate_content_token_grad(&mut self, x: &[f64], lp: &SlotLogProbs, t: ContentToken, scale: f64) {
        let pc = lp.content_probs();
        let coef: [f64; N_CONTENT] = std::array::from_fn(|j| f64::from(u8::from(t.index() == j)) - pc[j]);
        self.accumulate_content(x, &coef, scale);
    }

    pub fn accumulate_answer_token_grad(&mut self, x: &[f64], lp: &SlotLogProbs, a: AnswerToken, scale: f64) {
        let pa = lp.answer_probs();
        let ai = a.index();
        let coef: [f64; N_ANSWER] = std::array::from_fn(|j| f64::from(u8::from(ai == j)) - pa[j]);
        self.accumulate_answer(x, &coef, scale);
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
    }

    pub fn add_scaled(&mut self, other: &PolicyParams, s: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += s * b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

fn sample_index<R: rand::Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass; take the last token with mass
    logp.iter()
        .rposition(|l| *l > f64::NEG_INFINITY)
        .unwrap_or(logp.len() - 1)
}

pub fn sample_response<R: rand::Rng + ?Sized>(params: &PolicyParams, x: &[f64], rng: &mut R) -> Result<Response> {
    let lp = params.slot_logprobs(x)?;
    Ok(sample_from(&lp, params.content_length(), rng))
}

pub fn sample_from<R: rand::Rng + ?Sized>(lp: &SlotLogProbs, content_length: usize, rng: &mut R) -> Response {
    let mut content = Vec::with_capacity(content_length);
    let mut token_logprobs = Vec::with_capacity(content_length + 1);
    for _ in 0..content_length {
        let j = sample_index(&lp.content, rng);
        content.push(ContentToken::ALL[j]);
        token_logprobs.push(lp.content[j]);
    }
    let a = sample_index(&lp.answer, rng);
    token_logprobs.push(lp.answer[a]);
    Response {
        content,
        answer: AnswerToken::from_index(a).expect("answer index in range"),
        token_logprobs,
    }
}

/// Per-token log-probabilities of `r` under the current `params`.
pub fn logprob(params: &PolicyParams, x: &[f64], r: &Response) -> Result<Vec<f64>> {
    let lp = params.slot_logprobs(x)?;
    Ok(logprob_from(&lp, r))
}

pub fn logprob_from(lp: &SlotLogProbs, r: &Response) -> Vec<f64> {
    r.content
        .iter()
        .map(|t| lp.content[t.index()])
        .chain(std::iter::once(lp.answer[r.answer.index()]))
        .collect()
}

pub fn parse_probability(r: &Response) -> Option<f64> {
    match r.answer {
        AnswerToken::Prob(j) => Some(f64::from(j) / 100.0),
        AnswerToken::Abstain => None,
    }
}

pub fn categorical_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn categorical_entropy(logp: &[f64]) -> f64 {
    -logp
        .iter()
        .map(|lp| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>()
}

/// Frozen policy snapshot used as the KL anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceParams(Arc<PolicyParams>);

impl ReferenceParams {
    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot_reference(params: &PolicyParams) -> ReferenceParams {
    ReferenceParams(Arc::new(params.clone()))
}

/// Exact KL(pi_theta || pi_ref) over the content slots and the answer slot.
pub fn kl_divergence(params: &PolicyParams, reference: &ReferenceParams, x: &[f64]) -> Result<f64> {
    let p = params.slot_logprobs(x)?;
    let q = reference.params().slot_logprobs(x)?;
    Ok(kl_from(&p, &q, params.content_length()))
}

pub fn kl_from(p: &SlotLogProbs, q: &SlotLogProbs, content_length: usize) -> f64 {
    content_length as f64 * categorical_kl(&p.content, &q.content) + categorical_kl(&p.answer, &q.answer)
}

pub fn entropy(params: &PolicyParams, x: &[f64]) -> Result<f64> {
    let lp = params.slot_logprobs(x)?;
    Ok(entropy_from(&lp, params.content_length()))
}

pub fn entropy_from(lp: &SlotLogProbs, content_length: usize) -> f64 {
    content_length as f64 * categorical_entropy(&lp.content) + categorical_entropy(&lp.answer)
}

/// Probability that a content slot emits `token`.
pub fn content_probability(params: &PolicyParams, x: &[f64], token: ContentToken) -> Result<f64> {
    Ok(params.slot_logprobs(x)?.content[token.index()].exp())
}

const CHECKPOINT_FORMAT: &str = "brierlab-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    feature_dim: usize,
    vocabulary: Vocabulary,
    /// `(d+1)` rows of 3 content logits, bias row last.
    content_weights: Vec<Vec<f64>>,
    /// `(d+1)` rows of 102 answer logits, bias row last.
    answer_weights: Vec<Vec<f64>>,
}

impl PolicyParams {
    pub fn to_json(&self) -> Result<String> {
        let rows = self.feature_dim + 1;
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            feature_dim: self.feature_dim,
            vocabulary: self.vocab,
            content_weights: (0..rows)
                .map(|k| (0..N_CONTENT).map(|j| self.content_weight(k, j)).collect())
                .collect(),
            answer_weights: (0..rows)
                .map(|k| (0..N_ANSWER).map(|j| self.answer_weight(k, j)).collect())
                .collect(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let rows = ck.feature_dim + 1;
        let bad_shape = ck.content_weights.len() != rows
            || ck.answer_weights.len() != rows
            || ck.content_weights.iter().any(|r| r.len() != N_CONTENT)
            || ck.answer_weights.iter().any(|r| r.len() != N_ANSWER);
        if bad_shape {
            return Err(Error::InvalidArgument("checkpoint weight shape mismatch".into()));
        }
        let mut weights: Vec<f64> = ck.content_weights.into_iter().flatten().collect();
        weights.extend(ck.answer_weights.into_iter().flatten());
        let params = Self::from_weights(ck.feature_dim, ck.vocabulary, weights)?;
        if !params.is_finite() {
            return Err(Error::Numeric("non-finite checkpoint weights".into()));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_json()?.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::io::read_to_string(BufReader::new(File::open(path)?))?;
        Self::from_json(&s)
    }
}
