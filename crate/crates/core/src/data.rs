//! Questions, datasets, chronology checks and the synthetic event stream.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Market,
    Synthetic,
}

/// One binary event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Question {
    pub id: String,
    pub open_ts: i64,
    pub close_ts: i64,
    pub resolve_ts: i64,
    pub prediction_ts: i64,
    pub outcome: u8,
    pub features: Vec<f64>,
    #[serde(default)]
    pub market_price: Option<f64>,
    #[serde(default)]
    pub volume: Option<f64>,
    pub source: Source,
}

impl Question {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| {
            Err(Error::InvalidQuestion {
                id: self.id.clone(),
                message: message.to_string(),
            })
        };
        if self.id.is_empty() {
            return fail("empty id");
        }
        if !(self.open_ts <= self.prediction_ts
            && self.prediction_ts < self.close_ts
            && self.close_ts <= self.resolve_ts)
        {
            return fail("timestamps must satisfy open <= prediction < close <= resolve");
        }
        if self.outcome > 1 {
            return fail("outcome must be 0 or 1");
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return fail("non-finite feature");
        }
        if let Some(m) = self.market_price {
            if !(m > 0.0 && m < 1.0) {
                return fail("market_price must lie strictly inside (0, 1)");
            }
        }
        if let Some(v) = self.volume {
            if !(v >= 0.0) {
                return fail("volume must be nonnegative");
            }
        }
        Ok(())
    }

    /// Priced with non-zero (or unreported) volume.
    pub fn is_tradeable(&self) -> bool {
        self.market_price.is_some() && self.volume.is_none_or(|v| v > 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Questions sorted by prediction time (ties broken by id) with unique ids and
/// a shared feature dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    questions: Vec<Question>,
    pub split: Split,
}

impl Dataset {
    pub fn new(mut questions: Vec<Question>, split: Split) -> Result<Self> {
        let mut seen = HashSet::with_capacity(questions.len());
        let dim = questions.first().map(|q| q.features.len());
        for q in &questions {
            q.validate()?;
            if Some(q.features.len()) != dim {
                return Err(Error::InvalidQuestion {
                    id: q.id.clone(),
                    message: format!(
                        "feature dimension {} differs from dataset dimension {}",
                        q.features.len(),
                        dim.unwrap_or(0)
                    ),
                });
            }
            if !seen.insert(q.id.as_str()) {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        questions.sort_by(|a, b| a.prediction_ts.cmp(&b.prediction_ts).then_with(|| a.id.cmp(&b.id)));
        Ok(Self { questions, split })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn into_questions(self) -> Vec<Question> {
        self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.questions.first().map(|q| q.features.len())
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Jsonl,
    Csv,
}

impl Format {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

/// CSV row; `features` is a `;`-separated list.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    open_ts: i64,
    close_ts: i64,
    resolve_ts: i64,
    prediction_ts: i64,
    outcome: u8,
    features: String,
    market_price: Option<f64>,
    volume: Option<f64>,
    source: Source,
}

pub fn load_questions(path: &Path, format: Format) -> Result<Dataset> {
    let questions = match format {
        Format::Jsonl => read_jsonl(path)?,
        Format::Csv => read_csv(path)?,
    };
    Dataset::new(questions, Split::Train)
}

fn read_jsonl(path: &Path) -> Result<Vec<Question>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Question = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

fn read_csv(path: &Path) -> Result<Vec<Question>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 1, e))?;
    let mut out = Vec::new();
    for (idx, row) in reader.deserialize::<CsvRow>().enumerate() {
        // header is line 1
        let line = idx + 2;
        let row = row.map_err(|e| csv_error(path, line, e))?;
        let features = if row.features.trim().is_empty() {
            Vec::new()
        } else {
            row.features
                .split(';')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("features: {e}"),
                })?
        };
        out.push(Question {
            id: row.id,
            open_ts: row.open_ts,
            close_ts: row.close_ts,
            resolve_ts: row.resolve_ts,
            prediction_ts: row.prediction_ts,
            outcome: row.outcome,
            features,
            market_price: row.market_price,
            volume: row.volume,
            source: row.source,
        });
    }
    Ok(out)
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(line);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    }
}

pub fn write_questions(path: &Path, dataset: &Dataset, format: Format) -> Result<()> {
    match format {
        Format::Jsonl => {
            let mut w = BufWriter::new(File::create(path)?);
            for q in dataset.questions() {
                serde_json::to_writer(&mut w, q)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
            for q in dataset.questions() {
                let features = q.features.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
                w.serialize(CsvRow {
                    id: q.id.clone(),
                    open_ts: q.open_ts,
                    close_ts: q.close_ts,
                    resolve_ts: q.resolve_ts,
                    prediction_ts: q.prediction_ts,
                    outcome: q.outcome,
                    features,
                    market_price: q.market_price,
                    volume: q.volume,
                    source: q.source,
                })
                .map_err(|e| csv_error(path, 0, e))?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Draws a prediction time uniformly from `[open_ts, close_ts)` and stores it.
pub fn draw_prediction_timestamp<R: rand::Rng + ?Sized>(q: &mut Question, rng: &mut R) -> Result<i64> {
    if q.open_ts >= q.close_ts {
        return Err(Error::DegenerateWindow {
            open: q.open_ts,
            close: q.close_ts,
        });
    }
    let ts = rng.random_range(q.open_ts..q.close_ts);
    q.prediction_ts = ts;
    Ok(ts)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChronologyViolation {
    pub train_id: String,
    pub train_resolve_ts: i64,
    pub test_id: String,
    pub test_prediction_ts: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChronologyReport {
    pub passed: bool,
    pub max_train_resolve_ts: Option<i64>,
    pub min_test_prediction_ts: Option<i64>,
    /// Every (train, test) pair where the train outcome is not yet known at the
    /// test prediction time, ordered by train id then test id.
    pub violations: Vec<ChronologyViolation>,
}

impl ChronologyReport {
    pub fn violating_train_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.violations.iter().map(|v| v.train_id.as_str()).collect();
        ids.dedup();
        ids
    }
}

/// Checks that every training outcome resolves before the earliest test prediction.
pub fn validate_chronology(train: &Dataset, test: &Dataset) -> ChronologyReport {
    let max_train_resolve_ts = train.questions().iter().map(|q| q.resolve_ts).max();
    let min_test_prediction_ts = test.questions().iter().map(|q| q.prediction_ts).min();

    // test is sorted by prediction_ts, so each train question's violations are a prefix
    let mut violations = Vec::new();
    for tq in train.questions() {
        let end = test.questions().partition_point(|q| q.prediction_ts <= tq.resolve_ts);
        for sq in &test.questions()[..end] {
            violations.push(ChronologyViolation {
                train_id: tq.id.clone(),
                train_resolve_ts: tq.resolve_ts,
                test_id: sq.id.clone(),
                test_prediction_ts: sq.prediction_ts,
            });
        }
    }
    violations.sort_by(|a, b| a.train_id.cmp(&b.train_id).then_with(|| a.test_id.cmp(&b.test_id)));
    ChronologyReport {
        passed: violations.is_empty(),
        max_train_resolve_ts,
        min_test_prediction_ts,
        violations,
    }
}

/// Splits a chronologically ordered dataset: the first `1 - test_fraction`
/// questions train, the rest test. Leading test questions predicted before the
/// last training resolution are dropped so the split always validates.
pub fn split_chronological(dataset: Dataset, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} outside [0, 1]"
        )));
    }
    let n = dataset.len();
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut questions = dataset.into_questions();
    let test: Vec<Question> = questions.split_off(n - n_test);
    let max_resolve = questions.iter().map(|q| q.resolve_ts).max();
    let test = test
        .into_iter()
        .filter(|q| max_resolve.is_none_or(|r| q.prediction_ts > r))
        .collect();
    Ok((Dataset::new(questions, Split::Train)?, Dataset::new(test, Split::Test)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_questions: usize,
    pub feature_dim: usize,
    /// Initial latent weights; drawn as N(0, latent_scale^2) per component when absent.
    pub latent_weights: Option<Vec<f64>>,
    pub latent_scale: f64,
    /// Random-walk step scale applied to the latent weights between questions.
    pub temporal_drift: f64,
    pub seed: u64,
    pub start_ts: i64,
    pub spacing_secs: i64,
    /// When set, each question gets a market quote `logistic(logit(p*) + noise)`
    /// rounded to the cent grid in [0.01, 0.99].
    pub market_noise: Option<f64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_questions: 20_000,
            feature_dim: 4,
            latent_weights: None,
            latent_scale: 1.0,
            temporal_drift: 0.0,
            seed: 0,
            start_ts: 1_700_000_000,
            spacing_secs: 3_600,
            market_noise: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::InvalidArgument("feature_dim must be >= 1".into()));
        }
        if let Some(w) = &self.latent_weights {
            if w.len() != self.feature_dim {
                return Err(Error::Dimension {
                    expected: self.feature_dim,
                    actual: w.len(),
                });
            }
        }
        if !(self.temporal_drift >= 0.0) || !(self.latent_scale >= 0.0) {
            return Err(Error::InvalidArgument(
                "temporal_drift and latent_scale must be nonnegative".into(),
            ));
        }
        if self.spacing_secs < 1 {
            return Err(Error::InvalidArgument("spacing_secs must be >= 1".into()));
        }
        if self.market_noise.is_some_and(|s| !(s >= 0.0)) {
            return Err(Error::InvalidArgument("market_noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Latent probability of a synthetic question. Kept out of the question
/// records so training code cannot see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub id: String,
    pub p_star: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub dataset: Dataset,
    pub oracle: Vec<OracleRecord>,
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn generate_synthetic_stream(cfg: &SyntheticConfig) -> Result<SyntheticStream> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, Stream::Data);
    let d = cfg.feature_dim;
    let mut w: Vec<f64> = match &cfg.latent_weights {
        Some(w) => w.clone(),
        None => (0..d)
            .map(|_| cfg.latent_scale * rng.sample::<f64, _>(StandardNormal))
            .collect(),
    };
    let width = cfg.n_questions.max(1).to_string().len();
    let mut questions = Vec::with_capacity(cfg.n_questions);
    let mut oracle = Vec::with_capacity(cfg.n_questions);
    for i in 0..cfg.n_questions {
        if i > 0 && cfg.temporal_drift > 0.0 {
            for wk in &mut w {
                *wk += cfg.temporal_drift * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let features: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let z: f64 = w.iter().zip(&features).map(|(a, b)| a * b).sum();
        let p_star = logistic(z);
        let outcome = u8::from(rng.random::<f64>() < p_star);
        let open_ts = cfg.start_ts + i as i64 * cfg.spacing_secs;
        let close_ts = open_ts + cfg.spacing_secs;
        let market_price = cfg.market_noise.map(|s| {
            let noisy = logistic(z + s * rng.sample::<f64, _>(StandardNormal));
            ((noisy * 100.0).round() / 100.0).clamp(0.01, 0.99)
        });
        let mut q = Question {
            id: format!("syn-{i:0width$}"),
            open_ts,
            close_ts,
            resolve_ts: close_ts,
            prediction_ts: open_ts,
            outcome,
            features,
            market_price,
            volume: None,
            source: Source::Synthetic,
        };
        draw_prediction_timestamp(&mut q, &mut rng)?;
        oracle.push(OracleRecord {
            id: q.id.clone(),
            p_star,
        });
        questions.push(q);
    }
    Ok(SyntheticStream {
        dataset: Dataset::new(questions, Split::Train)?,
        oracle,
    })
}

pub fn write_oracle(path: &Path, records: &[OracleRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_oracle(path: &Path) -> Result<Vec<OracleRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
