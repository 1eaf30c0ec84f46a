//! Accuracy, calibration and paired statistical comparisons.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::reward::soft_brier_loss;
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forecast {
    pub question_id: String,
    pub probability: Option<f64>,
}

impl Forecast {
    pub fn new(question_id: impl Into<String>, probability: Option<f64>) -> Self {
        Self {
            question_id: question_id.into(),
            probability,
        }
    }
}

/// Reads one forecast per line. Blank lines are skipped; anything else that
/// fails to parse, or a probability outside [0, 1], is reported with its line.
pub fn read_forecasts(path: &Path) -> Result<Vec<Forecast>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let f: Forecast = serde_json::from_str(&line).map_err(|e| parse_error(e.to_string()))?;
        if let Some(p) = f.probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(parse_error(format!("probability {p} outside [0, 1]")));
            }
        }
        out.push(f);
    }
    Ok(out)
}

pub fn write_forecasts(path: &Path, forecasts: &[Forecast]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for f in forecasts {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that `forecasts` cover exactly the dataset's questions, once each,
/// and returns them in dataset order.
pub fn align_to_dataset(forecasts: &[Forecast], dataset: &Dataset) -> Result<Vec<Forecast>> {
    let mut by_id: HashMap<&str, &Forecast> = HashMap::with_capacity(forecasts.len());
    for f in forecasts {
        if by_id.insert(f.question_id.as_str(), f).is_some() {
            return Err(Error::Alignment(format!("duplicate forecast for {}", f.question_id)));
        }
    }
    let missing: Vec<&str> = dataset
        .questions()
        .iter()
        .map(|q| q.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let known: HashSet<&str> = dataset.questions().iter().map(|q| q.id.as_str()).collect();
    let mut extra: Vec<&str> = by_id.keys().copied().filter(|id| !known.contains(id)).collect();
    extra.sort_unstable();
    if !missing.is_empty() || !extra.is_empty() {
        let list = |ids: &[&str]| {
            let shown: Vec<&str> = ids.iter().take(20).copied().collect();
            let more = ids.len().saturating_sub(shown.len());
            if more > 0 {
                format!("{} (+{more} more)", shown.join(", "))
            } else {
                shown.join(", ")
            }
        };
        let mut message = String::new();
        if !missing.is_empty() {
            message.push_str(&format!(
                "missing forecasts for {} question(s): {}",
                missing.len(),
                list(&missing)
            ));
        }
        if !extra.is_empty() {
            if !message.is_empty() {
                message.push_str("; ");
            }
            message.push_str(&format!("unknown question id(s): {}", list(&extra)));
        }
        return Err(Error::Alignment(message));
    }
    Ok(dataset
        .questions()
        .iter()
        .map(|q| by_id[q.id.as_str()].clone())
        .collect())
}

pub type Outcomes = HashMap<String, u8>;

pub fn outcomes(dataset: &Dataset) -> Outcomes {
    dataset.questions().iter().map(|q| (q.id.clone(), q.outcome)).collect()
}

fn lookup(outcomes: &Outcomes, id: &str) -> Result<u8> {
    outcomes
        .get(id)
        .copied()
        .ok_or_else(|| Error::Alignment(id.to_string()))
}

fn check_probability(f: &Forecast) -> Result<()> {
    match f.probability {
        Some(p) if !(0.0..=1.0).contains(&p) => Err(Error::Domain(p)),
        _ => Ok(()),
    }
}

/// Soft-Brier loss of each forecast, in input order.
pub fn soft_brier_losses(forecasts: &[Forecast], outcomes: &Outcomes) -> Result<Vec<f64>> {
    forecasts
        .iter()
        .map(|f| {
            check_probability(f)?;
            Ok(soft_brier_loss(f.probability, lookup(outcomes, &f.question_id)?))
        })
        .collect()
}

pub fn soft_brier(forecasts: &[Forecast], outcomes: &Outcomes) -> Result<f64> {
    if forecasts.is_empty() {
        return Err(Error::InvalidArgument("no forecasts to score".into()));
    }
    let losses = soft_brier_losses(forecasts, outcomes)?;
    Ok(mean(&losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub empirical_frequency: f64,
}

/// Sorted `(probability, outcome)` pairs of the forecasts carrying a probability.
fn scored_pairs(forecasts: &[Forecast], outcomes: &Outcomes) -> Result<Vec<(f64, u8)>> {
    let mut pairs = Vec::with_capacity(forecasts.len());
    for f in forecasts {
        check_probability(f)?;
        let y = lookup(outcomes, &f.question_id)?;
        if let Some(p) = f.probability {
            pairs.push((p, y));
        }
    }
    Ok(pairs)
}

/// Splits sorted pairs into `n_bins` contiguous runs whose sizes differ by at
/// most one, larger runs first.
pub fn bins_from_pairs(pairs: &mut [(f64, u8)], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if n_bins == 0 || pairs.len() < n_bins {
        return Err(Error::InvalidArgument(format!(
            "equal-mass ECE needs at least {n_bins} scored forecasts, got {}",
            pairs.len()
        )));
    }
    // ties in probability ordered by outcome so the bins do not depend on input order
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let base = pairs.len() / n_bins;
    let extra = pairs.len() % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for b in 0..n_bins {
        let size = base + usize::from(b < extra);
        let chunk = &pairs[start..start + size];
        start += size;
        let n = chunk.len() as f64;
        bins.push(CalibrationBin {
            lower: chunk[0].0,
            upper: chunk[chunk.len() - 1].0,
            count: chunk.len(),
            mean_confidence: chunk.iter().map(|c| c.0).sum::<f64>() / n,
            empirical_frequency: chunk.iter().map(|c| f64::from(c.1)).sum::<f64>() / n,
        });
    }
    Ok(bins)
}

pub fn ece_from_bins(bins: &[CalibrationBin]) -> f64 {
    let total: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .map(|b| b.count as f64 / total as f64 * (b.empirical_frequency - b.mean_confidence).abs())
        .sum()
}

/// Expected calibration error over equal-mass bins. Forecasts without a
/// probability are left out.
pub fn ece_equal_mass(forecasts: &[Forecast], outcomes: &Outcomes, n_bins: usize) -> Result<f64> {
    let mut pairs = scored_pairs(forecasts, outcomes)?;
    Ok(ece_from_bins(&bins_from_pairs(&mut pairs, n_bins)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub soft_brier_mean: f64,
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
    pub n_questions: usize,
    pub n_malformed: usize,
    /// Forecasts that entered the calibration bins (`n_questions - n_malformed`).
    pub n_binned: usize,
}

pub fn evaluate(forecasts: &[Forecast], outcomes: &Outcomes, n_bins: usize) -> Result<EvalReport> {
    let soft_brier_mean = soft_brier(forecasts, outcomes)?;
    let mut pairs = scored_pairs(forecasts, outcomes)?;
    let bins = bins_from_pairs(&mut pairs, n_bins)?;
    Ok(EvalReport {
        soft_brier_mean,
        ece: ece_from_bins(&bins),
        n_questions: forecasts.len(),
        n_malformed: forecasts.len() - pairs.len(),
        n_binned: pairs.len(),
        bins,
    })
}

/// Fraction of forecasts at or below 0.10 or at or above 0.90; forecasts
/// without a probability are ignored.
pub fn extreme_bucket_mass(probabilities: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = probabilities.iter().flatten().copied().collect();
    if present.is_empty() {
        return 0.0;
    }
    let extreme = present.iter().filter(|&&p| p <= 0.10 || p >= 0.90).count();
    extreme as f64 / present.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Wald,
    Bootstrap,
    Welch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub delta_mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
    pub method: Method,
    pub n: usize,
    pub df: Option<f64>,
    pub statistic: Option<f64>,
}

const Z_975: f64 = 1.959_963_984_540_054;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with `n - 1` denominator.
pub fn sample_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

pub fn two_sided_normal_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

fn two_sided_t_p(t: f64, df: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

fn t_quantile_975(df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("positive df").inverse_cdf(0.975)
}

/// Standard errors at the rounding floor of the mean count as zero.
fn is_degenerate(se: f64, mean: f64) -> bool {
    se <= 4.0 * f64::EPSILON * mean.abs()
}

/// p-value of a zero-variance test: the machine floor unless the mean is zero.
fn degenerate_p(mean: f64) -> f64 {
    if mean == 0.0 {
        1.0
    } else {
        f64::MIN_POSITIVE
    }
}

/// Wald test on per-question differences `loss(a) - loss(b)`.
pub fn paired_wald(diffs: &[f64]) -> Result<PairedComparison> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InvalidArgument("paired test needs at least 2 questions".into()));
    }
    let m = mean(diffs);
    let se = (sample_variance(diffs) / n as f64).sqrt();
    let (statistic, p_value) = if !is_degenerate(se, m) {
        let z = m / se;
        (Some(z), two_sided_normal_p(z).max(f64::MIN_POSITIVE))
    } else {
        (None, degenerate_p(m))
    };
    Ok(PairedComparison {
        delta_mean: m,
        ci_low: m - Z_975 * se,
        ci_high: m + Z_975 * se,
        p_value,
        method: Method::Wald,
        n,
        df: Some(n as f64 - 1.0),
        statistic,
    })
}

/// Paired Wald comparison of soft-Brier losses, `a - b`, over the same question set.
pub fn paired_brier_test(a: &[Forecast], b: &[Forecast], outcomes: &Outcomes) -> Result<PairedComparison> {
    let (a, b) = align_pair(a, b)?;
    let la = soft_brier_losses(&a, outcomes)?;
    let lb = soft_brier_losses(&b, outcomes)?;
    let diffs: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x - y).collect();
    paired_wald(&diffs)
}

/// Reorders `b` to follow `a`'s question order; the id sets must match.
pub fn align_pair(a: &[Forecast], b: &[Forecast]) -> Result<(Vec<Forecast>, Vec<Forecast>)> {
    let index: HashMap<&str, &Forecast> = b.iter().map(|f| (f.question_id.as_str(), f)).collect();
    if index.len() != b.len() || a.len() != b.len() {
        return Err(Error::InvalidArgument(
            "forecast sets differ in size or repeat ids".into(),
        ));
    }
    let mut out_b = Vec::with_capacity(a.len());
    let mut seen = HashSet::new();
    for f in a {
        if !seen.insert(f.question_id.as_str()) {
            return Err(Error::InvalidArgument(format!("repeated id {}", f.question_id)));
        }
        let other = index
            .get(f.question_id.as_str())
            .ok_or_else(|| Error::Alignment(f.question_id.clone()))?;
        out_b.push((*other).clone());
    }
    Ok((a.to_vec(), out_b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Total,
    Mean,
}

impl Statistic {
    fn apply(self, values: impl Iterator<Item = f64>) -> f64 {
        let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        match self {
            Statistic::Total => sum,
            Statistic::Mean => sum / n as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseBootstrap {
    pub first: usize,
    pub second: usize,
    /// Comparison of `stat(second) - stat(first)`.
    pub comparison: PairedComparison,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `reps` row resamples (with replacement) and evaluates `stat` on
/// each, one value per model. Replicate `r` uses its own derived stream, so
/// the output does not depend on the thread count.
pub fn bootstrap_replicates<F>(n_rows: usize, reps: usize, seed: u64, stat: F) -> Vec<Vec<f64>>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::indexed(seed, Stream::Bootstrap, r as u64);
            let idx: Vec<usize> = (0..n_rows)
                .map(|_| rand::Rng::random_range(&mut rng, 0..n_rows))
                .collect();
            stat(&idx)
        })
        .collect()
}

/// Pairwise percentile intervals and zero-centred two-sided p-values from
/// bootstrap replicates.
pub fn pairwise_from_replicates(observed: &[f64], replicates: &[Vec<f64>], n: usize) -> Vec<PairwiseBootstrap> {
    let reps = replicates.len();
    let mut out = Vec::new();
    for first in 0..observed.len() {
        for second in first + 1..observed.len() {
            let delta = observed[second] - observed[first];
            let mut diffs: Vec<f64> = replicates.iter().map(|r| r[second] - r[first]).collect();
            let centre = mean(&diffs);
            let extreme = diffs.iter().filter(|d| (*d - centre).abs() >= delta.abs()).count();
            diffs.sort_by(f64::total_cmp);
            let (lo, hi) = if reps > 0 {
                (quantile_sorted(&diffs, 0.025), quantile_sorted(&diffs, 0.975))
            } else {
                (delta, delta)
            };
            out.push(PairwiseBootstrap {
                first,
                second,
                comparison: PairedComparison {
                    delta_mean: delta,
                    ci_low: lo.min(delta),
                    ci_high: hi.max(delta),
                    p_value: (1 + extreme) as f64 / (reps + 1) as f64,
                    method: Method::Bootstrap,
                    n,
                    df: None,
                    statistic: None,
                },
            });
        }
    }
    out
}

/// Question-level paired bootstrap over a `questions x models` matrix.
pub fn paired_bootstrap(
    values: &[Vec<f64>],
    statistic: Statistic,
    reps: usize,
    seed: u64,
) -> Result<Vec<PairwiseBootstrap>> {
    let n_models = values.first().map_or(0, Vec::len);
    if values.iter().any(|row| row.len() != n_models) {
        return Err(Error::InvalidArgument("ragged bootstrap matrix".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one row".into()));
    }
    let column = |m: usize, rows: &mut dyn Iterator<Item = usize>| statistic.apply(rows.map(|i| values[i][m]));
    let observed: Vec<f64> = (0..n_models).map(|m| column(m, &mut (0..values.len()))).collect();
    let replicates = bootstrap_replicates(values.len(), reps, seed, |idx| {
        (0..n_models).map(|m| column(m, &mut idx.iter().copied())).collect()
    });
    Ok(pairwise_from_replicates(&observed, &replicates, values.len()))
}

/// Paired bootstrap of equal-mass ECE across models forecasting the same questions.
pub fn paired_bootstrap_ece(
    models: &[Vec<Forecast>],
    outcomes: &Outcomes,
    n_bins: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<PairwiseBootstrap>> {
    let Some(first) = models.first() else {
        return Err(Error::InvalidArgument("no models".into()));
    };
    let aligned: Vec<Vec<Forecast>> = models
        .iter()
        .map(|m| align_pair(first, m).map(|(_, b)| b))
        .collect::<Result<_>>()?;
    let ys: Vec<u8> = first
        .iter()
        .map(|f| lookup(outcomes, &f.question_id))
        .collect::<Result<_>>()?;
    let ece_of = |m: &[Forecast], rows: &mut dyn Iterator<Item = usize>| -> f64 {
        let mut pairs: Vec<(f64, u8)> = rows.filter_map(|i| m[i].probability.map(|p| (p, ys[i]))).collect();
        bins_from_pairs(&mut pairs, n_bins)
            .map(|b| ece_from_bins(&b))
            .unwrap_or(f64::NAN)
    };
    let observed: Vec<f64> = aligned.iter().map(|m| ece_of(m, &mut (0..ys.len()))).collect();
    if observed.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument(format!(
            "equal-mass ECE needs at least {n_bins} scored forecasts per model"
        )));
    }
    let replicates = bootstrap_replicates(ys.len(), reps, seed, |idx| {
        aligned.iter().map(|m| ece_of(m, &mut idx.iter().copied())).collect()
    });
    // drop replicates that left a model with too few scored forecasts
    let replicates: Vec<Vec<f64>> = replicates
        .into_iter()
        .filter(|r| r.iter().all(|v| !v.is_nan()))
        .collect();
    Ok(pairwise_from_replicates(&observed, &replicates, ys.len()))
}

/// Welch's unequal-variance t-test on `mean(x) - mean(y)`.
pub fn welch_test(x: &[f64], y: &[f64]) -> Result<PairedComparison> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument(
            "Welch test needs at least 2 values per sample".into(),
        ));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (sample_variance(x) / nx, sample_variance(y) / ny);
    if vx + vy <= 0.0 {
        return Err(Error::InvalidArgument("Welch test on two zero-variance samples".into()));
    }
    let delta = mean(x) - mean(y);
    let se = (vx + vy).sqrt();
    let t = delta / se;
    let df = (vx + vy).powi(2) / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
    let half = t_quantile_975(df) * se;
    Ok(PairedComparison {
        delta_mean: delta,
        ci_low: delta - half,
        ci_high: delta + half,
        p_value: two_sided_t_p(t, df),
        method: Method::Welch,
        n: x.len() + y.len(),
        df: Some(df),
        statistic: Some(t),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneSampleTest {
    pub mean: f64,
    pub t: Option<f64>,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided one-sample t-test of the mean against zero; `None` below two values.
pub fn one_sample_t_test(values: &[f64]) -> Option<OneSampleTest> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let m = mean(values);
    let se = (sample_variance(values) / n).sqrt();
    let df = n - 1.0;
    Some(if !is_degenerate(se, m) {
        let t = m / se;
        OneSampleTest {
            mean: m,
            t: Some(t),
            df,
            p_value: two_sided_t_p(t, df),
        }
    } else {
        OneSampleTest {
            mean: m,
            t: None,
            df,
            p_value: degenerate_p(m),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn fixture(pairs: &[(Option<f64>, u8)]) -> (Vec<Forecast>, Outcomes) {
        let f = pairs
            .iter()
            .enumerate()
            .map(|(i, (p, _))| Forecast::new(format!("q{i}"), *p))
            .collect();
        let o = pairs
            .iter()
            .enumerate()
            .map(|(i, (_, y))| (format!("q{i}"), *y))
            .collect();
        (f, o)
    }

    #[test]
    fn forecast_file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let f = vec![Forecast::new("a", Some(0.25)), Forecast::new("b", None)];
        write_forecasts(&path, &f).unwrap();
        assert_eq!(read_forecasts(&path).unwrap(), f);

        std::fs::write(&path, "{\"question_id\":\"a\",\"probability\":0.2}\n\nnot json\n").unwrap();
        match read_forecasts(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "{\"question_id\":\"a\",\"probability\":1.5}\n").unwrap();
        assert!(matches!(read_forecasts(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn alignment_lists_missing_ids() {
        use crate::data::{Question, Source, Split};
        let q = |id: &str, ts: i64| Question {
            id: id.into(),
            open_ts: 0,
            close_ts: ts + 1,
            resolve_ts: ts + 2,
            prediction_ts: ts,
            outcome: 1,
            features: vec![],
            market_price: None,
            volume: None,
            source: Source::Synthetic,
        };
        let ds = Dataset::new(vec![q("b", 2), q("a", 1), q("c", 3)], Split::Test).unwrap();
        let f = vec![
            Forecast::new("c", None),
            Forecast::new("a", Some(0.1)),
            Forecast::new("b", Some(0.2)),
        ];
        let aligned = align_to_dataset(&f, &ds).unwrap();
        let ids: Vec<&str> = aligned.iter().map(|f| f.question_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        match align_to_dataset(&f[..1], &ds) {
            Err(Error::Alignment(m)) => assert!(m.contains("a, b"), "{m}"),
            other => panic!("{other:?}"),
        }
        let mut dup = f.clone();
        dup.push(Forecast::new("a", None));
        assert!(align_to_dataset(&dup, &ds).is_err());
        let mut extra = f.clone();
        extra.push(Forecast::new("zz", None));
        assert!(matches!(align_to_dataset(&extra, &ds), Err(Error::Alignment(m)) if m.contains("zz")));
    }

    #[test]
    fn soft_brier_examples() {
        let (f, o) = fixture(&[(Some(1.0), 1), (Some(0.0), 0), (Some(1.0), 1)]);
        assert_eq!(soft_brier(&f, &o).unwrap(), 0.0);
        let (f, o) = fixture(&[(None, 1), (None, 0)]);
        assert_eq!(soft_brier(&f, &o).unwrap(), 0.25);
        let (f, o) = fixture(&[(Some(1.0), 1), (Some(0.0), 1), (Some(0.5), 0), (None, 1)]);
        assert_eq!(soft_brier(&f, &o).unwrap(), 0.375);
    }

    #[test]
    fn soft_brier_alignment_error() {
        let (f, _) = fixture(&[(Some(0.5), 1)]);
        assert!(matches!(soft_brier(&f, &Outcomes::new()), Err(Error::Alignment(_))));
    }

    #[test]
    fn ece_extremes() {
        // bins of 2 where each bin's probability equals its frequency
        let (f, o) = fixture(&[
            (Some(0.0), 0),
            (Some(0.0), 0),
            (Some(0.5), 0),
            (Some(0.5), 1),
            (Some(1.0), 1),
            (Some(1.0), 1),
        ]);
        assert_eq!(ece_equal_mass(&f, &o, 3).unwrap(), 0.0);
        let (f, o) = fixture(&vec![(Some(1.0), 0); 20]);
        assert_abs_diff_eq!(ece_equal_mass(&f, &o, 10).unwrap(), 1.0, epsilon = 1e-12);
        let (f, o) = fixture(&[(Some(0.3), 0); 5]);
        assert!(ece_equal_mass(&f, &o, 10).is_err());
    }

    #[test]
    fn ece_twenty_point_fixture_matches_brute_force() {
        let probs = [
            0.91, 0.05, 0.33, 0.47, 0.62, 0.12, 0.78, 0.55, 0.29, 0.84, 0.66, 0.18, 0.41, 0.97, 0.08, 0.52, 0.71, 0.36,
            0.24, 0.88,
        ];
        let ys = [1, 0, 0, 1, 1, 0, 1, 0, 0, 1, 0, 0, 1, 1, 0, 1, 1, 0, 1, 1];
        let pairs: Vec<(Option<f64>, u8)> = probs.iter().zip(ys).map(|(p, y)| (Some(*p), y)).collect();
        let (f, o) = fixture(&pairs);
        // brute force: sort, take consecutive pairs as the 10 bins
        let mut sorted: Vec<(f64, u8)> = probs.iter().copied().zip(ys).collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut expected = 0.0;
        for b in 0..10 {
            let chunk = &sorted[2 * b..2 * b + 2];
            let conf = (chunk[0].0 + chunk[1].0) / 2.0;
            let freq = f64::from(chunk[0].1 + chunk[1].1) / 2.0;
            expected += 0.1 * (freq - conf).abs();
        }
        assert_abs_diff_eq!(ece_equal_mass(&f, &o, 10).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn bins_are_equal_mass_larger_first() {
        let (f, o) = fixture(
            &(0..23)
                .map(|i| (Some(i as f64 / 23.0), (i % 2) as u8))
                .collect::<Vec<_>>(),
        );
        let report = evaluate(&f, &o, 10).unwrap();
        let counts: Vec<usize> = report.bins.iter().map(|b| b.count).collect();
        assert_eq!(counts, [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(counts.iter().sum::<usize>(), report.n_binned);
    }

    #[test]
    fn malformed_forecasts_count_in_brier_not_ece() {
        let mut pairs: Vec<(Option<f64>, u8)> = (0..10).map(|i| (Some(0.1 * i as f64), 1)).collect();
        pairs.push((None, 0));
        let (f, o) = fixture(&pairs);
        let r = evaluate(&f, &o, 10).unwrap();
        assert_eq!(r.n_questions, 11);
        assert_eq!(r.n_malformed, 1);
        assert_eq!(r.n_binned, 10);
    }

    #[test]
    fn extreme_bucket_examples() {
        assert_eq!(extreme_bucket_mass(&[Some(0.5); 4]), 0.0);
        assert_eq!(
            extreme_bucket_mass(&[Some(0.0), Some(1.0), Some(0.5), Some(0.95)]),
            0.75
        );
        assert_eq!(extreme_bucket_mass(&[Some(0.10); 3]), 1.0);
        assert_eq!(extreme_bucket_mass(&[Some(0.0), None, None]), 1.0);
    }

    #[test]
    fn wald_identity_and_degenerate() {
        let (a, o) = fixture(&[(Some(0.2), 1), (Some(0.7), 0), (Some(0.4), 1)]);
        let c = paired_brier_test(&a, &a, &o).unwrap();
        assert_eq!(c.delta_mean, 0.0);
        assert_eq!(c.p_value, 1.0);

        let diffs = vec![0.1; 100];
        let c = paired_wald(&diffs).unwrap();
        assert_abs_diff_eq!(c.delta_mean, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(c.ci_low, c.ci_high, epsilon = 1e-12);
        assert_eq!(c.p_value, f64::MIN_POSITIVE);
    }

    #[test]
    fn wald_matches_recomputation() {
        let diffs = [0.03, -0.01, 0.07, 0.02, -0.04, 0.05, 0.01, 0.0];
        let c = paired_wald(&diffs).unwrap();
        let n = 8.0;
        let m = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_abs_diff_eq!(c.delta_mean, m, epsilon = 1e-15);
        assert_abs_diff_eq!(c.ci_low, m - 1.959963984540054 * sd / n.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.ci_high, m + 1.959963984540054 * sd / n.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn paired_brier_mismatched_ids() {
        let (a, o) = fixture(&[(Some(0.2), 1), (Some(0.7), 0)]);
        let b = vec![Forecast::new("q0", Some(0.1)), Forecast::new("zz", Some(0.1))];
        assert!(paired_brier_test(&a, &b, &o).is_err());
    }

    #[test]
    fn bootstrap_identical_and_shifted_columns() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64).sin(), (i as f64).sin()]).collect();
        let r = paired_bootstrap(&rows, Statistic::Total, 999, 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].comparison.ci_low, 0.0);
        assert_eq!(r[0].comparison.ci_high, 0.0);
        assert_eq!(r[0].comparison.p_value, 1.0);

        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 * 0.1, i as f64 * 0.1 + 1.0]).collect();
        let r = paired_bootstrap(&rows, Statistic::Total, 999, 5).unwrap();
        let c = &r[0].comparison;
        assert_abs_diff_eq!(c.delta_mean, 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.ci_low, 30.0, epsilon = 1e-9);
        assert_abs_diff_eq!(c.ci_high, 30.0, epsilon = 1e-9);
        assert_eq!(c.p_value, 1.0 / 1000.0);
    }

    #[test]
    fn bootstrap_matches_independent_loop() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).cos(), (i as f64 * 1.3).sin(), i as f64 * 0.05])
            .collect();
        let reps = 200;
        let seed = 77;
        let got = paired_bootstrap(&rows, Statistic::Mean, reps, seed).unwrap();

        // independent reimplementation of the resampling loop
        let mut diffs01 = Vec::new();
        for r in 0..reps {
            let mut g = rng::indexed(seed, Stream::Bootstrap, r as u64);
            let mut s = [0.0; 3];
            for _ in 0..rows.len() {
                let i: usize = rand::Rng::random_range(&mut g, 0..rows.len());
                for m in 0..3 {
                    s[m] += rows[i][m];
                }
            }
            diffs01.push((s[1] - s[0]) / rows.len() as f64);
        }
        diffs01.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| {
            let h = (diffs01.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            diffs01[lo] + (h - lo as f64) * (diffs01[h.ceil() as usize] - diffs01[lo])
        };
        let c = &got[0].comparison;
        assert_eq!((got[0].first, got[0].second), (0, 1));
        assert_abs_diff_eq!(c.ci_low.min(q(0.025)), q(0.025), epsilon = 1e-12);
        assert_abs_diff_eq!(c.ci_high.max(q(0.975)), q(0.975), epsilon = 1e-12);
    }

    #[test]
    fn bootstrap_is_thread_count_independent() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let a = paired_bootstrap(&rows, Statistic::Total, 300, 1).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| paired_bootstrap(&rows, Statistic::Total, 300, 1).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn welch_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let c = welch_test(&x, &x).unwrap();
        assert_eq!(c.statistic, Some(0.0));
        assert_abs_diff_eq!(c.p_value, 1.0, epsilon = 1e-12);
        assert!(welch_test(&[1.0], &x).is_err());
        assert!(welch_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());

        let y = [2.5, 3.1, 4.8, 5.0, 6.2];
        let t1 = welch_test(&x, &y).unwrap().statistic.unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * 3.5).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * 3.5).collect();
        let t2 = welch_test(&xs, &ys).unwrap().statistic.unwrap();
        assert_abs_diff_eq!(t1, t2, epsilon = 1e-12);
    }

    #[test]
    fn one_sample_cases() {
        assert!(one_sample_t_test(&[0.3]).is_none());
        let t = one_sample_t_test(&[0.05, 0.05, 0.05]).unwrap();
        assert_eq!(t.p_value, f64::MIN_POSITIVE);
        let t = one_sample_t_test(&[-0.1, 0.1]).unwrap();
        assert_abs_diff_eq!(t.p_value, 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn ece_is_permutation_invariant(
            pairs in proptest::collection::vec((0u8..=100, 0u8..=1), 10..60), seed in 0u64..1000,
        ) {
            let fx: Vec<(Option<f64>, u8)> = pairs.iter().map(|(p, y)| (Some(f64::from(*p) / 100.0), *y)).collect();
            let (f, o) = fixture(&fx);
            let mut g = f.clone();
            use rand::seq::SliceRandom;
            g.shuffle(&mut rng::stream(seed, Stream::Ties));
            let a = ece_equal_mass(&f, &o, 10).unwrap();
            let b = ece_equal_mass(&g, &o, 10).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn constant_half_scores_quarter(ys in proptest::collection::vec(0u8..=1, 1..50)) {
            let fx: Vec<(Option<f64>, u8)> = ys.iter().map(|y| (Some(0.5), *y)).collect();
            let (f, o) = fixture(&fx);
            prop_assert_eq!(soft_brier(&f, &o).unwrap(), 0.25);
        }

        #[test]
        fn p_values_and_intervals_are_sane(
            d in proptest::collection::vec(-1.0f64..1.0, 2..40),
        ) {
            let c = paired_wald(&d).unwrap();
            prop_assert!((0.0..=1.0).contains(&c.p_value));
            prop_assert!(c.ci_low <= c.delta_mean && c.delta_mean <= c.ci_high);
        }
    }
}
