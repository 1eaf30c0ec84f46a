//! Subcommand implementations. Every output file is registered in the manifest.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use brierlab::data::{
    generate_synthetic_stream, load_questions, split_chronological, validate_chronology, write_oracle, write_questions,
    Dataset, Format, Question, Split,
};
use brierlab::evaluation::{
    align_to_dataset, ece_equal_mass, evaluate, extreme_bucket_mass, outcomes, paired_bootstrap, paired_bootstrap_ece,
    paired_brier_test, read_forecasts, write_forecasts, EvalReport, Forecast, Statistic,
};
use brierlab::policy::PolicyParams;
use brierlab::rng::{self, Stream};
use brierlab::trading::{
    all_trades, apply_rule, confidence_band_edges, mean_per_trade, BandEdge, GatingRule, MeanPerTrade, StrategyResult,
    DEFAULT_BANDS,
};
use brierlab::trainer::{
    ensemble_predict_dataset, predict_dataset, train_online_from, CheckpointView, EnsembleSpec, RunStatus,
};

use crate::config::{ensure_parent, require_file, EceSource, RunConfig};
use crate::manifest::ExperimentManifest;
use crate::{Outcome, ValidationError};

/// Effective configuration plus the hashes the manifest records.
pub struct RunContext {
    pub config: RunConfig,
    pub source_sha256: String,
    pub effective_sha256: String,
}

impl RunContext {
    fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn finish_stage(&self, stage: &str, files: &[PathBuf], started: Instant) -> Result<()> {
        let mut m = ExperimentManifest::load_or_new(self.out(), &self.source_sha256)?;
        m.record_stage(
            self.out(),
            stage,
            &self.effective_sha256,
            files,
            started.elapsed().as_secs_f64(),
        )?;
        m.save(self.out())
    }

    fn checkpoint_dir(&self, seed: u64) -> PathBuf {
        self.out().join("checkpoints").join(format!("seed-{seed}"))
    }

    fn forecast_dir(&self) -> PathBuf {
        self.out().join("forecasts")
    }
}

fn format_of(path: &Path) -> Format {
    Format::from_path(path).unwrap_or(Format::Jsonl)
}

fn load_dataset(path: &Path, what: &str, split: Split) -> Result<Dataset> {
    require_file(path, what)?;
    let ds = load_questions(path, format_of(path)).with_context(|| format!("loading {what} {}", path.display()))?;
    Ok(Dataset::new(ds.into_questions(), split)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T, files: &mut Vec<PathBuf>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    files.push(path.to_path_buf());
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R], files: &mut Vec<PathBuf>) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    files.push(path.to_path_buf());
    Ok(())
}

pub fn cmd_synth(ctx: &RunContext) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let Some(oracle_path) = cfg.data.oracle.as_ref() else {
        bail!(ValidationError(
            "synth needs data.oracle for the latent-probability sidecar".into()
        ));
    };
    let stream = generate_synthetic_stream(&cfg.synthetic_config())?;
    let (train, test) = split_chronological(stream.dataset, cfg.synthetic.test_fraction)?;
    let kept: HashSet<&str> = train
        .questions()
        .iter()
        .chain(test.questions())
        .map(|q| q.id.as_str())
        .collect();
    let oracle: Vec<_> = stream
        .oracle
        .iter()
        .filter(|o| kept.contains(o.id.as_str()))
        .cloned()
        .collect();
    let mut files = Vec::new();
    for (path, ds) in [(&cfg.data.train, &train), (&cfg.data.test, &test)] {
        ensure_parent(path)?;
        write_questions(path, ds, format_of(path))?;
        files.push(path.clone());
    }
    ensure_parent(oracle_path)?;
    write_oracle(oracle_path, &oracle)?;
    files.push(oracle_path.clone());
    ctx.finish_stage("synth", &files, started)?;
    eprintln!("synth: {} train / {} test questions", train.len(), test.len());
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct MemberStatus<'a> {
    seed: u64,
    questions_trained: usize,
    status: &'a RunStatus,
}

fn write_checkpoint(
    dir: &Path,
    params: &PolicyParams,
    baseline: Option<&brierlab::algorithms::BaselineParams>,
    log: &brierlab::trainer::RunLog,
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let policy = dir.join("policy.json");
    params.save(&policy)?;
    files.push(policy);
    if let Some(b) = baseline {
        write_json(&dir.join("baseline.json"), b, files)?;
    }
    let runlog = dir.join("runlog.jsonl");
    log.write_jsonl(&runlog)?;
    files.push(runlog);
    Ok(())
}

pub fn cmd_train(ctx: &RunContext) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let train = load_dataset(&cfg.data.train, "training data", Split::Train)?;
    let test = load_dataset(&cfg.data.test, "test data", Split::Test)?;
    let report = validate_chronology(&train, &test);
    if !report.passed {
        bail!(ValidationError(format!(
            "chronology check failed: {} training question(s) resolve at or after the first test prediction\n{}",
            report.violations.len(),
            serde_json::to_string_pretty(&report)?
        )));
    }
    let hp = cfg.hyper();
    let dim = train.feature_dim().or(test.feature_dim()).unwrap_or(0);

    let results: Vec<Result<(Vec<PathBuf>, RunStatus)>> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|k| {
            let seed = cfg.member_seed(k);
            let dir = ctx.checkpoint_dir(seed);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
            }
            let mut files = Vec::new();
            let tcfg = brierlab::trainer::TrainConfig { seed, ..cfg.train };
            let mut hook = |v: &CheckpointView<'_>| -> brierlab::Result<()> {
                write_checkpoint(
                    &dir.join(format!("q-{}", v.questions_done)),
                    v.params,
                    v.baseline,
                    v.log,
                    &mut files,
                )
                .map_err(|e| brierlab::Error::Io(std::io::Error::other(format!("{e:#}"))))
            };
            let init = PolicyParams::zeros(dim, tcfg.vocab());
            let out = train_online_from(&train, init, &tcfg, &hp, &cfg.penalties, &mut hook)?;
            let final_dir = dir.join("final");
            write_checkpoint(&final_dir, &out.params, out.baseline.as_ref(), &out.log, &mut files)?;
            write_json(&final_dir.join("config.json"), cfg, &mut files)?;
            write_json(
                &final_dir.join("status.json"),
                &MemberStatus {
                    seed,
                    questions_trained: out.log.len(),
                    status: &out.status,
                },
                &mut files,
            )?;
            Ok((files, out.status))
        })
        .collect();

    let mut files = Vec::new();
    let mut outcome = Outcome::Success;
    for (k, r) in results.into_iter().enumerate() {
        let (member_files, status) = r?;
        files.extend(member_files);
        let seed = cfg.member_seed(k);
        match status {
            RunStatus::Completed => eprintln!("train: seed {seed} completed"),
            RunStatus::EarlyStopped { at_index } => {
                eprintln!("train: seed {seed} early-stopped at question {at_index}");
                outcome = outcome.max(Outcome::EarlyStop);
            }
            RunStatus::NumericAbort { at_index, message } => {
                eprintln!("train: seed {seed} aborted at question {at_index}: {message}");
                outcome = outcome.max(Outcome::NumericAbort);
            }
        }
    }
    ctx.finish_stage("train", &files, started)?;
    Ok(outcome)
}

fn load_member(ctx: &RunContext, k: usize) -> Result<PolicyParams> {
    let path = ctx.checkpoint_dir(ctx.config.member_seed(k)).join("final/policy.json");
    require_file(&path, "checkpoint")?;
    Ok(PolicyParams::load(&path)?)
}

pub fn cmd_predict(ctx: &RunContext) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let test = load_dataset(&cfg.data.test, "test data", Split::Test)?;
    let members = (0..cfg.ensemble_size)
        .map(|k| load_member(ctx, k))
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    for (k, params) in members.iter().enumerate() {
        let path = ctx.forecast_dir().join(format!("seed-{}.jsonl", cfg.member_seed(k)));
        ensure_parent(&path)?;
        write_forecasts(&path, &predict_dataset(params, &test)?)?;
        files.push(path);
    }
    let spec = EnsembleSpec::new(members)?;
    let path = ctx.forecast_dir().join("ensemble.jsonl");
    write_forecasts(&path, &ensemble_predict_dataset(&spec, &test)?)?;
    files.push(path);
    ctx.finish_stage("predict", &files, started)?;
    Ok(Outcome::Success)
}

/// Forecast files given on the command line, or every `*.jsonl` under the
/// forecast directory in name order.
fn forecast_inputs(ctx: &RunContext, given: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.to_vec());
    }
    let dir = ctx.forecast_dir();
    let mut found: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect(),
        Err(_) => Vec::new(),
    };
    found.sort();
    if found.is_empty() {
        bail!(ValidationError(format!(
            "no forecast files given and none found in {}",
            dir.display()
        )));
    }
    Ok(found)
}

/// Unique model names from file stems (`name`, `name-2`, ...).
fn model_names(paths: &[PathBuf]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            let n = seen.entry(stem.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}-{n}")
            }
        })
        .collect()
}

struct Model {
    name: String,
    forecasts: Vec<Forecast>,
}

fn load_models(paths: &[PathBuf], test: &Dataset) -> Result<Vec<Model>> {
    model_names(paths)
        .into_iter()
        .zip(paths)
        .map(|(name, path)| {
            require_file(path, "forecast file")?;
            let raw = read_forecasts(path).map_err(|e| ValidationError(e.to_string()))?;
            let forecasts =
                align_to_dataset(&raw, test).map_err(|e| ValidationError(format!("{}: {e}", path.display())))?;
            Ok(Model { name, forecasts })
        })
        .collect()
}

#[derive(Serialize)]
struct ModelReport<'a> {
    model: &'a str,
    extreme_bucket_mass: f64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    soft_brier: f64,
    ece: f64,
    n_questions: usize,
    n_malformed: usize,
    extreme_bucket_mass: f64,
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    lower: f64,
    upper: f64,
    count: usize,
    mean_confidence: f64,
    empirical_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ComparisonRow {
    pub model_a: String,
    pub model_b: String,
    /// soft-Brier(b) - soft-Brier(a), paired Wald.
    pub delta_soft_brier: f64,
    pub brier_ci_low: f64,
    pub brier_ci_high: f64,
    pub brier_p: f64,
    /// ECE(b) - ECE(a), paired bootstrap.
    pub delta_ece: f64,
    pub ece_ci_low: f64,
    pub ece_ci_high: f64,
    pub ece_p: f64,
}

pub fn cmd_evaluate(ctx: &RunContext, given: &[PathBuf]) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let test = load_dataset(&cfg.data.test, "test data", Split::Test)?;
    let o = outcomes(&test);
    let models = load_models(&forecast_inputs(ctx, given)?, &test)?;
    let dir = ctx.out().join("evaluation");
    let n_bins = cfg.evaluation.n_bins;
    let mut files = Vec::new();
    let mut summary = Vec::new();
    for m in &models {
        let report = evaluate(&m.forecasts, &o, n_bins).map_err(|e| ValidationError(format!("{}: {e}", m.name)))?;
        let probs: Vec<Option<f64>> = m.forecasts.iter().map(|f| f.probability).collect();
        let extreme = extreme_bucket_mass(&probs);
        write_json(
            &dir.join(format!("{}.json", m.name)),
            &ModelReport {
                model: &m.name,
                extreme_bucket_mass: extreme,
                report: &report,
            },
            &mut files,
        )?;
        let bins: Vec<BinRow> = report
            .bins
            .iter()
            .enumerate()
            .map(|(i, b)| BinRow {
                bin: i,
                lower: b.lower,
                upper: b.upper,
                count: b.count,
                mean_confidence: b.mean_confidence,
                empirical_frequency: b.empirical_frequency,
            })
            .collect();
        write_csv(&dir.join(format!("{}_bins.csv", m.name)), &bins, &mut files)?;
        summary.push((report, extreme));
    }
    let rows: Vec<SummaryRow> = models
        .iter()
        .zip(&summary)
        .map(|(m, (r, extreme))| SummaryRow {
            model: &m.name,
            soft_brier: r.soft_brier_mean,
            ece: r.ece,
            n_questions: r.n_questions,
            n_malformed: r.n_malformed,
            extreme_bucket_mass: *extreme,
        })
        .collect();
    write_csv(&dir.join("summary.csv"), &rows, &mut files)?;

    let all: Vec<Vec<Forecast>> = models.iter().map(|m| m.forecasts.clone()).collect();
    let ece_pairs = if models.len() > 1 {
        paired_bootstrap_ece(&all, &o, n_bins, cfg.evaluation.bootstrap_reps, cfg.seed)?
    } else {
        Vec::new()
    };
    let mut comparison = Vec::new();
    for pair in &ece_pairs {
        let (a, b) = (&models[pair.first], &models[pair.second]);
        let brier = paired_brier_test(&b.forecasts, &a.forecasts, &o)?;
        comparison.push(ComparisonRow {
            model_a: a.name.clone(),
            model_b: b.name.clone(),
            delta_soft_brier: brier.delta_mean,
            brier_ci_low: brier.ci_low,
            brier_ci_high: brier.ci_high,
            brier_p: brier.p_value,
            delta_ece: pair.comparison.delta_mean,
            ece_ci_low: pair.comparison.ci_low,
            ece_ci_high: pair.comparison.ci_high,
            ece_p: pair.comparison.p_value,
        });
    }
    write_csv(&dir.join("comparison.csv"), &comparison, &mut files)?;
    write_json(&dir.join("comparison.json"), &comparison, &mut files)?;
    ctx.finish_stage("evaluate", &files, started)?;
    for r in &rows {
        eprintln!(
            "evaluate: {:<16} soft-Brier {:.4}  ECE {:.4}",
            r.model, r.soft_brier, r.ece
        );
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct RuleReport<'a> {
    model: &'a str,
    rule: &'static str,
    ece_used: f64,
    ece_source: EceSource,
    mean_per_trade: Option<MeanPerTrade>,
    bands: Vec<BandEdge>,
    result: &'a StrategyResult,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    rank: usize,
    question_id: &'a str,
    side: brierlab::trading::Side,
    market_price: f64,
    entry_cost: f64,
    expected_edge: f64,
    profit: f64,
    cumulative_profit: f64,
}

#[derive(Serialize)]
struct TradeSummaryRow<'a> {
    model: &'a str,
    rule: &'static str,
    n_trades: usize,
    total_profit: f64,
    mean_per_trade: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TradeComparisonRow {
    pub rule: String,
    pub model_a: String,
    pub model_b: String,
    /// total(b) - total(a).
    pub delta_total: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_value: f64,
}

#[derive(Serialize)]
struct EmptyStatus {
    status: &'static str,
    reason: &'static str,
}

fn rule_names() -> [&'static str; 3] {
    ["edge_above_ece", "edge_above_zero", "all_markets"]
}

pub fn cmd_trade(ctx: &RunContext, given: &[PathBuf]) -> Result<Outcome> {
    let started = Instant::now();
    let cfg = &ctx.config;
    let test = load_dataset(&cfg.data.test, "test data", Split::Test)?;
    let models = load_models(&forecast_inputs(ctx, given)?, &test)?;
    let dir = ctx.out().join("trading");
    let mut files = Vec::new();

    let priced: Vec<Question> = test.questions().iter().filter(|q| q.is_tradeable()).cloned().collect();
    let (calibration, trading): (Vec<Question>, Vec<Question>) = match cfg.trading.ece_source {
        EceSource::InSample => (priced.clone(), priced),
        EceSource::CalibrationSplit => {
            let n_cal = ((priced.len() as f64) * cfg.trading.calibration_fraction).round() as usize;
            let mut rest = priced;
            let trade = rest.split_off(n_cal.min(rest.len()));
            (rest, trade)
        }
    };
    if trading.is_empty() {
        write_json(
            &dir.join("status.json"),
            &EmptyStatus {
                status: "empty",
                reason: "no priced questions available for trading",
            },
            &mut files,
        )?;
        ctx.finish_stage("trade", &files, started)?;
        eprintln!("trade: no priced questions; nothing to trade");
        return Ok(Outcome::Success);
    }
    let calibration = Dataset::new(calibration, Split::Test)?;
    let trading = Dataset::new(trading, Split::Test)?;
    let cal_outcomes = outcomes(&calibration);

    let mut summary = Vec::new();
    // per rule, a questions x models matrix of realised profit (0 when not traded)
    let mut profit_matrix: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; models.len()]; trading.len()]; 3];
    let row_of: HashMap<&str, usize> = trading
        .questions()
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id.as_str(), i))
        .collect();
    for (mi, m) in models.iter().enumerate() {
        let cal_forecasts: Vec<Forecast> = m
            .forecasts
            .iter()
            .filter(|f| cal_outcomes.contains_key(&f.question_id))
            .cloned()
            .collect();
        let ece = ece_equal_mass(&cal_forecasts, &cal_outcomes, cfg.evaluation.n_bins)
            .map_err(|e| ValidationError(format!("{}: gating ECE: {e}", m.name)))?;
        // the same tie stream for every model keeps identical forecasts identical
        let mut ties = rng::stream(cfg.seed, Stream::Ties);
        let trades = all_trades(&m.forecasts, &trading, &mut ties)?;
        let rules = [
            GatingRule::EdgeAboveEce { ece },
            GatingRule::EdgeAboveZero,
            GatingRule::AllMarkets,
        ];
        for (ri, rule) in rules.into_iter().enumerate() {
            let result = apply_rule(&trades, rule)?;
            let mpt = mean_per_trade(&result).ok();
            for t in &result.trades {
                profit_matrix[ri][row_of[t.question_id.as_str()]][mi] = t.profit;
            }
            let base = dir.join(&m.name);
            write_json(
                &base.join(format!("{}.json", rule.name())),
                &RuleReport {
                    model: &m.name,
                    rule: rule.name(),
                    ece_used: ece,
                    ece_source: cfg.trading.ece_source,
                    mean_per_trade: mpt,
                    bands: confidence_band_edges(&result.trades, &DEFAULT_BANDS),
                    result: &result,
                },
                &mut files,
            )?;
            let curve: Vec<CurveRow> = result
                .trades
                .iter()
                .zip(&result.cumulative_profit)
                .enumerate()
                .map(|(i, (t, c))| CurveRow {
                    rank: i + 1,
                    question_id: &t.question_id,
                    side: t.side,
                    market_price: t.market_price,
                    entry_cost: t.entry_cost,
                    expected_edge: t.expected_edge,
                    profit: t.profit,
                    cumulative_profit: *c,
                })
                .collect();
            write_csv(&base.join(format!("{}_curve.csv", rule.name())), &curve, &mut files)?;
            summary.push(TradeSummaryRow {
                model: &m.name,
                rule: rule.name(),
                n_trades: result.n_trades,
                total_profit: result.total_profit,
                mean_per_trade: mpt.map(|x| x.mean),
                ci_low: mpt.map(|x| x.ci_low),
                ci_high: mpt.map(|x| x.ci_high),
            });
        }
    }
    write_csv(&dir.join("summary.csv"), &summary, &mut files)?;

    let mut comparison = Vec::new();
    if models.len() > 1 {
        for (ri, rule) in rule_names().into_iter().enumerate() {
            let pairs = paired_bootstrap(
                &profit_matrix[ri],
                Statistic::Total,
                cfg.trading.bootstrap_reps,
                cfg.seed,
            )?;
            for p in pairs {
                comparison.push(TradeComparisonRow {
                    rule: rule.to_string(),
                    model_a: models[p.first].name.clone(),
                    model_b: models[p.second].name.clone(),
                    delta_total: p.comparison.delta_mean,
                    ci_low: p.comparison.ci_low,
                    ci_high: p.comparison.ci_high,
                    p_value: p.comparison.p_value,
                });
            }
        }
    }
    write_csv(&dir.join("comparison.csv"), &comparison, &mut files)?;
    write_json(&dir.join("comparison.json"), &comparison, &mut files)?;
    ctx.finish_stage("trade", &files, started)?;
    for r in &summary {
        eprintln!(
            "trade: {:<16} {:<16} {:>5} trades  total {:+.2}",
            r.model, r.rule, r.n_trades, r.total_profit
        );
    }
    Ok(Outcome::Success)
}

pub fn cmd_report(ctx: &RunContext) -> Result<Outcome> {
    let Some(manifest) = ExperimentManifest::load(ctx.out())? else {
        bail!(ValidationError(format!("no manifest in {}", ctx.out().display())));
    };
    let verification = manifest.verify(ctx.out())?;
    #[derive(Serialize)]
    struct Report<'a> {
        manifest: &'a ExperimentManifest,
        verification: &'a crate::manifest::Verification,
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&Report {
            manifest: &manifest,
            verification: &verification,
        })?
    );
    if !verification.ok() {
        bail!(ValidationError(format!(
            "manifest verification failed: {} missing, {} modified, {} unregistered",
            verification.missing.len(),
            verification.modified.len(),
            verification.unregistered.len()
        )));
    }
    Ok(Outcome::Success)
}
