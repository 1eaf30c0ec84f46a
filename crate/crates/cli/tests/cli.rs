use std::collections::HashSet;
use std::path::{Path, PathBuf};

use brierlab::data::{write_questions, Dataset, Format, Question, Source, Split};
use brierlab::evaluation::{write_forecasts, Forecast};
use brierlab_cli::commands::{ComparisonRow, TradeComparisonRow};
use brierlab_cli::{error_exit_code, run_args, Outcome};
use serde_json::{json, Value};
use tempfile::TempDir;

fn write_config(dir: &Path, value: Value) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn base_config(extra: Value) -> Value {
    let mut cfg = json!({
        "schema_version": 1,
        "seed": 7,
        "data": {"train": "data/train.jsonl", "test": "data/test.jsonl", "oracle": "data/oracle.jsonl"},
        "synthetic": {"generator": {"n_questions": 600, "feature_dim": 3, "market_noise": 0.4}, "test_fraction": 0.25},
        "evaluation": {"n_bins": 5, "bootstrap_reps": 199},
        "trading": {"bootstrap_reps": 199},
        "out_dir": "out"
    });
    merge(&mut cfg, extra);
    cfg
}

fn merge(a: &mut Value, b: Value) {
    match (a, b) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}

fn run(cmd: &str, config: &Path, extra: &[&str]) -> anyhow::Result<Outcome> {
    let mut args = vec![
        "brierlab".to_string(),
        cmd.to_string(),
        "--config".into(),
        config.display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    run_args(args)
}

fn exit_code(r: anyhow::Result<Outcome>) -> i32 {
    match r {
        Ok(o) => o.exit_code(),
        Err(e) => error_exit_code(&e),
    }
}

fn question(id: &str, ts: i64, y: u8, m: Option<f64>) -> Question {
    Question {
        id: id.into(),
        open_ts: 0,
        close_ts: ts + 10,
        resolve_ts: ts + 20,
        prediction_ts: ts,
        outcome: y,
        features: vec![0.0],
        market_price: m,
        volume: None,
        source: Source::Market,
    }
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn synth_empty_dataset_has_valid_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        base_config(
            json!({"synthetic": {"generator": {"n_questions": 0}}, "data": {"train": "out/data/train.jsonl", "test": "out/data/test.jsonl", "oracle": "out/data/oracle.jsonl"}}),
        ),
    );
    assert_eq!(run("synth", &cfg, &[]).unwrap(), Outcome::Success);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("out/data/train.jsonl")).unwrap(),
        ""
    );
    assert_eq!(run("report", &cfg, &[]).unwrap(), Outcome::Success);
}

#[test]
fn synth_is_byte_identical_and_sized() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        base_config(json!({"synthetic": {"generator": {"n_questions": 1000}, "test_fraction": 0.0}})),
    );
    run("synth", &cfg, &[]).unwrap();
    let first = std::fs::read(dir.path().join("data/train.jsonl")).unwrap();
    let oracle = std::fs::read(dir.path().join("data/oracle.jsonl")).unwrap();
    run("synth", &cfg, &[]).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("data/train.jsonl")).unwrap());
    assert_eq!(oracle, std::fs::read(dir.path().join("data/oracle.jsonl")).unwrap());

    let lines = read_lines(&dir.path().join("data/train.jsonl"));
    assert_eq!(lines.len(), 1000);
    let ids: HashSet<String> = lines
        .iter()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids.len(), 1000);
}

#[test]
fn train_refuses_leaking_split() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), base_config(json!({})));
    std::fs::create_dir_all(dir.path().join("data")).unwrap();
    // the training question resolves after the test question is predicted
    let mut late = question("train-late", 100, 1, None);
    late.resolve_ts = 10_000;
    let train = Dataset::new(vec![question("train-a", 50, 0, None), late], Split::Train).unwrap();
    let test = Dataset::new(vec![question("test-a", 500, 1, None)], Split::Test).unwrap();
    write_questions(&dir.path().join("data/train.jsonl"), &train, Format::Jsonl).unwrap();
    write_questions(&dir.path().join("data/test.jsonl"), &test, Format::Jsonl).unwrap();
    let err = run("train", &cfg, &[]).unwrap_err();
    assert_eq!(error_exit_code(&err), 2);
    let msg = format!("{err:#}");
    assert!(msg.contains("train-late") && !msg.contains("\"train-a\""), "{msg}");
}

#[test]
fn train_sweep_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), base_config(json!({"train": {"checkpoint_every": 200}})));
    run("synth", &cfg, &[]).unwrap();
    assert_eq!(
        run("train", &cfg, &["--members", "3", "--jobs", "2"]).unwrap(),
        Outcome::Success
    );
    let ckpt = dir.path().join("out/checkpoints");
    let seeds: Vec<String> = {
        let mut v: Vec<String> = std::fs::read_dir(&ckpt)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        v.sort();
        v
    };
    assert_eq!(seeds, ["seed-7", "seed-8", "seed-9"]);
    assert!(ckpt.join("seed-7/q-200/policy.json").is_file());
    let policy = |s: &str| std::fs::read(ckpt.join(format!("{s}/final/policy.json"))).unwrap();
    let before = policy("seed-8");
    assert_ne!(before, policy("seed-7"));
    run("train", &cfg, &["--members", "3"]).unwrap();
    assert_eq!(before, policy("seed-8"));
    assert_eq!(run("report", &cfg, &[]).unwrap(), Outcome::Success);
}

#[test]
fn train_exit_codes_reflect_run_status() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        base_config(json!({"train": {"early_stop": {"window": 1, "gibberish_threshold": 0.01}}})),
    );
    run("synth", &cfg, &[]).unwrap();
    assert_eq!(exit_code(run("train", &cfg, &[])), 3);

    let cfg = write_config(dir.path(), base_config(json!({"hyper": {"actor_lr": 1e308}})));
    assert_eq!(exit_code(run("train", &cfg, &[])), 4);
    let status: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/checkpoints/seed-7/final/status.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(status["status"]["status"], "numeric_abort");
}

#[test]
fn bad_config_is_a_validation_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), base_config(json!({"hyperparams": {}})));
    assert_eq!(exit_code(run("synth", &cfg, &[])), 2);
    let cfg = write_config(dir.path(), base_config(json!({"ensemble_size": 0})));
    assert_eq!(exit_code(run("synth", &cfg, &[])), 2);
}

/// Ten hand-made test questions and a config pointing at them.
fn evaluation_fixture(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, base_config(json!({"evaluation": {"n_bins": 2}})));
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let ys = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 1];
    let qs: Vec<Question> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| question(&format!("q{i}"), 100 + i as i64, y, Some(0.5)))
        .collect();
    write_questions(
        &dir.join("data/test.jsonl"),
        &Dataset::new(qs, Split::Test).unwrap(),
        Format::Jsonl,
    )
    .unwrap();
    write_questions(
        &dir.join("data/train.jsonl"),
        &Dataset::new(vec![], Split::Train).unwrap(),
        Format::Jsonl,
    )
    .unwrap();
    let flat: Vec<Forecast> = (0..10).map(|i| Forecast::new(format!("q{i}"), Some(0.5))).collect();
    let sharp: Vec<Forecast> = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| Forecast::new(format!("q{i}"), Some(if y == 1 { 0.8 } else { 0.3 })))
        .collect();
    write_forecasts(&dir.join("flat.jsonl"), &flat).unwrap();
    write_forecasts(&dir.join("sharp.jsonl"), &sharp).unwrap();
    cfg
}

fn read_comparison(dir: &Path) -> Vec<ComparisonRow> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/evaluation/comparison.json")).unwrap()).unwrap()
}

#[test]
fn evaluate_model_against_itself() {
    let dir = TempDir::new().unwrap();
    let cfg = evaluation_fixture(dir.path());
    let flat = dir.path().join("flat.jsonl").display().to_string();
    run("evaluate", &cfg, &[&flat, &flat]).unwrap();
    let rows = read_comparison(dir.path());
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].model_a.as_str(), rows[0].model_b.as_str()), ("flat", "flat-2"));
    assert_eq!(rows[0].delta_soft_brier, 0.0);
    assert_eq!(rows[0].brier_p, 1.0);
    assert_eq!(rows[0].delta_ece, 0.0);
    assert_eq!(rows[0].ece_p, 1.0);
}

#[test]
fn evaluate_matches_hand_computation() {
    let dir = TempDir::new().unwrap();
    let cfg = evaluation_fixture(dir.path());
    let flat = dir.path().join("flat.jsonl").display().to_string();
    let sharp = dir.path().join("sharp.jsonl").display().to_string();
    run("evaluate", &cfg, &[&flat, &sharp]).unwrap();
    let row = &read_comparison(dir.path())[0];
    // sharp: six hits at 0.8 lose 0.04, four at 0.3 lose 0.09; flat loses 0.25
    let sharp_brier = (6.0 * 0.04 + 4.0 * 0.09) / 10.0;
    assert!((row.delta_soft_brier - (sharp_brier - 0.25)).abs() < 1e-12);
    let d: Vec<f64> = [1u8, 0, 1, 1, 0, 0, 1, 0, 1, 1]
        .iter()
        .map(|&y| if y == 1 { 0.04 - 0.25 } else { 0.09 - 0.25 })
        .collect();
    let m = d.iter().sum::<f64>() / 10.0;
    let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 9.0).sqrt();
    assert!((row.brier_ci_high - (m + 1.959963984540054 * sd / 10f64.sqrt())).abs() < 1e-12);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/evaluation/sharp.json")).unwrap()).unwrap();
    // sharp bins: {0.3 x4 with y=0, 0.8 x1 with y=1} and {0.8 x5, all y=1}
    let bin0: f64 = (0.3 * 4.0 + 0.8) / 5.0 - 0.2;
    let bin1: f64 = 1.0 - 0.8;
    let ece = 0.5 * bin0.abs() + 0.5 * bin1.abs();
    assert!((report["ece"].as_f64().unwrap() - ece).abs() < 1e-12);
    let summary = read_lines(&dir.path().join("out/evaluation/summary.csv"));
    assert_eq!(
        summary[0],
        "model,soft_brier,ece,n_questions,n_malformed,extreme_bucket_mass"
    );
    assert_eq!(summary.len(), 3);
}

#[test]
fn evaluate_reports_bad_forecasts() {
    let dir = TempDir::new().unwrap();
    let cfg = evaluation_fixture(dir.path());
    let bad = dir.path().join("bad.jsonl");
    let mut text = std::fs::read_to_string(dir.path().join("flat.jsonl")).unwrap();
    text.push_str("{\"question_id\": \"q9\", \"probability\": \n");
    std::fs::write(&bad, text).unwrap();
    let err = run("evaluate", &cfg, &[&bad.display().to_string()]).unwrap_err();
    assert_eq!(error_exit_code(&err), 2);
    assert!(format!("{err:#}").contains("line 11"), "{err:#}");

    let partial = dir.path().join("partial.jsonl");
    let lines = read_lines(&dir.path().join("flat.jsonl"));
    std::fs::write(&partial, lines[..8].join("\n")).unwrap();
    let err = run("evaluate", &cfg, &[&partial.display().to_string()]).unwrap_err();
    assert_eq!(error_exit_code(&err), 2);
    let msg = format!("{err:#}");
    assert!(msg.contains("q8") && msg.contains("q9"), "{msg}");
}

/// The four-question hand fixture: long win, short loss, long loss, long loss.
fn trade_fixture(dir: &Path) -> PathBuf {
    let cfg = write_config(
        dir,
        base_config(json!({"evaluation": {"n_bins": 2}, "trading": {"ece_source": "in_sample"}})),
    );
    std::fs::create_dir_all(dir.join("data")).unwrap();
    let qs = vec![
        question("q1", 1, 1, Some(0.60)),
        question("q2", 2, 1, Some(0.60)),
        question("q3", 3, 0, Some(0.30)),
        question("q4", 4, 0, Some(0.55)),
    ];
    write_questions(
        &dir.join("data/test.jsonl"),
        &Dataset::new(qs, Split::Test).unwrap(),
        Format::Jsonl,
    )
    .unwrap();
    let f = vec![
        Forecast::new("q1", Some(0.80)),
        Forecast::new("q2", Some(0.20)),
        Forecast::new("q3", Some(0.35)),
        Forecast::new("q4", Some(0.60)),
    ];
    write_forecasts(&dir.join("model.jsonl"), &f).unwrap();
    cfg
}

fn trade_report(dir: &Path, model: &str, rule: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("out/trading/{model}/{rule}.json"))).unwrap())
        .unwrap()
}

#[test]
fn trade_matches_hand_fixture() {
    let dir = TempDir::new().unwrap();
    let cfg = trade_fixture(dir.path());
    let model = dir.path().join("model.jsonl").display().to_string();
    run("trade", &cfg, &[&model]).unwrap();
    let all = trade_report(dir.path(), "model", "all_markets");
    let total = all["result"]["total_profit"].as_f64().unwrap();
    let sum: f64 = all["result"]["trades"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["profit"].as_f64().unwrap())
        .sum();
    assert!((total - sum).abs() < 1e-12);
    assert!((total - (0.39 - 0.41 - 0.31 - 0.56)).abs() < 1e-12);
    assert_eq!(all["result"]["n_trades"], 4);
    let sides: Vec<&str> = all["result"]["trades"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t["side"].as_str().unwrap())
        .collect();
    assert_eq!(sides, ["short", "long", "long", "long"]);

    // in-sample ECE over two bins: {0.2, 0.35} vs outcomes {1, 0} and {0.6, 0.8} vs {0, 1}
    let ece = 0.5 * (0.275f64 - 0.5).abs() + 0.5 * (0.7f64 - 0.5).abs();
    let gated = trade_report(dir.path(), "model", "edge_above_ece");
    assert!((gated["ece_used"].as_f64().unwrap() - ece).abs() < 1e-12);
    // only q2 (edge 0.39) clears 0.2125
    assert_eq!(gated["result"]["n_trades"], 1);
    assert!((gated["result"]["total_profit"].as_f64().unwrap() + 0.41).abs() < 1e-12);
    let zero = trade_report(dir.path(), "model", "edge_above_zero");
    assert_eq!(zero["result"]["n_trades"], 4);
}

#[test]
fn trade_identical_models_have_unit_p_value() {
    let dir = TempDir::new().unwrap();
    let cfg = trade_fixture(dir.path());
    let model = dir.path().join("model.jsonl").display().to_string();
    run("trade", &cfg, &[&model, &model]).unwrap();
    let rows: Vec<TradeComparisonRow> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/trading/comparison.json")).unwrap())
            .unwrap();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert_eq!(r.p_value, 1.0);
        assert_eq!((r.delta_total, r.ci_low, r.ci_high), (0.0, 0.0, 0.0));
    }
}

#[test]
fn trade_without_prices_reports_empty() {
    let dir = TempDir::new().unwrap();
    let cfg = evaluation_fixture(dir.path());
    // strip prices
    let qs: Vec<Question> = (0..10).map(|i| question(&format!("q{i}"), 100 + i, 1, None)).collect();
    write_questions(
        &dir.path().join("data/test.jsonl"),
        &Dataset::new(qs, Split::Test).unwrap(),
        Format::Jsonl,
    )
    .unwrap();
    let flat = dir.path().join("flat.jsonl").display().to_string();
    assert_eq!(run("trade", &cfg, &[&flat]).unwrap(), Outcome::Success);
    let status: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/trading/status.json")).unwrap()).unwrap();
    assert_eq!(status["status"], "empty");
}

#[test]
fn report_flags_unregistered_files() {
    let dir = TempDir::new().unwrap();
    let cfg = evaluation_fixture(dir.path());
    let flat = dir.path().join("flat.jsonl").display().to_string();
    run("evaluate", &cfg, &[&flat]).unwrap();
    assert_eq!(run("report", &cfg, &[]).unwrap(), Outcome::Success);
    std::fs::write(dir.path().join("out/evaluation/notes.txt"), "stray").unwrap();
    assert_eq!(exit_code(run("report", &cfg, &[])), 2);
}
