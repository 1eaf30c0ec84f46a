//! One-share hypothetical trades against market prices.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{mean, one_sample_t_test, paired_wald, Forecast, OneSampleTest};

/// Per-share fee and slippage allowance.
pub const FEE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Long,
    Short,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub question_id: String,
    pub side: Side,
    pub market_price: f64,
    pub entry_cost: f64,
    pub belief_value: f64,
    pub expected_edge: f64,
    pub realized_value: u8,
    pub profit: f64,
}

impl TradeRecord {
    /// Market-implied probability of the side taken, max(m, 1 - m).
    pub fn market_confidence(&self) -> f64 {
        self.market_price.max(1.0 - self.market_price)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GatingRule {
    EdgeAboveEce { ece: f64 },
    EdgeAboveZero,
    AllMarkets,
}

impl GatingRule {
    pub fn name(&self) -> &'static str {
        match self {
            GatingRule::EdgeAboveEce { .. } => "edge_above_ece",
            GatingRule::EdgeAboveZero => "edge_above_zero",
            GatingRule::AllMarkets => "all_markets",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let GatingRule::EdgeAboveEce { ece } = self {
            if !(0.0..=1.0).contains(ece) {
                return Err(Error::InvalidArgument(format!("gating ECE {ece} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn keeps(&self, t: &TradeRecord) -> bool {
        match *self {
            GatingRule::EdgeAboveEce { ece } => t.expected_edge > ece,
            GatingRule::EdgeAboveZero => t.expected_edge > 0.0,
            GatingRule::AllMarkets => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub rule: GatingRule,
    pub trades: Vec<TradeRecord>,
    pub cumulative_profit: Vec<f64>,
    pub total_profit: f64,
    pub n_trades: usize,
}

pub fn make_trade<R: rand::Rng + ?Sized>(question_id: &str, p: f64, m: f64, y: u8, rng: &mut R) -> Result<TradeRecord> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::MarketPrice(m));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(p));
    }
    if y > 1 {
        return Err(Error::InvalidArgument(format!("outcome {y} is not binary")));
    }
    let side = if p > m {
        Side::Long
    } else if p < m {
        Side::Short
    } else if rng.random_bool(0.5) {
        Side::Long
    } else {
        Side::Short
    };
    let (entry_cost, belief_value, realized_value) = match side {
        Side::Long => (m + FEE, p, y),
        Side::Short => ((1.0 - m) + FEE, 1.0 - p, 1 - y),
    };
    Ok(TradeRecord {
        question_id: question_id.to_string(),
        side,
        market_price: m,
        entry_cost,
        belief_value,
        expected_edge: belief_value - entry_cost,
        realized_value,
        profit: realized_value as f64 - entry_cost,
    })
}

/// One trade per tradeable question with a forecast, in dataset order, sorted
/// by descending edge (ties by id).
pub fn all_trades<R: rand::Rng + ?Sized>(
    forecasts: &[Forecast],
    dataset: &Dataset,
    rng: &mut R,
) -> Result<Vec<TradeRecord>> {
    let by_id: HashMap<&str, Option<f64>> = forecasts
        .iter()
        .map(|f| (f.question_id.as_str(), f.probability))
        .collect();
    let mut trades = Vec::new();
    for q in dataset.questions() {
        if !q.is_tradeable() {
            continue;
        }
        let (Some(Some(p)), Some(m)) = (by_id.get(q.id.as_str()).copied(), q.market_price) else {
            continue;
        };
        trades.push(make_trade(&q.id, p, m, q.outcome, rng)?);
    }
    trades.sort_by(|a, b| {
        b.expected_edge
            .total_cmp(&a.expected_edge)
            .then_with(|| a.question_id.cmp(&b.question_id))
    });
    Ok(trades)
}

/// Keeps the trades passing `rule` and builds the cumulative-profit curve.
pub fn apply_rule(trades: &[TradeRecord], rule: GatingRule) -> Result<StrategyResult> {
    rule.validate()?;
    let kept: Vec<TradeRecord> = trades.iter().filter(|t| rule.keeps(t)).cloned().collect();
    let cumulative_profit: Vec<f64> = kept
        .iter()
        .scan(0.0, |acc, t| {
            *acc += t.profit;
            Some(*acc)
        })
        .collect();
    Ok(StrategyResult {
        rule,
        total_profit: cumulative_profit.last().copied().unwrap_or(0.0),
        n_trades: kept.len(),
        trades: kept,
        cumulative_profit,
    })
}

pub fn run_strategy<R: rand::Rng + ?Sized>(
    forecasts: &[Forecast],
    dataset: &Dataset,
    rule: GatingRule,
    rng: &mut R,
) -> Result<StrategyResult> {
    rule.validate()?;
    apply_rule(&all_trades(forecasts, dataset, rng)?, rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPerTrade {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Mean profit per trade with a normal 95% interval.
pub fn mean_per_trade(result: &StrategyResult) -> Result<MeanPerTrade> {
    let profits: Vec<f64> = result.trades.iter().map(|t| t.profit).collect();
    let w = paired_wald(&profits)?;
    Ok(MeanPerTrade {
        mean: w.delta_mean,
        ci_low: w.ci_low,
        ci_high: w.ci_high,
        n: w.n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEdge {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean excess win rate over the pre-fee price, in percentage points.
    pub mean_edge_pp: Option<f64>,
    pub test: Option<OneSampleTest>,
}

pub const DEFAULT_BANDS: [(f64, f64); 3] = [(0.50, 0.65), (0.65, 0.80), (0.80, 1.00)];

/// Per-band mean of `v - c + fee` in percentage points. Bands are half-open
/// except the last, which includes its upper edge.
pub fn confidence_band_edges(trades: &[TradeRecord], bands: &[(f64, f64)]) -> Vec<BandEdge> {
    bands
        .iter()
        .enumerate()
        .map(|(i, &(lower, upper))| {
            let last = i + 1 == bands.len();
            let excess: Vec<f64> = trades
                .iter()
                .filter(|t| {
                    let c = t.market_confidence();
                    c >= lower && (c < upper || (last && c <= upper))
                })
                .map(|t| 100.0 * (t.realized_value as f64 - t.entry_cost + FEE))
                .collect();
            BandEdge {
                lower,
                upper,
                count: excess.len(),
                mean_edge_pp: (!excess.is_empty()).then(|| mean(&excess)),
                test: one_sample_t_test(&excess),
            }
        })
        .collect()
}
