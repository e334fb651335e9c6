//! Classification metrics, the top-k long strategy, Sharpe ratio and
//! benchmark comparison.
//!
//! A prediction counts as positive when `p >= threshold`. The strategy is
//! stricter: only `p > 0.5` qualifies for a trade.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{MarketDay, MarketSeries};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions")]
    Empty,
    #[error("{date} {symbol}: probability {p} outside (0, 1)")]
    InvalidProbability { date: NaiveDate, symbol: String, p: f64 },
    #[error("sharpe ratio needs at least 2 returns, got {0}")]
    TooFewReturns(usize),
    #[error("sharpe ratio undefined: returns have zero variance")]
    ZeroVariance,
    #[error("benchmark has no {which} price for {date}")]
    BenchmarkGap { date: NaiveDate, which: &'static str },
    #[error("{context}: {source}")]
    Csv {
        context: &'static str,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// One model output, as stored in the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub date: NaiveDate,
    pub symbol: String,
    pub probability: f64,
    /// True movement, 1 for up.
    pub label: u8,
}

pub fn confusion(preds: &[PredictionRecord], threshold: f64) -> Result<ConfusionCounts, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = ConfusionCounts::default();
    for p in preds {
        match (p.probability >= threshold, p.label == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Matthews correlation; 0 when any factor of the denominator is zero.
pub fn mcc(c: ConfusionCounts) -> f64 {
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
    if factors.contains(&0.0) {
        return 0.0;
    }
    let denom = factors.iter().product::<f64>().sqrt();
    ((tp * tn - fp * fn_) / denom).clamp(-1.0, 1.0)
}

/// Positive-class F1 and accuracy; zero denominators give 0.
pub fn f1_accuracy(c: ConfusionCounts) -> (f64, f64) {
    let f1_den = 2 * c.tp + c.fp + c.fn_;
    let f1 = if f1_den == 0 { 0.0 } else { 2.0 * c.tp as f64 / f1_den as f64 };
    let acc = if c.total() == 0 {
        0.0
    } else {
        (c.tp + c.tn) as f64 / c.total() as f64
    };
    (f1, acc)
}

/// Contents of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f1: f64,
    pub accuracy: f64,
    pub mcc: f64,
    pub threshold: f64,
    pub count: usize,
    pub confusion: ConfusionCounts,
}

pub fn metrics(preds: &[PredictionRecord], threshold: f64) -> Result<Metrics, EvalError> {
    let c = confusion(preds, threshold)?;
    let (f1, accuracy) = f1_accuracy(c);
    Ok(Metrics {
        f1,
        accuracy,
        mcc: mcc(c),
        threshold,
        count: c.total(),
        confusion: c,
    })
}

/// Strategy settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub top_k: usize,
    /// Round-trip cost subtracted from every trade's return.
    pub cost_per_trade: f64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            top_k: 4,
            cost_per_trade: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub date: NaiveDate,
    pub symbol: String,
    pub probability: f64,
    pub buy: f64,
    pub sell_date: NaiveDate,
    pub sell: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedTrade {
    pub date: NaiveDate,
    pub symbol: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub dates: Vec<NaiveDate>,
    pub daily_returns: Vec<f64>,
    pub cumulative_return: f64,
    /// `None` when undefined (fewer than 2 returns or zero variance).
    pub sharpe: Option<f64>,
    pub trades: Vec<Trade>,
    pub skipped: Vec<SkippedTrade>,
}

fn day_index(days: &[MarketDay], date: NaiveDate) -> Option<usize> {
    days.binary_search_by_key(&date, |d| d.date).ok()
}

fn trade(series: &MarketSeries, date: NaiveDate, symbol: &str) -> Result<(f64, NaiveDate, f64), String> {
    let days = series.get(symbol).ok_or("no price series")?;
    let i = day_index(days, date).ok_or("no price on prediction date")?;
    let next = days.get(i + 1).ok_or("no next trading day")?;
    Ok((days[i].adj_close, next.date, next.open))
}

/// Compounded return `Π(1 + r) − 1`.
pub fn cumulative(returns: &[f64]) -> f64 {
    returns.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0
}

/// Running compounded return after each period.
pub fn cumulative_path(returns: &[f64]) -> Vec<f64> {
    let mut level = 1.0;
    returns
        .iter()
        .map(|r| {
            level *= 1.0 + r;
            level - 1.0
        })
        .collect()
}

/// For each prediction date, buys up to `top_k` symbols with `p > 0.5` at
/// that day's adjusted close and sells at the next trading day's open.
/// Positions are equal weight; a day with no trade earns 0. Ties in
/// probability go to the lexicographically smaller symbol. A selected
/// symbol without a next-day price is skipped, not replaced.
pub fn run_strategy(preds: &[PredictionRecord], prices: &MarketSeries, config: &StrategyConfig) -> BacktestResult {
    let mut by_date: BTreeMap<NaiveDate, Vec<&PredictionRecord>> = BTreeMap::new();
    for p in preds {
        by_date.entry(p.date).or_default().push(p);
    }
    let mut result = BacktestResult {
        dates: Vec::with_capacity(by_date.len()),
        daily_returns: Vec::with_capacity(by_date.len()),
        cumulative_return: 0.0,
        sharpe: None,
        trades: Vec::new(),
        skipped: Vec::new(),
    };
    for (date, mut day) in by_date {
        day.retain(|p| p.probability > 0.5);
        day.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.symbol.cmp(&b.symbol)));
        let mut rets = Vec::new();
        for p in day.into_iter().take(config.top_k) {
            match trade(prices, date, &p.symbol) {
                Ok((buy, sell_date, sell)) => {
                    let ret = sell / buy - 1.0 - config.cost_per_trade;
                    rets.push(ret);
                    result.trades.push(Trade {
                        date,
                        symbol: p.symbol.clone(),
                        probability: p.probability,
                        buy,
                        sell_date,
                        sell,
                        ret,
                    });
                }
                Err(reason) => {
                    warn!("{date} {}: trade skipped ({reason})", p.symbol);
                    result.skipped.push(SkippedTrade {
                        date,
                        symbol: p.symbol.clone(),
                        reason: reason.to_string(),
                    });
                }
            }
        }
        let daily = if rets.is_empty() {
            0.0
        } else {
            rets.iter().sum::<f64>() / rets.len() as f64
        };
        result.dates.push(date);
        result.daily_returns.push(daily);
    }
    result.cumulative_return = cumulative(&result.daily_returns);
    result.sharpe = sharpe(&result.daily_returns, 252.0, 0.0).ok();
    result
}

/// Annualized Sharpe ratio with sample standard deviation.
/// `risk_free` is a per-period rate.
pub fn sharpe(returns: &[f64], periods_per_year: f64, risk_free: f64) -> Result<f64, EvalError> {
    let n = returns.len();
    if n < 2 {
        return Err(EvalError::TooFewReturns(n));
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    let mean = excess.iter().sum::<f64>() / n as f64;
    let var = excess.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let scale = excess.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if sd <= 1e-14 * scale || sd == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok(mean / sd * periods_per_year.sqrt())
}

/// One summary row: cumulative return and Sharpe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerformanceRow {
    pub name: String,
    pub cumulative_return: f64,
    pub sharpe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub dates: Vec<NaiveDate>,
    pub strategy_path: Vec<f64>,
    pub benchmark_path: Vec<f64>,
    pub benchmark: PerformanceRow,
    pub strategy: PerformanceRow,
}

/// Benchmark daily return on each backtest date is its close-to-close move
/// from that date to the next benchmark day.
pub fn compare_benchmark(result: &BacktestResult, benchmark: &[MarketDay], name: &str) -> Result<BenchmarkReport, EvalError> {
    let mut sorted = benchmark.to_vec();
    sorted.sort_by_key(|d| d.date);
    let mut bench = Vec::with_capacity(result.dates.len());
    for &date in &result.dates {
        let i = day_index(&sorted, date).ok_or(EvalError::BenchmarkGap { date, which: "current" })?;
        let next = sorted.get(i + 1).ok_or(EvalError::BenchmarkGap { date, which: "next-day" })?;
        bench.push(next.adj_close / sorted[i].adj_close - 1.0);
    }
    Ok(BenchmarkReport {
        dates: result.dates.clone(),
        strategy_path: cumulative_path(&result.daily_returns),
        benchmark_path: cumulative_path(&bench),
        benchmark: PerformanceRow {
            name: format!("benchmark ({name})"),
            cumulative_return: cumulative(&bench),
            sharpe: sharpe(&bench, 252.0, 0.0).ok(),
        },
        strategy: PerformanceRow {
            name: "strategy".into(),
            cumulative_return: result.cumulative_return,
            sharpe: result.sharpe,
        },
    })
}

impl BenchmarkReport {
    /// Writes `date,strategy_cum_return,benchmark_cum_return`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        let err = |source| EvalError::Csv {
            context: "backtest report",
            source,
        };
        w.write_record(["date", "strategy_cum_return", "benchmark_cum_return"]).map_err(err)?;
        for ((d, s), b) in self.dates.iter().zip(&self.strategy_path).zip(&self.benchmark_path) {
            w.write_record([d.to_string(), format!("{s:.10}"), format!("{b:.10}")]).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Two-row text table of cumulative return and Sharpe.
    pub fn summary(&self) -> String {
        let row = |r: &PerformanceRow| {
            let sharpe = r.sharpe.map_or("undefined (zero variance)".to_string(), |s| format!("{s:.2}"));
            format!("{:<20} {:>17.2}% {:>8}\n", r.name, 100.0 * r.cumulative_return, sharpe)
        };
        format!(
            "{:<20} {:>18} {:>8}\n{}{}",
            "model",
            "cumulative_return",
            "sharpe",
            row(&self.benchmark),
            row(&self.strategy)
        )
    }
}

pub fn write_predictions<W: Write>(out: W, preds: &[PredictionRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for p in preds {
        w.serialize(p).map_err(|source| EvalError::Csv {
            context: "predictions",
            source,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<PredictionRecord>, EvalError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let preds: Vec<PredictionRecord> = r
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|source| EvalError::Csv {
            context: "predictions",
            source,
        })?;
    for p in &preds {
        if !(p.probability > 0.0 && p.probability < 1.0) {
            return Err(EvalError::InvalidProbability {
                date: p.date,
                symbol: p.symbol.clone(),
                p: p.probability,
            });
        }
    }
    Ok(preds)
}

pub fn write_trades<W: Write>(out: W, trades: &[Trade]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for t in trades {
        w.serialize(t).map_err(|source| EvalError::Csv {
            context: "trades",
            source,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Days;
    use proptest::prelude::*;

    fn d(i: u64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2021, 3, 1).unwrap() + Days::new(i)
    }

    fn rec(date: NaiveDate, symbol: &str, p: f64, label: u8) -> PredictionRecord {
        PredictionRecord {
            date,
            symbol: symbol.into(),
            probability: p,
            label,
        }
    }

    fn counts(tp: usize, tn: usize, fp: usize, fn_: usize) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    #[test]
    fn confusion_examples() {
        let all = vec![rec(d(0), "A", 0.9, 1); 5];
        assert_eq!(confusion(&all, 0.5).unwrap(), counts(5, 0, 0, 0));
        assert_eq!(confusion(&[rec(d(0), "A", 0.5, 1)], 0.5).unwrap().tp, 1);
        assert!(matches!(confusion(&[], 0.5), Err(EvalError::Empty)));

        let mixed: Vec<_> = [
            (0.9, 1),
            (0.8, 0),
            (0.3, 1),
            (0.1, 0),
            (0.6, 1),
            (0.49, 0),
            (0.51, 0),
            (0.2, 1),
            (0.7, 1),
            (0.4, 0),
        ]
        .iter()
        .map(|&(p, l)| rec(d(0), "A", p, l))
        .collect();
        // hand tally: TP 0.9,0.6,0.7; FP 0.8,0.51; FN 0.3,0.2; TN 0.1,0.49,0.4
        assert_eq!(confusion(&mixed, 0.5).unwrap(), counts(3, 3, 2, 2));
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mcc(counts(10, 10, 0, 0)), 1.0);
        assert_eq!(mcc(counts(0, 0, 10, 10)), -1.0);
        let mixed = counts(6, 5, 4, 5);
        assert!((mcc(mixed) - 10.0 / (10.0f64 * 11.0 * 9.0 * 10.0).sqrt()).abs() < 1e-12);
        assert!((mcc(mixed) - 0.10050).abs() < 1e-5);
        let (f1, acc) = f1_accuracy(mixed);
        assert!((f1 - 12.0 / 21.0).abs() < 1e-12);
        assert_eq!(acc, 0.55);
        assert_eq!(f1_accuracy(counts(5, 5, 0, 0)), (1.0, 1.0));
        assert_eq!(f1_accuracy(counts(0, 3, 2, 1)).0, 0.0);
        assert_eq!(mcc(counts(5, 0, 5, 0)), 0.0);
    }

    proptest! {
        #[test]
        fn mcc_bounded_and_symmetric(tp in 0usize..500, tn in 0usize..500, fp in 0usize..500, fn_ in 0usize..500) {
            let m = mcc(counts(tp, tn, fp, fn_));
            prop_assert!((-1.0..=1.0).contains(&m));
            prop_assert!((mcc(counts(tn, tp, fn_, fp)) - m).abs() < 1e-12);
            prop_assert!((mcc(counts(fp, fn_, tp, tn)) + m).abs() < 1e-12);
        }
    }

    fn series(rows: &[(&str, &[(f64, f64)])]) -> MarketSeries {
        rows.iter()
            .map(|(s, px)| {
                let days = px
                    .iter()
                    .enumerate()
                    .map(|(i, &(open, close))| MarketDay {
                        date: d(i as u64),
                        symbol: s.to_string(),
                        adj_close: close,
                        high: open.max(close),
                        low: open.min(close),
                        open,
                        sentiment: 0.5,
                        activity: 1.0,
                        score_imputed: false,
                    })
                    .collect();
                (s.to_string(), days)
            })
            .collect()
    }

    #[test]
    fn strategy_three_day_fixture() {
        // (open, close) per day
        let prices = series(&[
            ("A", &[(10.0, 10.0), (10.5, 11.0), (11.0, 12.0), (12.6, 12.0)]),
            ("B", &[(20.0, 20.0), (19.0, 19.5), (19.5, 20.0), (21.0, 21.0)]),
            ("C", &[(5.0, 5.0), (5.5, 5.0), (4.5, 4.0), (4.2, 4.0)]),
        ]);
        let preds = vec![
            rec(d(0), "A", 0.9, 1),
            rec(d(0), "B", 0.6, 0),
            rec(d(0), "C", 0.4, 1),
            rec(d(1), "A", 0.3, 1),
            rec(d(1), "B", 0.5, 1),
            rec(d(2), "A", 0.7, 1),
            rec(d(2), "B", 0.7, 1),
            rec(d(2), "C", 0.8, 0),
        ];
        let r = run_strategy(&preds, &prices, &StrategyConfig { top_k: 2, ..Default::default() });
        // day 0: A 10→10.5 (+5%), B 20→19 (−5%) → 0
        // day 1: nothing above 0.5 → cash
        // day 2: C 4→4.2 (+5%), then tie A/B at 0.7 → A 12→12.6 (+5%)
        let expected = [0.0, 0.0, 0.05];
        for (got, want) in r.daily_returns.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(r.trades.len(), 4);
        assert_eq!(r.trades[3].symbol, "A");
        assert!((r.cumulative_return - 0.05).abs() < 1e-12);
    }

    #[test]
    fn missing_next_day_is_skipped() {
        let prices = series(&[("A", &[(10.0, 10.0)]), ("B", &[(10.0, 10.0), (11.0, 11.0)])]);
        let preds = vec![rec(d(0), "A", 0.9, 1), rec(d(0), "B", 0.8, 1)];
        let r = run_strategy(&preds, &prices, &StrategyConfig::default());
        assert_eq!(r.skipped.len(), 1);
        assert!((r.daily_returns[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn sharpe_examples() {
        assert_eq!(sharpe(&[0.01, -0.01], 252.0, 0.0).unwrap(), 0.0);
        assert!(matches!(sharpe(&[0.01, 0.01], 252.0, 0.0), Err(EvalError::ZeroVariance)));
        assert!(matches!(sharpe(&[0.01], 252.0, 0.0), Err(EvalError::TooFewReturns(1))));
        let r = [0.01, -0.005, 0.02];
        let mean = 0.025 / 3.0;
        let sd = (r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 2.0).sqrt();
        let s = sharpe(&r, 252.0, 0.0).unwrap();
        assert!((s - mean / sd * 252f64.sqrt()).abs() < 1e-12);
        assert!((s - 10.513).abs() < 1e-3);
    }

    #[test]
    fn benchmark_against_itself() {
        // opens equal closes so close-to-open trades equal close-to-close moves
        let px: &[(f64, f64)] = &[(100.0, 100.0), (102.0, 102.0), (101.0, 101.0), (104.0, 104.0), (104.0, 104.0)];
        let prices = series(&[("SPY", px)]);
        let preds: Vec<_> = (0..4).map(|i| rec(d(i), "SPY", 0.9, 1)).collect();
        let r = run_strategy(&preds, &prices, &StrategyConfig::default());
        let report = compare_benchmark(&r, &prices["SPY"], "SPY").unwrap();
        assert_eq!(report.strategy_path, report.benchmark_path);
        assert_eq!(report.strategy.cumulative_return, report.benchmark.cumulative_return);
        assert!((report.benchmark.cumulative_return - 0.04).abs() < 1e-12);
        assert_eq!(report.strategy.sharpe, report.benchmark.sharpe);

        let flat = series(&[("SPY", &[(1.0, 1.0); 5])]);
        let report = compare_benchmark(&r, &flat["SPY"], "SPY").unwrap();
        assert_eq!(report.benchmark.cumulative_return, 0.0);
        assert!(report.benchmark.sharpe.is_none());
        assert!(report.summary().contains("undefined"));

        let short = &prices["SPY"][..3];
        assert!(matches!(compare_benchmark(&r, short, "SPY"), Err(EvalError::BenchmarkGap { .. })));
    }

    #[test]
    fn recomposition_matches() {
        let r = [0.01, -0.02, 0.005, 0.03, -0.001];
        let path = cumulative_path(&r);
        let direct = (1.01 * 0.98 * 1.005 * 1.03 * 0.999) - 1.0;
        assert!((cumulative(&r) - direct).abs() < 1e-12);
        assert!((path[4] - direct).abs() < 1e-12);
    }

    #[test]
    fn predictions_round_trip() {
        let preds = vec![rec(d(0), "A", 0.25, 0), rec(d(1), "B", 0.75, 1)];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("date,symbol,probability,label\n"));
        assert_eq!(read_predictions(buf.as_slice()).unwrap(), preds);
    }
}
