use std::collections::BTreeMap;

use chrono::NaiveDate;
use log::debug;
use serde::{Deserialize, Serialize};

use super::{CrossSection, DataError, MarketDay, MarketSeries, Movement, SampleWindow};

/// Window construction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Number of daily ratio rows per window (`T`).
    pub lookback: usize,
    /// Largest calendar-day distance allowed between consecutive trading days.
    pub max_gap_days: i64,
    /// Previous-day score floor used in score ratios.
    pub score_floor: f64,
    /// Upper bound applied to score ratios.
    pub score_cap: f64,
    /// A move counts as positive only if the next-day return exceeds this.
    pub min_positive_return: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            lookback: 5,
            max_gap_days: 5,
            score_floor: 1e-4,
            score_cap: 10.0,
            min_positive_return: 0.0,
        }
    }
}

/// Ratios of consecutive scores together with how often the floor and cap fired.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRatios {
    pub ratios: Vec<f64>,
    pub floored: usize,
    pub capped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedWindow {
    pub symbol: String,
    pub target_date: NaiveDate,
    pub reason: String,
}

/// Output of [`build_windows`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<SampleWindow>,
    pub skipped: Vec<SkippedWindow>,
    pub score_floor_events: usize,
    pub score_cap_events: usize,
}

fn check_gap(symbol: &str, prev: &MarketDay, cur: &MarketDay, tolerance: i64) -> Result<(), DataError> {
    let days = (cur.date - prev.date).num_days();
    if days <= 0 {
        return Err(DataError::Unsorted {
            symbol: symbol.to_string(),
            date: cur.date,
        });
    }
    if days > tolerance {
        return Err(DataError::Gap {
            symbol: symbol.to_string(),
            from: prev.date,
            to: cur.date,
            days,
            tolerance,
        });
    }
    Ok(())
}

/// Day-over-day ratios of `(adj_close, high, low)`; one row per consecutive pair.
pub fn normalize_prices(days: &[MarketDay], max_gap_days: i64) -> Result<Vec<[f64; 3]>, DataError> {
    if days.len() < 2 {
        return Err(DataError::TooShort {
            needed: 2,
            got: days.len(),
        });
    }
    for d in days {
        for (field, value) in [("adj_close", d.adj_close), ("high", d.high), ("low", d.low)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DataError::NonPositivePrice {
                    symbol: d.symbol.clone(),
                    date: d.date,
                    field,
                    value,
                });
            }
        }
    }
    days.windows(2)
        .map(|pair| {
            let (prev, cur) = (&pair[0], &pair[1]);
            check_gap(&cur.symbol, prev, cur, max_gap_days)?;
            Ok([
                cur.adj_close / prev.adj_close,
                cur.high / prev.high,
                cur.low / prev.low,
            ])
        })
        .collect()
}

/// `S_i / max(S_{i-1}, floor)`, capped at `cap`.
pub fn normalize_scores(scores: &[f64], floor: f64, cap: f64) -> ScoreRatios {
    let mut out = ScoreRatios {
        ratios: Vec::with_capacity(scores.len().saturating_sub(1)),
        floored: 0,
        capped: 0,
    };
    for pair in scores.windows(2) {
        let prev = if pair[0] < floor {
            out.floored += 1;
            floor
        } else {
            pair[0]
        };
        let mut ratio = pair[1] / prev;
        if ratio > cap {
            out.capped += 1;
            ratio = cap;
        }
        out.ratios.push(ratio);
    }
    out
}

fn window_at(days: &[MarketDay], t: usize, config: &WindowConfig) -> Result<(SampleWindow, usize, usize), DataError> {
    let span = &days[t - config.lookback..=t];
    let price_feats = normalize_prices(span, config.max_gap_days)?;
    check_gap(&days[t].symbol, &days[t], &days[t + 1], config.max_gap_days)?;

    let sentiment: Vec<f64> = span.iter().map(|d| d.sentiment).collect();
    let activity: Vec<f64> = span.iter().map(|d| d.activity).collect();
    let s = normalize_scores(&sentiment, config.score_floor, config.score_cap);
    let a = normalize_scores(&activity, config.score_floor, config.score_cap);
    let media_feats = s.ratios.iter().zip(&a.ratios).map(|(&x, &y)| [x, y]).collect();

    let next_return = days[t + 1].adj_close / days[t].adj_close - 1.0;
    let label = if next_return > config.min_positive_return {
        Movement::Positive
    } else {
        Movement::Negative
    };
    Ok((
        SampleWindow {
            symbol: days[t].symbol.clone(),
            target_date: days[t].date,
            price_feats,
            media_feats,
            label,
        },
        s.floored + a.floored,
        s.capped + a.capped,
    ))
}

/// One window per `(symbol, date)` that has `lookback` prior days and a next
/// day for the label: `max(0, days - lookback - 1)` per symbol. Windows whose
/// span crosses an over-long calendar gap are skipped and recorded.
pub fn build_windows(series: &MarketSeries, config: &WindowConfig) -> Result<WindowSet, DataError> {
    if config.lookback == 0 {
        return Err(DataError::InvalidConfig("lookback must be positive".into()));
    }
    let mut set = WindowSet::default();
    for (symbol, days) in series {
        if let Some(pair) = days.windows(2).find(|p| p[1].date <= p[0].date) {
            return Err(DataError::Unsorted {
                symbol: symbol.clone(),
                date: pair[1].date,
            });
        }
        if days.len() < config.lookback + 2 {
            debug!("{symbol}: {} days is too short for any window", days.len());
        }
        for t in config.lookback..days.len().saturating_sub(1) {
            match window_at(days, t, config) {
                Ok((w, floored, capped)) => {
                    set.score_floor_events += floored;
                    set.score_cap_events += capped;
                    set.windows.push(w);
                }
                Err(e @ (DataError::Gap { .. } | DataError::NonPositivePrice { .. })) => {
                    debug!("{symbol} {}: skipped ({e})", days[t].date);
                    set.skipped.push(SkippedWindow {
                        symbol: symbol.clone(),
                        target_date: days[t].date,
                        reason: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(set)
}

/// Groups windows into per-date cross-sections, ordered by date then symbol.
pub fn group_by_date(windows: Vec<SampleWindow>) -> Vec<CrossSection> {
    let mut by_date: BTreeMap<NaiveDate, Vec<SampleWindow>> = BTreeMap::new();
    for w in windows {
        by_date.entry(w.target_date).or_default().push(w);
    }
    by_date
        .into_iter()
        .map(|(date, mut windows)| {
            windows.sort_by(|a, b| a.symbol.cmp(&b.symbol));
            CrossSection { date, windows }
        })
        .collect()
}
