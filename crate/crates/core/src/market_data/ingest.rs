use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{DataError, MarketDay, MarketSeries};

/// Neutral score used before a symbol's first sentiment observation.
const DEFAULT_SENTIMENT: f64 = 0.5;
const DEFAULT_ACTIVITY: f64 = 0.0;
const MAX_FLAG_EXAMPLES: usize = 50;

/// Row of the price CSV: `date,symbol,open,high,low,adj_close`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceRow {
    pub date: NaiveDate,
    pub symbol: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub adj_close: f64,
}

/// Row of the sentiment CSV: `date,symbol,sentiment,activity`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentRow {
    pub date: NaiveDate,
    pub symbol: String,
    pub sentiment: f64,
    pub activity: f64,
}

/// Counts and flags gathered while ingesting and windowing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestionReport {
    pub price_rows: usize,
    pub sentiment_rows: usize,
    pub symbols: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_date: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_date: Option<NaiveDate>,
    pub low_above_high: usize,
    pub low_above_close: usize,
    /// Days whose scores were carried forward from the previous day.
    pub imputed_scores: usize,
    /// Days before a symbol's first score row (neutral default used).
    pub defaulted_scores: usize,
    /// Score rows with no matching price row.
    pub orphan_sentiment_rows: usize,
    pub windows_built: usize,
    pub windows_skipped: usize,
    pub score_floor_events: usize,
    pub score_cap_events: usize,
    /// First few flagged rows, as `date symbol reason`.
    pub flagged: Vec<String>,
}

impl IngestionReport {
    fn flag(&mut self, date: NaiveDate, symbol: &str, reason: &str) {
        if self.flagged.len() < MAX_FLAG_EXAMPLES {
            self.flagged.push(format!("{date} {symbol} {reason}"));
        }
    }
}

fn csv_err(context: &str) -> impl FnOnce(csv::Error) -> DataError + '_ {
    move |source| DataError::Csv {
        context: context.to_string(),
        source,
    }
}

fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R, context: &str) -> Result<Vec<T>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(csv_err(context))).collect()
}

pub fn read_prices<R: Read>(reader: R) -> Result<Vec<PriceRow>, DataError> {
    read_rows(reader, "price csv")
}

pub fn read_sentiment<R: Read>(reader: R) -> Result<Vec<SentimentRow>, DataError> {
    read_rows(reader, "sentiment csv")
}

fn check_price(row: &PriceRow) -> Result<(), DataError> {
    for (field, value) in [
        ("open", row.open),
        ("high", row.high),
        ("low", row.low),
        ("adj_close", row.adj_close),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(DataError::NonPositivePrice {
                symbol: row.symbol.clone(),
                date: row.date,
                field,
                value,
            });
        }
    }
    Ok(())
}

fn check_scores(row: &SentimentRow) -> Result<(), DataError> {
    let invalid = |msg: String| DataError::InvalidScore {
        symbol: row.symbol.clone(),
        date: row.date,
        msg,
    };
    if !(0.0..=1.0).contains(&row.sentiment) {
        return Err(invalid(format!("sentiment {} outside [0, 1]", row.sentiment)));
    }
    if !(row.activity >= 0.0 && row.activity.is_finite()) {
        return Err(invalid(format!("activity {} is negative or non-finite", row.activity)));
    }
    Ok(())
}

/// Joins price and score rows into per-symbol series.
///
/// Days without a score row reuse the symbol's previous scores and are
/// flagged; rows whose low exceeds the high or the adjusted close are kept but
/// flagged, since adjusted series can legitimately break raw OHLC ordering.
pub fn merge_days(prices: &[PriceRow], sentiment: &[SentimentRow]) -> Result<(MarketSeries, IngestionReport), DataError> {
    let mut report = IngestionReport {
        price_rows: prices.len(),
        sentiment_rows: sentiment.len(),
        ..Default::default()
    };

    let mut scores: HashMap<(&str, NaiveDate), &SentimentRow> = HashMap::with_capacity(sentiment.len());
    for row in sentiment {
        check_scores(row)?;
        if scores.insert((row.symbol.as_str(), row.date), row).is_some() {
            return Err(DataError::Duplicate {
                kind: "sentiment",
                symbol: row.symbol.clone(),
                date: row.date,
            });
        }
    }

    let mut by_symbol: BTreeMap<&str, Vec<&PriceRow>> = BTreeMap::new();
    for row in prices {
        check_price(row)?;
        by_symbol.entry(row.symbol.as_str()).or_default().push(row);
    }

    let mut series = MarketSeries::new();
    let mut matched = 0usize;
    for (symbol, mut rows) in by_symbol {
        rows.sort_by_key(|r| r.date);
        let mut days = Vec::with_capacity(rows.len());
        let mut last: Option<(f64, f64)> = None;
        for (i, row) in rows.iter().enumerate() {
            if i > 0 && rows[i - 1].date == row.date {
                return Err(DataError::Duplicate {
                    kind: "price",
                    symbol: symbol.to_string(),
                    date: row.date,
                });
            }
            if row.low > row.high {
                report.low_above_high += 1;
                report.flag(row.date, symbol, "low>high");
            }
            if row.low > row.adj_close {
                report.low_above_close += 1;
                report.flag(row.date, symbol, "low>adj_close");
            }
            let (sentiment, activity, imputed) = match scores.get(&(symbol, row.date)) {
                Some(s) => {
                    matched += 1;
                    last = Some((s.sentiment, s.activity));
                    (s.sentiment, s.activity, false)
                }
                None => match last {
                    Some((s, a)) => {
                        report.imputed_scores += 1;
                        report.flag(row.date, symbol, "score carried forward");
                        (s, a, true)
                    }
                    None => {
                        report.defaulted_scores += 1;
                        report.flag(row.date, symbol, "score defaulted");
                        (DEFAULT_SENTIMENT, DEFAULT_ACTIVITY, true)
                    }
                },
            };
            days.push(MarketDay {
                date: row.date,
                symbol: symbol.to_string(),
                adj_close: row.adj_close,
                high: row.high,
                low: row.low,
                open: row.open,
                sentiment,
                activity,
                score_imputed: imputed,
            });
        }
        report.first_date = min_opt(report.first_date, days.first().map(|d| d.date));
        report.last_date = max_opt(report.last_date, days.last().map(|d| d.date));
        series.insert(symbol.to_string(), days);
    }
    report.symbols = series.len();
    report.orphan_sentiment_rows = sentiment.len() - matched;
    Ok((series, report))
}

fn min_opt(a: Option<NaiveDate>, b: Option<NaiveDate>) -> Option<NaiveDate> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    }
}

fn max_opt(a: Option<NaiveDate>, b: Option<NaiveDate>) -> Option<NaiveDate> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, y) => x.or(y),
    }
}

/// Writes the price half of `series` in date-major, symbol-minor order.
pub fn write_prices<W: Write>(writer: W, series: &MarketSeries) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for day in date_major(series) {
        wtr.serialize(PriceRow {
            date: day.date,
            symbol: day.symbol.clone(),
            open: day.open,
            high: day.high,
            low: day.low,
            adj_close: day.adj_close,
        })
        .map_err(csv_err("price csv"))?;
    }
    wtr.flush().map_err(|e| csv_err("price csv")(e.into()))
}

/// Writes the score half of `series`; imputed days are omitted.
pub fn write_sentiment<W: Write>(writer: W, series: &MarketSeries) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for day in date_major(series).filter(|d| !d.score_imputed) {
        wtr.serialize(SentimentRow {
            date: day.date,
            symbol: day.symbol.clone(),
            sentiment: day.sentiment,
            activity: day.activity,
        })
        .map_err(csv_err("sentiment csv"))?;
    }
    wtr.flush().map_err(|e| csv_err("sentiment csv")(e.into()))
}

fn date_major(series: &MarketSeries) -> impl Iterator<Item = &MarketDay> {
    let mut all: Vec<&MarketDay> = series.values().flatten().collect();
    all.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.symbol.cmp(&b.symbol)));
    all.into_iter()
}

#[cfg(test)]
mod tests {
    use super::*;

    const PRICES: &str = "date,symbol,open,high,low,adj_close
2021-01-04,AAA,10,11,9,10.5
2021-01-05,AAA,10.5,11,10.6,10.4
2021-01-04,BBB,20,21,19,20
2021-01-05,BBB,20,21,19,20.5
";
    const SCORES: &str = "date,symbol,sentiment,activity
2021-01-04,AAA,0.6,12
2021-01-04,BBB,0.4,3
2021-01-05,BBB,0.5,4
2021-01-06,CCC,0.5,4
";

    #[test]
    fn merges_and_flags() {
        let prices = read_prices(PRICES.as_bytes()).unwrap();
        let scores = read_sentiment(SCORES.as_bytes()).unwrap();
        let (series, report) = merge_days(&prices, &scores).unwrap();
        assert_eq!(series.len(), 2);
        let aaa = &series["AAA"];
        assert!(aaa[1].score_imputed);
        assert_eq!(aaa[1].sentiment, 0.6);
        assert_eq!(report.imputed_scores, 1);
        assert_eq!(report.low_above_close, 1);
        assert_eq!(report.low_above_high, 0);
        assert_eq!(report.orphan_sentiment_rows, 1);
        assert_eq!(report.first_date, NaiveDate::from_ymd_opt(2021, 1, 4));
    }

    #[test]
    fn rejects_bad_values() {
        let bad = "date,symbol,open,high,low,adj_close\n2021-01-04,AAA,10,11,9,0\n";
        let prices = read_prices(bad.as_bytes()).unwrap();
        assert!(matches!(merge_days(&prices, &[]), Err(DataError::NonPositivePrice { .. })));

        let prices = read_prices(PRICES.as_bytes()).unwrap();
        let scores = read_sentiment("date,symbol,sentiment,activity\n2021-01-04,AAA,1.5,1\n".as_bytes()).unwrap();
        assert!(matches!(merge_days(&prices, &scores), Err(DataError::InvalidScore { .. })));

        let dup = format!("{PRICES}2021-01-04,AAA,10,11,9,10.5\n");
        let prices = read_prices(dup.as_bytes()).unwrap();
        assert!(matches!(merge_days(&prices, &[]), Err(DataError::Duplicate { .. })));
    }

    #[test]
    fn missing_first_score_uses_neutral_default() {
        let prices = read_prices(PRICES.as_bytes()).unwrap();
        let (series, report) = merge_days(&prices, &[]).unwrap();
        assert_eq!(report.defaulted_scores, 4);
        assert!(series["AAA"].iter().all(|d| d.sentiment == DEFAULT_SENTIMENT && d.score_imputed));
    }
}
