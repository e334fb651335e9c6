//! Price and social-score ingestion, day-over-day normalization, labeled
//! look-back windows, chronological splitting and synthetic markets.

mod ingest;
mod split;
pub mod synthetic;
mod windows;

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{
    merge_days, read_prices, read_sentiment, write_prices, write_sentiment, IngestionReport, PriceRow,
    SentimentRow,
};
pub use split::{split_dataset, DatasetSplit, SplitRatios};
pub use synthetic::{generate_synthetic, PlantedSignal, SignalKind, SynthConfig, SyntheticMarket};
pub use windows::{
    build_windows, group_by_date, normalize_prices, normalize_scores, ScoreRatios, SkippedWindow, WindowConfig,
    WindowSet,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
    #[error("non-positive {field} price {value} for {symbol} on {date}")]
    NonPositivePrice {
        symbol: String,
        date: NaiveDate,
        field: &'static str,
        value: f64,
    },
    #[error("{symbol}: {days}-day calendar gap between {from} and {to} exceeds tolerance of {tolerance} days")]
    Gap {
        symbol: String,
        from: NaiveDate,
        to: NaiveDate,
        days: i64,
        tolerance: i64,
    },
    #[error("{symbol}: dates not strictly increasing at {date}")]
    Unsorted { symbol: String, date: NaiveDate },
    #[error("duplicate {kind} row for {symbol} on {date}")]
    Duplicate {
        kind: &'static str,
        symbol: String,
        date: NaiveDate,
    },
    #[error("{symbol} on {date}: {msg}")]
    InvalidScore {
        symbol: String,
        date: NaiveDate,
        msg: String,
    },
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("cannot split {0} distinct dates into train/validation/test")]
    TooFewDates(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// One stock's record for one trading day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketDay {
    pub date: NaiveDate,
    pub symbol: String,
    pub adj_close: f64,
    pub high: f64,
    pub low: f64,
    pub open: f64,
    /// Positive-sentiment score in `[0, 1]`.
    pub sentiment: f64,
    /// Social-media activity volume, `>= 0`.
    pub activity: f64,
    /// Set when no score row existed for this day and the previous value was reused.
    #[serde(default)]
    pub score_imputed: bool,
}

/// Next-day movement class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Movement {
    Positive,
    Negative,
}

impl Movement {
    /// `1.0` for positive, `0.0` for negative.
    pub fn target(self) -> f64 {
        match self {
            Movement::Positive => 1.0,
            Movement::Negative => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Movement::Positive
    }
}

/// Look-back features for one `(symbol, target_date)` plus the label for the
/// move from `target_date` to the next trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub symbol: String,
    pub target_date: NaiveDate,
    /// `T` rows of `(adj_close, high, low)` ratios to the previous day.
    pub price_feats: Vec<[f64; 3]>,
    /// `T` rows of `(sentiment, activity)` ratios to the previous day.
    pub media_feats: Vec<[f64; 2]>,
    pub label: Movement,
}

/// All windows sharing a target date, sorted by symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSection {
    pub date: NaiveDate,
    pub windows: Vec<SampleWindow>,
}

/// Per-symbol day series, each sorted by date.
pub type MarketSeries = BTreeMap<String, Vec<MarketDay>>;
