use serde::{Deserialize, Serialize};

use super::{group_by_date, CrossSection, DataError, SampleWindow};

/// Fractions of distinct target dates given to validation and test; train
/// receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

/// Chronological train / validation / test partition of cross-sections.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<CrossSection>,
    pub validation: Vec<CrossSection>,
    pub test: Vec<CrossSection>,
}

impl DatasetSplit {
    pub fn date_counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

/// Splits by distinct target date. Validation and test each take
/// `max(1, round(ratio · dates))` of the latest dates and train keeps the
/// rest, so train absorbs the rounding remainder.
pub fn split_dataset(windows: Vec<SampleWindow>, ratios: SplitRatios) -> Result<DatasetSplit, DataError> {
    let sum = ratios.train + ratios.validation + ratios.test;
    if [ratios.train, ratios.validation, ratios.test].iter().any(|r| r.is_nan() || *r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidConfig(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut sections = group_by_date(windows);
    let dates = sections.len();
    if dates < 3 {
        return Err(DataError::TooFewDates(dates));
    }
    let take = |r: f64| ((r * dates as f64).round() as usize).max(1);
    let n_val = take(ratios.validation);
    let n_test = take(ratios.test);
    let n_train = dates
        .checked_sub(n_val + n_test)
        .filter(|&n| n >= 1)
        .ok_or(DataError::TooFewDates(dates))?;

    let test = sections.split_off(n_train + n_val);
    let validation = sections.split_off(n_train);
    Ok(DatasetSplit {
        train: sections,
        validation,
        test,
    })
}
