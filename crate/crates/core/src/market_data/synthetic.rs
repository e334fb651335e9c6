//! Reproducible synthetic markets with a planted, analytically known signal.
//!
//! Two plants are available:
//!
//! * `sentiment`: the move from day `t` to `t + 1` goes up iff the sentiment
//!   ratio `s_t / s_{t-1}` exceeds the threshold, with probability `p`
//!   (otherwise it is flipped). Scores are drawn independently each day so the
//!   ratio exceeds 1 half of the time.
//! * `contagion`: stocks come in (leader, follower) pairs linked by an
//!   ownership record. Leaders move randomly and by a lot; a follower's move
//!   on day `t` copies its leader's move on day `t - 1` with probability `p`,
//!   at a much smaller magnitude. Nothing in a follower's own history predicts
//!   its label, so the signal is only reachable through the relation edge.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, MarketDay, MarketSeries};
use crate::relation_graph::{RelationRecord, Universe};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    /// Labels independent of every feature.
    None,
    Sentiment,
    Contagion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub stocks: usize,
    pub days: usize,
    pub start_date: NaiveDate,
    pub signal: SignalKind,
    /// Probability that a day's move follows the planted rule.
    pub probability: f64,
    /// Sentiment-ratio threshold for the `sentiment` plant.
    pub sentiment_threshold: f64,
    /// Extra whitelisted relations between random stock pairs.
    pub relation_pairs: usize,
    /// Records with a non-whitelisted property (must be ignored downstream).
    pub distractor_relations: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            stocks: 20,
            days: 300,
            start_date: NaiveDate::from_ymd_opt(2019, 1, 2).expect("valid date"),
            signal: SignalKind::Sentiment,
            probability: 0.8,
            sentiment_threshold: 1.0,
            relation_pairs: 0,
            distractor_relations: 4,
            seed: 0,
        }
    }
}

/// What was planted and the best accuracy any predictor can reach on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSignal {
    pub signal: SignalKind,
    pub probability: f64,
    pub bayes_accuracy: f64,
    pub description: String,
    /// Follower → leader tickers for the contagion plant.
    #[serde(default)]
    pub leaders: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct SyntheticMarket {
    pub series: MarketSeries,
    pub relations: Vec<RelationRecord>,
    pub universe: Universe,
    /// Equal-weight index of all stocks, under symbol `SPY`.
    pub benchmark: Vec<MarketDay>,
    pub plant: PlantedSignal,
}

pub const BENCHMARK_SYMBOL: &str = "SPY";
const WHITELISTED_PROPERTY: &str = "P127";
const EXTRA_PROPERTY: &str = "P355";
const DISTRACTOR_PROPERTY: &str = "P31";

fn ticker(i: usize) -> String {
    format!("S{i:03}")
}

fn entity(i: usize) -> String {
    format!("Q{}", 1000 + i)
}

fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn coin(rng: &mut ChaCha8Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

fn follow(rng: &mut ChaCha8Rng, intended: f64, p: f64) -> f64 {
    if rng.gen_bool(p) {
        intended
    } else {
        -intended
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.to_string()));
        if self.stocks == 0 {
            return bad("stocks must be positive");
        }
        if self.days < 2 {
            return bad("days must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.probability) {
            return bad("probability must lie in [0, 1]");
        }
        if self.sentiment_threshold.is_nan() || self.sentiment_threshold <= 0.0 {
            return bad("sentiment_threshold must be positive");
        }
        if self.signal == SignalKind::Contagion && self.stocks < 2 {
            return bad("contagion needs at least 2 stocks");
        }
        if (self.relation_pairs > 0 || self.distractor_relations > 0) && self.stocks < 2 {
            return bad("relations need at least 2 stocks");
        }
        Ok(())
    }

    fn bayes_accuracy(&self) -> f64 {
        let best = self.probability.max(1.0 - self.probability);
        match self.signal {
            SignalKind::None => 0.5,
            SignalKind::Sentiment => best,
            SignalKind::Contagion => {
                let followers = (self.stocks / 2) as f64;
                (followers * best + (self.stocks as f64 - followers) * 0.5) / self.stocks as f64
            }
        }
    }
}

/// Generates a market for `config`. The same config always yields the same market.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticMarket, DataError> {
    config.validate()?;
    let mut rng = seed::stream(config.seed, "synthetic");
    let dates = business_days(config.start_date, config.days);
    let (n, days) = (config.stocks, config.days);
    let p = config.probability;

    let sentiment: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..days).map(|_| rng.gen_range(0.2..0.8)).collect())
        .collect();
    let activity: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..days).map(|_| rng.gen_range(50.0..150.0)).collect())
        .collect();

    // moves[i][t]: signed simple return from day t to day t + 1
    let mut moves = vec![vec![0.0f64; days - 1]; n];
    let mut leaders = Vec::new();
    for i in 0..n {
        for t in 0..days - 1 {
            let (direction, magnitude) = match config.signal {
                SignalKind::None => (coin(&mut rng), rng.gen_range(0.005..0.03)),
                SignalKind::Sentiment => {
                    let direction = if t == 0 {
                        coin(&mut rng)
                    } else {
                        let ratio = sentiment[i][t] / sentiment[i][t - 1];
                        let intended = if ratio > config.sentiment_threshold { 1.0 } else { -1.0 };
                        follow(&mut rng, intended, p)
                    };
                    (direction, rng.gen_range(0.005..0.03))
                }
                SignalKind::Contagion => {
                    let paired = i / 2 < n / 2;
                    if !paired {
                        (coin(&mut rng), rng.gen_range(0.005..0.03))
                    } else if i % 2 == 0 {
                        (coin(&mut rng), rng.gen_range(0.03..0.08))
                    } else if t == 0 {
                        (coin(&mut rng), rng.gen_range(0.001..0.004))
                    } else {
                        let intended = moves[i - 1][t - 1].signum();
                        (follow(&mut rng, intended, p), rng.gen_range(0.001..0.004))
                    }
                }
            };
            moves[i][t] = direction * magnitude;
        }
        if config.signal == SignalKind::Contagion && i % 2 == 1 && i / 2 < n / 2 {
            leaders.push((ticker(i), ticker(i - 1)));
        }
    }

    let mut series = MarketSeries::new();
    for i in 0..n {
        let mut close = rng.gen_range(20.0..200.0);
        let mut open = close;
        let mut days_out = Vec::with_capacity(days);
        for t in 0..days {
            if t > 0 {
                let prev = close;
                close = prev * (1.0 + moves[i][t - 1]);
                open = prev + (close - prev) * rng.gen_range(0.3..0.7);
            }
            let high = open.max(close) * (1.0 + rng.gen_range(0.0..0.01));
            let low = open.min(close) * (1.0 - rng.gen_range(0.0..0.01));
            days_out.push(MarketDay {
                date: dates[t],
                symbol: ticker(i),
                adj_close: close,
                high,
                low,
                open,
                sentiment: sentiment[i][t],
                activity: activity[i][t],
                score_imputed: false,
            });
        }
        series.insert(ticker(i), days_out);
    }

    let benchmark = index_series(&moves, &dates);

    let valid_from = config.start_date - Days::new(365);
    let mut relations = Vec::new();
    for (follower, leader) in &leaders {
        let (f, l) = (follower[1..].parse::<usize>().unwrap(), leader[1..].parse::<usize>().unwrap());
        relations.push(RelationRecord {
            subject: entity(f),
            property: WHITELISTED_PROPERTY.into(),
            object: entity(l),
            valid_from,
        });
    }
    for (count, property) in [
        (config.relation_pairs, EXTRA_PROPERTY),
        (config.distractor_relations, DISTRACTOR_PROPERTY),
    ] {
        for _ in 0..count {
            let a = rng.gen_range(0..n);
            let b = (a + rng.gen_range(1..n)) % n;
            relations.push(RelationRecord {
                subject: entity(a),
                property: property.into(),
                object: entity(b),
                valid_from,
            });
        }
    }

    let universe = Universe::new((0..n).map(|i| (ticker(i), entity(i)))).expect("unique synthetic tickers");
    let description = match config.signal {
        SignalKind::None => "labels are independent fair coin flips".to_string(),
        SignalKind::Sentiment => format!(
            "next move is up iff sentiment ratio > {} with probability {}",
            config.sentiment_threshold, p
        ),
        SignalKind::Contagion => format!(
            "follower's next move copies its leader's previous move with probability {p}; {} pairs",
            leaders.len()
        ),
    };
    Ok(SyntheticMarket {
        series,
        relations,
        universe,
        benchmark,
        plant: PlantedSignal {
            signal: config.signal,
            probability: p,
            bayes_accuracy: config.bayes_accuracy(),
            description,
            leaders,
        },
    })
}

fn index_series(moves: &[Vec<f64>], dates: &[NaiveDate]) -> Vec<MarketDay> {
    let mut close = 300.0;
    let mut out = Vec::with_capacity(dates.len());
    for (t, &date) in dates.iter().enumerate() {
        let mut open = close;
        if t > 0 {
            let r = moves.iter().map(|m| m[t - 1]).sum::<f64>() / moves.len() as f64;
            open = close * (1.0 + r / 2.0);
            close *= 1.0 + r;
        }
        out.push(MarketDay {
            date,
            symbol: BENCHMARK_SYMBOL.into(),
            adj_close: close,
            high: open.max(close),
            low: open.min(close),
            open,
            sentiment: 0.5,
            activity: 0.0,
            score_imputed: false,
        });
    }
    out
}
