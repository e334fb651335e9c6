//! Properties of ingestion, windowing and splitting.

use std::collections::BTreeSet;

use chrono::{Days, NaiveDate};
use proptest::prelude::*;

use relgat::market_data::{
    build_windows, generate_synthetic, merge_days, read_prices, read_sentiment, split_dataset, write_prices,
    write_sentiment, MarketDay, MarketSeries, SignalKind, SplitRatios, SynthConfig, WindowConfig,
};

fn day_strategy() -> impl Strategy<Value = (f64, f64, f64, f64, f64, f64)> {
    (
        0.5f64..500.0,
        0.5f64..500.0,
        0.0f64..1.0,
        0.0f64..1.0,
        0.0f64..1.0,
        0.0f64..1e6,
    )
        .prop_map(|(a, b, lo, hi, s, act)| {
            let low = a.min(b) * (0.9 + 0.1 * lo);
            let high = a.max(b) * (1.0 + 0.1 * hi);
            (a, high, low, b, s, act)
        })
}

fn build_series(rows: &[Vec<(f64, f64, f64, f64, f64, f64)>]) -> MarketSeries {
    let start = NaiveDate::from_ymd_opt(2020, 1, 6).unwrap();
    rows.iter()
        .enumerate()
        .map(|(k, days)| {
            let symbol = format!("SYM{k}");
            let days = days
                .iter()
                .enumerate()
                .map(|(i, &(close, high, low, open, sentiment, activity))| MarketDay {
                    date: start + Days::new(i as u64),
                    symbol: symbol.clone(),
                    adj_close: close,
                    high,
                    low,
                    open,
                    sentiment,
                    activity,
                    score_imputed: false,
                })
                .collect();
            (symbol, days)
        })
        .collect()
}

proptest! {
    #[test]
    fn csv_round_trip_preserves_values(
        rows in prop::collection::vec(prop::collection::vec(day_strategy(), 1..12), 1..4)
    ) {
        let series = build_series(&rows);
        let (mut prices, mut scores) = (Vec::new(), Vec::new());
        write_prices(&mut prices, &series).unwrap();
        write_sentiment(&mut scores, &series).unwrap();
        let (parsed, report) = merge_days(
            &read_prices(prices.as_slice()).unwrap(),
            &read_sentiment(scores.as_slice()).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(parsed, series);
        prop_assert_eq!(report.imputed_scores + report.defaulted_scores, 0);
    }

    #[test]
    fn split_dates_are_disjoint_and_ordered(seed in 0u64..1000, days in 30usize..80) {
        let market = generate_synthetic(&SynthConfig { stocks: 3, days, seed, ..Default::default() }).unwrap();
        let set = build_windows(&market.series, &WindowConfig::default()).unwrap();
        let split = split_dataset(set.windows, SplitRatios::default()).unwrap();
        let dates = |s: &[relgat::market_data::CrossSection]| s.iter().map(|c| c.date).collect::<BTreeSet<_>>();
        let (tr, va, te) = (dates(&split.train), dates(&split.validation), dates(&split.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert!(tr.last() < va.first() && va.last() < te.first());
    }
}

#[test]
fn windows_never_see_the_next_day() {
    let market = generate_synthetic(&SynthConfig {
        stocks: 4,
        days: 40,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let config = WindowConfig::default();
    let base = build_windows(&market.series, &config).unwrap().windows;
    let symbol = "S001";
    let days = &market.series[symbol];
    for t in 10..30 {
        let target = days[t].date;
        let mut perturbed = market.series.clone();
        let next = &mut perturbed.get_mut(symbol).unwrap()[t + 1];
        next.adj_close *= 1.37;
        next.high *= 1.37;
        next.low *= 1.37;
        next.open *= 1.37;
        next.sentiment = 1.0 - next.sentiment;
        next.activity *= 2.0;
        let changed = build_windows(&perturbed, &config).unwrap().windows;
        let find = |ws: &[relgat::market_data::SampleWindow]| {
            ws.iter()
                .find(|w| w.symbol == symbol && w.target_date == target)
                .cloned()
                .unwrap()
        };
        let (a, b) = (find(&base), find(&changed));
        assert_eq!(a.price_feats, b.price_feats, "{target}");
        assert_eq!(a.media_feats, b.media_feats, "{target}");
    }
}

#[test]
fn unplanted_market_is_balanced() {
    let market = generate_synthetic(&SynthConfig {
        stocks: 40,
        days: 260,
        signal: SignalKind::None,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let windows = build_windows(&market.series, &WindowConfig::default()).unwrap().windows;
    assert!(windows.len() >= 10_000, "{}", windows.len());
    let positive = windows.iter().filter(|w| w.label.is_positive()).count() as f64 / windows.len() as f64;
    assert!((positive - 0.5).abs() <= 0.03, "{positive}");
}
