//! Adam optimization of the whole network with early stopping on
//! validation F1.
//!
//! Training never sees test data: [`fit`] takes only the train and
//! validation days.

use std::io::Write;

use chrono::NaiveDate;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape};
use crate::eval::{confusion, f1_accuracy, mcc, EvalError, PredictionRecord};
use crate::market_data::{build_windows, generate_synthetic, group_by_date, SignalKind, SynthConfig, WindowConfig};
use crate::model::{prepare_days, Batch, EdgeMode, Model, ModelConfig, ModelError, PreparedDay};
use crate::relation_graph::{build_snapshots, yearly_snapshot_dates, PropertyWhitelist};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("non-finite loss {loss} in epoch {epoch} on batch dated {}", format_dates(.dates))]
    NanLoss {
        epoch: usize,
        loss: f64,
        dates: Vec<NaiveDate>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no {0} days")]
    NoData(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_dates(dates: &[NaiveDate]) -> String {
    dates.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Trading days per batch.
    pub batch_size: usize,
    /// Epochs without a validation F1 improvement before stopping.
    pub patience: usize,
    /// Probability at or above which a prediction counts as positive.
    pub threshold: f64,
    /// Shuffle day order every epoch.
    pub shuffle: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            max_epochs: 8000,
            batch_size: 8,
            patience: 50,
            threshold: 0.5,
            shuffle: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("max_epochs, batch_size and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one update from the gradients held in `store`.
    pub fn update(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

/// Optimizer and shuffling state carried across epochs.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            optimizer: Adam::new(&model.params, config.learning_rate),
            rng: seed::stream(config.seed, "shuffle"),
        }
    }
}

/// Per-epoch history row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: f64,
    pub val_acc: f64,
    pub val_mcc: f64,
}

/// Writes `epoch,train_loss,val_f1,val_acc,val_mcc` with shortest
/// round-trip number formatting.
pub fn write_history<W: Write>(mut out: W, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_f1,val_acc,val_mcc")?;
    for r in history {
        writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_f1, r.val_acc, r.val_mcc)?;
    }
    Ok(())
}

/// One pass over `days` in batches of `config.batch_size` days. Returns the
/// mean batch loss.
pub fn train_epoch(model: &mut Model, state: &mut TrainState, days: &[PreparedDay], config: &TrainConfig) -> Result<f64, TrainError> {
    if days.is_empty() {
        return Err(TrainError::NoData("training"));
    }
    state.epoch += 1;
    let mut order: Vec<usize> = (0..days.len()).collect();
    if config.shuffle {
        order.shuffle(&mut state.rng);
    }
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(config.batch_size) {
        let refs: Vec<&PreparedDay> = chunk.iter().map(|&i| &days[i]).collect();
        let batch = Batch::from_days(&refs)?;
        model.params.zero_grad();
        let loss_value = {
            let tape = Tape::new();
            let loss = model.loss(&tape, &model.params, &batch)?;
            let value = loss.item().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(TrainError::NanLoss {
                    epoch: state.epoch,
                    loss: value,
                    dates: batch.dates(),
                });
            }
            tape.backward_into(loss, &mut model.params).map_err(ModelError::from)?;
            value
        };
        state.optimizer.update(&mut model.params);
        total += loss_value;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Predictions for every stock-day in `days`, in day order.
pub fn predict_days(model: &Model, days: &[PreparedDay], batch_size: usize) -> Result<Vec<PredictionRecord>, TrainError> {
    let mut out = Vec::new();
    for chunk in days.chunks(batch_size.max(1)) {
        let refs: Vec<&PreparedDay> = chunk.iter().collect();
        let batch = Batch::from_days(&refs)?;
        let probs = model.predict(&batch)?;
        for &(date, start, len) in &batch.days {
            let rows = batch.symbols.iter().zip(&probs).zip(&batch.labels).skip(start).take(len);
            for ((symbol, &probability), &label) in rows {
                out.push(PredictionRecord {
                    date,
                    symbol: symbol.clone(),
                    probability,
                    label: label as u8,
                });
            }
        }
    }
    Ok(out)
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters from the epoch with the best validation F1.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
    pub stopped_early: bool,
}

/// Trains until `max_epochs` or until validation F1 has not improved for
/// `patience` epochs, then restores the best parameters.
pub fn fit(mut model: Model, train: &[PreparedDay], validation: &[PreparedDay], config: &TrainConfig) -> Result<FitOutcome, TrainError> {
    config.validate()?;
    if validation.is_empty() {
        return Err(TrainError::NoData("validation"));
    }
    let mut state = TrainState::new(&model, config);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(&mut model, &mut state, train, config)?;
        let preds = predict_days(&model, validation, config.batch_size)?;
        let c = confusion(&preds, config.threshold)?;
        let (val_f1, val_acc) = f1_accuracy(c);
        let record = EpochRecord {
            epoch,
            train_loss,
            val_f1,
            val_acc,
            val_mcc: mcc(c),
        };
        debug!("{record:?}");
        if epoch % 25 == 0 {
            info!("epoch {epoch}: loss {train_loss:.4} val f1 {val_f1:.4} acc {val_acc:.4}");
        }
        history.push(record);
        match &best {
            Some((_, f1, _)) if val_f1 <= *f1 => since_best += 1,
            _ => {
                best = Some((epoch, val_f1, model.params.clone()));
                since_best = 0;
            }
        }
        if since_best >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let (best_epoch, best_val_f1, params) = best.expect("at least one epoch ran");
    model.params = params;
    model.params.zero_grad();
    Ok(FitOutcome {
        model,
        history,
        best_epoch,
        best_val_f1,
        stopped_early,
    })
}

/// A 6-stock, 5-day batch from a contagion market, so the graph has edges.
pub fn gradient_fixture(seed: u64) -> Result<Batch, TrainError> {
    let market = generate_synthetic(&SynthConfig {
        stocks: 6,
        days: 12,
        signal: SignalKind::Contagion,
        probability: 0.8,
        relation_pairs: 1,
        distractor_relations: 1,
        seed,
        ..Default::default()
    })
    .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let set = build_windows(&market.series, &WindowConfig::default()).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let sections = group_by_date(set.windows);
    let (first, last) = match (sections.first(), sections.last()) {
        (Some(f), Some(l)) => (f.date, l.date),
        _ => return Err(TrainError::NoData("fixture")),
    };
    let snapshots = build_snapshots(
        &market.relations,
        &market.universe,
        &yearly_snapshot_dates(first, last),
        &PropertyWhitelist::default(),
    );
    let days = prepare_days(&sections[sections.len().saturating_sub(5)..], &snapshots, EdgeMode::Relations)?;
    let refs: Vec<&PreparedDay> = days.iter().collect();
    Ok(Batch::from_days(&refs)?)
}

/// Finite-difference check of the full network's BCE gradient on
/// [`gradient_fixture`].
pub fn check_model_gradients(config: ModelConfig, seed: u64, options: &GradCheckOptions) -> Result<GradCheckReport, TrainError> {
    let batch = gradient_fixture(seed)?;
    let model = Model::new(config, seed)?;
    let report = grad_check(&model.params, |tape, store| model.loss(tape, store, &batch), options)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{split_dataset, SplitRatios};

    fn small() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            media_hidden: 4,
            fused: 8,
            gat_hidden: 4,
            heads: 2,
        }
    }

    fn data(stocks: usize, days: usize, p: f64, seed: u64) -> (Vec<PreparedDay>, Vec<PreparedDay>) {
        let m = generate_synthetic(&SynthConfig {
            stocks,
            days,
            signal: SignalKind::Sentiment,
            probability: p,
            seed,
            ..Default::default()
        })
        .unwrap();
        let set = build_windows(&m.series, &WindowConfig::default()).unwrap();
        let split = split_dataset(set.windows, SplitRatios::default()).unwrap();
        let first = split.train[0].date;
        let last = split.test.last().unwrap().date;
        let snaps = build_snapshots(
            &m.relations,
            &m.universe,
            &yearly_snapshot_dates(first, last),
            &PropertyWhitelist::default(),
        );
        (
            prepare_days(&split.train, &snaps, EdgeMode::Relations).unwrap(),
            prepare_days(&split.validation, &snaps, EdgeMode::Relations).unwrap(),
        )
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (train, _) = data(4, 40, 0.8, 1);
        let mut model = Model::new(small(), 1).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut state = TrainState::new(&model, &cfg);
        train_epoch(&mut model, &mut state, &train, &cfg).unwrap();
        for ((_, a), (_, b)) in model.params.iter().zip(before.iter()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn one_step_reduces_batch_loss() {
        let (train, _) = data(5, 40, 0.8, 2);
        let refs: Vec<&PreparedDay> = train.iter().take(8).collect();
        let batch = Batch::from_days(&refs).unwrap();
        let mut decreased = 0;
        for s in 0..20 {
            let mut model = Model::new(small(), s).unwrap();
            let loss_of = |m: &Model| {
                let tape = Tape::new();
                m.loss(&tape, &m.params, &batch).unwrap().item().unwrap()
            };
            let before = loss_of(&model);
            let mut adam = Adam::new(&model.params, 1e-3);
            model.params.zero_grad();
            {
                let tape = Tape::new();
                let loss = model.loss(&tape, &model.params, &batch).unwrap();
                tape.backward_into(loss, &mut model.params).unwrap();
            }
            adam.update(&mut model.params);
            if loss_of(&model) < before {
                decreased += 1;
            }
        }
        assert_eq!(decreased, 20);
    }

    #[test]
    fn frozen_model_stops_after_two_epochs() {
        let (train, val) = data(4, 60, 0.8, 3);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            patience: 1,
            max_epochs: 10,
            ..Default::default()
        };
        let out = fit(Model::new(small(), 3).unwrap(), &train, &val, &cfg).unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.stopped_early);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn fit_is_deterministic_and_keeps_best() {
        let (train, val) = data(4, 60, 0.8, 4);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            max_epochs: 6,
            patience: 3,
            seed: 9,
            ..Default::default()
        };
        let a = fit(Model::new(small(), 4).unwrap(), &train, &val, &cfg).unwrap();
        let b = fit(Model::new(small(), 4).unwrap(), &train, &val, &cfg).unwrap();
        let (mut ha, mut hb) = (Vec::new(), Vec::new());
        write_history(&mut ha, &a.history).unwrap();
        write_history(&mut hb, &b.history).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.model.params, b.model.params);

        let max_f1 = a.history.iter().map(|r| r.val_f1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best_val_f1, max_f1);
        let preds = predict_days(&a.model, &val, 8).unwrap();
        let (f1, _) = f1_accuracy(confusion(&preds, 0.5).unwrap());
        assert_eq!(f1, max_f1);
    }

    #[test]
    fn nan_loss_reports_batch_dates() {
        let (train, _) = data(4, 40, 0.8, 5);
        let mut model = Model::new(small(), 5).unwrap();
        let id = model.params.find("head.bias").unwrap();
        model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig::default();
        let mut state = TrainState::new(&model, &cfg);
        match train_epoch(&mut model, &mut state, &train, &cfg) {
            Err(TrainError::NanLoss { dates, .. }) => assert!(!dates.is_empty()),
            other => panic!("expected NaN abort, got {other:?}"),
        }
    }

    #[test]
    fn small_model_gradients_match_finite_differences() {
        let batch = gradient_fixture(0).unwrap();
        assert_eq!((batch.days.len(), batch.len()), (5, 30));
        assert!(batch.mask.iter().filter(|&&m| m).count() > batch.len());
        let report = check_model_gradients(small(), 0, &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 10,
            max_epochs: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
