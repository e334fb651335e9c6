//! The full network (encoders, fusion, graph attention, head), day batching,
//! and checkpoint files.
//!
//! A batch is a list of trading days. Each day contributes its whole
//! cross-section of stocks, and the days are stacked into one graph whose
//! neighbourhood mask is block diagonal, so attention never crosses days.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::encoders::{Fusion, TemporalEncoder};
use crate::gat::{ClassifierHead, GatLayer};
use crate::market_data::CrossSection;
use crate::relation_graph::{snapshot_for_date, GraphError, StockGraph};
use crate::seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("window has no days")]
    EmptyWindow,
    #[error("batch has no days")]
    EmptyBatch,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{what}: expected width {expected}, got {got}")]
    Width {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("node {0} has no self-loop")]
    MissingSelfLoop(usize),
    #[error("graph has {nodes} nodes but features have {rows} rows")]
    Misaligned { nodes: usize, rows: usize },
    #[error("{date} {symbol}: {msg}")]
    Window { date: NaiveDate, symbol: String, msg: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

/// Layer widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Technical encoder hidden size `d_h`.
    pub hidden: usize,
    /// Media encoder hidden size `d_m`.
    pub media_hidden: usize,
    /// Fused feature width `d_f`.
    pub fused: usize,
    /// Per-head attention width `d_g`.
    pub gat_hidden: usize,
    pub heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            media_hidden: 16,
            fused: 64,
            gat_hidden: 16,
            heads: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("hidden", self.hidden),
            ("media_hidden", self.media_hidden),
            ("fused", self.fused),
            ("gat_hidden", self.gat_hidden),
            ("heads", self.heads),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ModelError::InvalidConfig(format!("{name} must be positive"))),
            None => Ok(()),
        }
    }

    fn to_line(&self) -> String {
        format!(
            "config hidden={} media_hidden={} fused={} gat_hidden={} heads={}",
            self.hidden, self.media_hidden, self.fused, self.gat_hidden, self.heads
        )
    }

    fn from_line(line: &str, lineno: usize) -> Result<Self, ModelError> {
        let bad = |msg: String| ModelError::Checkpoint { line: lineno, msg };
        let mut parts = line.split_whitespace();
        if parts.next() != Some("config") {
            return Err(bad("expected config line".into()));
        }
        let mut cfg = ModelConfig::default();
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("malformed entry {kv:?}")))?;
            let v: usize = v.parse().map_err(|_| bad(format!("bad value in {kv:?}")))?;
            match k {
                "hidden" => cfg.hidden = v,
                "media_hidden" => cfg.media_hidden = v,
                "fused" => cfg.fused = v,
                "gat_hidden" => cfg.gat_hidden = v,
                "heads" => cfg.heads = v,
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        Ok(cfg)
    }
}

/// Network structure plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub technical: TemporalEncoder,
    pub media: TemporalEncoder,
    pub fusion: Fusion,
    pub gat: GatLayer,
    pub head: ClassifierHead,
}

/// Batched forward pass results.
#[derive(Debug, Clone)]
pub struct Forward<'t> {
    /// `B × 1` positive-movement probabilities.
    pub probs: Var<'t>,
    /// Per-head `B × B` graph attention.
    pub attention: Vec<Var<'t>>,
}

pub const PRICE_WIDTH: usize = 3;
pub const MEDIA_WIDTH: usize = 2;
const CHECKPOINT_MAGIC: &str = "relgat-checkpoint 1";

impl Model {
    /// Fresh model with parameters drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = seed::stream(seed, "init");
        let mut params = ParamStore::new();
        let technical = TemporalEncoder::init(&mut params, "technical", PRICE_WIDTH, config.hidden, &mut rng);
        let media = TemporalEncoder::init(&mut params, "media", MEDIA_WIDTH, config.media_hidden, &mut rng);
        let fusion = Fusion::init(&mut params, "fusion", config.hidden, config.media_hidden, config.fused, &mut rng);
        let gat = GatLayer::init(&mut params, "gat", config.fused, config.gat_hidden, config.heads, &mut rng);
        let head = ClassifierHead::init(&mut params, "head", gat.out_dim(), &mut rng);
        Ok(Self {
            config,
            params,
            technical,
            media,
            fusion,
            gat,
            head,
        })
    }

    /// Forward pass reading parameters from `params`, which must share this
    /// model's layout (it may be a perturbed copy of `self.params`).
    pub fn forward_with<'t>(&self, tape: &'t Tape, params: &ParamStore, batch: &Batch) -> Result<Forward<'t>, ModelError> {
        let leaves = |steps: &[Tensor]| steps.iter().map(|t| tape.leaf(t.clone())).collect::<Vec<_>>();
        let q = self.technical.forward(tape, params, &leaves(&batch.price_steps))?.summary;
        let c = self.media.forward(tape, params, &leaves(&batch.media_steps))?.summary;
        let x = self.fusion.forward(tape, params, q, c)?;
        let g = self.gat.forward(tape, params, x, &batch.mask)?;
        let probs = self.head.forward(tape, params, g.output)?;
        Ok(Forward {
            probs,
            attention: g.attention,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, batch: &Batch) -> Result<Forward<'t>, ModelError> {
        self.forward_with(tape, &self.params, batch)
    }

    /// Mean binary cross-entropy of the batch.
    pub fn loss<'t>(&self, tape: &'t Tape, params: &ParamStore, batch: &Batch) -> Result<Var<'t>, ModelError> {
        let out = self.forward_with(tape, params, batch)?;
        Ok(tape.bce(out.probs, &batch.labels)?)
    }

    /// Probabilities for every row of the batch.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        Ok(self.forward(&tape, batch)?.probs.value().into_data())
    }

    /// Writes the checkpoint text format: a magic line, the config line, then
    /// per tensor a `tensor <name> <rank> <dims...>` header and one line of
    /// values in shortest round-trip exponent form.
    pub fn save<W: Write>(&self, mut out: W) -> Result<(), ModelError> {
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        writeln!(out, "{}", self.config.to_line())?;
        let mut line = String::new();
        for (name, t) in self.params.iter() {
            let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
            writeln!(out, "tensor {name} {} {}", t.shape().len(), dims.join(" "))?;
            line.clear();
            for (i, v) in t.data().iter().enumerate() {
                if i > 0 {
                    line.push(' ');
                }
                write!(line, "{v:e}").expect("writing to a String");
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self, ModelError> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String), ModelError> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(ModelError::Checkpoint {
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let (n, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint {
                line: n,
                msg: format!("expected {CHECKPOINT_MAGIC:?}"),
            });
        }
        let (n, cfg_line) = next("config")?;
        let config = ModelConfig::from_line(&cfg_line, n)?;
        let mut model = Model::new(config, 0).map_err(|e| ModelError::Checkpoint {
            line: n,
            msg: e.to_string(),
        })?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let (n, header) = next("tensor header")?;
            let bad = |msg: String| ModelError::Checkpoint { line: n, msg };
            let fields: Vec<&str> = header.split_whitespace().collect();
            let expected_name = model.params.name(id).to_string();
            if fields.len() < 3 || fields[0] != "tensor" || fields[1] != expected_name {
                return Err(bad(format!("expected tensor {expected_name}")));
            }
            let dims: Vec<usize> = fields[3..]
                .iter()
                .map(|d| d.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad("bad dimension".into()))?;
            if fields[2].parse::<usize>().ok() != Some(dims.len()) || dims != model.params.get(id).shape() {
                return Err(bad(format!(
                    "{expected_name}: shape {dims:?} does not match {:?}",
                    model.params.get(id).shape()
                )));
            }
            let (n, values) = next("tensor values")?;
            let data: Vec<f64> = values
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| ModelError::Checkpoint {
                    line: n,
                    msg: format!("bad number: {e}"),
                })?;
            let target = model.params.get_mut(id).data_mut();
            if data.len() != target.len() {
                return Err(ModelError::Checkpoint {
                    line: n,
                    msg: format!("expected {} values, got {}", target.len(), data.len()),
                });
            }
            target.copy_from_slice(&data);
        }
        Ok(model)
    }
}

/// Whether batches use the relation graph or self-loops only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeMode {
    Relations,
    SelfOnly,
}

/// One trading day ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDay {
    pub date: NaiveDate,
    pub symbols: Vec<String>,
    /// Per step, `n × 3` row-major.
    pub price: Vec<Vec<f64>>,
    /// Per step, `n × 2` row-major.
    pub media: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    /// The day's graph over `symbols`, in the same order.
    pub graph: StockGraph,
}

impl PreparedDay {
    pub fn new(section: &CrossSection, graph: &StockGraph) -> Result<Self, ModelError> {
        let first = section.windows.first().ok_or(ModelError::EmptyBatch)?;
        let steps = first.price_feats.len();
        if steps == 0 {
            return Err(ModelError::EmptyWindow);
        }
        let n = section.windows.len();
        let mut price = vec![Vec::with_capacity(n * PRICE_WIDTH); steps];
        let mut media = vec![Vec::with_capacity(n * MEDIA_WIDTH); steps];
        for w in &section.windows {
            let fail = |msg: &str| ModelError::Window {
                date: section.date,
                symbol: w.symbol.clone(),
                msg: msg.into(),
            };
            if w.price_feats.len() != steps || w.media_feats.len() != steps {
                return Err(fail("window length differs from the rest of the day"));
            }
            let finite = w.price_feats.iter().flatten().chain(w.media_feats.iter().flatten()).all(|v| v.is_finite());
            if !finite {
                return Err(fail("non-finite feature"));
            }
            for t in 0..steps {
                price[t].extend_from_slice(&w.price_feats[t]);
                media[t].extend_from_slice(&w.media_feats[t]);
            }
        }
        let symbols: Vec<String> = section.windows.iter().map(|w| w.symbol.clone()).collect();
        Ok(Self {
            date: section.date,
            graph: graph.induced(&symbols),
            labels: section.windows.iter().map(|w| w.label.target()).collect(),
            symbols,
            price,
            media,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Prepares every section against the graph snapshot in force on its date.
pub fn prepare_days(sections: &[CrossSection], snapshots: &[StockGraph], edges: EdgeMode) -> Result<Vec<PreparedDay>, ModelError> {
    sections
        .iter()
        .map(|s| {
            let graph = snapshot_for_date(snapshots, s.date)?;
            let mut day = PreparedDay::new(s, graph)?;
            if edges == EdgeMode::SelfOnly {
                day.graph = day.graph.without_edges();
            }
            Ok(day)
        })
        .collect()
}

/// Several days stacked for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(date, first row, row count)` per day.
    pub days: Vec<(NaiveDate, usize, usize)>,
    pub symbols: Vec<String>,
    /// Per step, `B × 3`.
    pub price_steps: Vec<Tensor>,
    /// Per step, `B × 2`.
    pub media_steps: Vec<Tensor>,
    pub labels: Vec<f64>,
    /// Block-diagonal `B × B` neighbourhood.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn from_days(days: &[&PreparedDay]) -> Result<Self, ModelError> {
        let first = days.first().ok_or(ModelError::EmptyBatch)?;
        let steps = first.price.len();
        let total: usize = days.iter().map(|d| d.len()).sum();
        let mut price = vec![Vec::with_capacity(total * PRICE_WIDTH); steps];
        let mut media = vec![Vec::with_capacity(total * MEDIA_WIDTH); steps];
        let mut mask = vec![false; total * total];
        let mut batch = Batch {
            days: Vec::with_capacity(days.len()),
            symbols: Vec::with_capacity(total),
            price_steps: Vec::new(),
            media_steps: Vec::new(),
            labels: Vec::with_capacity(total),
            mask: Vec::new(),
        };
        let mut offset = 0;
        for day in days {
            if day.price.len() != steps {
                return Err(ModelError::Window {
                    date: day.date,
                    symbol: day.symbols.first().cloned().unwrap_or_default(),
                    msg: format!("lookback {} differs from batch lookback {steps}", day.price.len()),
                });
            }
            for t in 0..steps {
                price[t].extend_from_slice(&day.price[t]);
                media[t].extend_from_slice(&day.media[t]);
            }
            for i in 0..day.len() {
                for &j in day.graph.neighbors(i) {
                    mask[(offset + i) * total + offset + j] = true;
                }
            }
            batch.days.push((day.date, offset, day.len()));
            batch.symbols.extend(day.symbols.iter().cloned());
            batch.labels.extend_from_slice(&day.labels);
            offset += day.len();
        }
        batch.price_steps = price
            .into_iter()
            .map(|d| Tensor::matrix(total, PRICE_WIDTH, d))
            .collect::<Result<_, _>>()?;
        batch.media_steps = media
            .into_iter()
            .map(|d| Tensor::matrix(total, MEDIA_WIDTH, d))
            .collect::<Result<_, _>>()?;
        batch.mask = mask;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        self.days.iter().map(|d| d.0).collect()
    }
}
