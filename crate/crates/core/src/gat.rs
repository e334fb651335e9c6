//! Multi-head graph attention over one day's stocks and the sigmoid head.
//!
//! For head `h`, with `u_i = W⁽ʰ⁾ᵀ x_i`:
//!
//! ```text
//! e_ij = LeakyReLU(a₁·u_i + a₂·u_j)          for j ∈ N(i)
//! α_ij = exp(e_ij) / Σ_{k ∈ N(i)} exp(e_ik)   (0 off the neighborhood)
//! out_i = ELU(Σ_j α_ij u_j)
//! ```
//!
//! where `a = [a₁; a₂]`. Head outputs are concatenated. Several days can be
//! processed at once as one block-diagonal graph.

use std::io::Write;

use chrono::NaiveDate;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoders::uniform;
use crate::model::ModelError;
use crate::relation_graph::StockGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    /// `[in_dim, head_dim]`
    pub weight: ParamId,
    /// `[2·head_dim, 1]`
    pub attention: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub in_dim: usize,
    pub head_dim: usize,
    pub heads: Vec<GatHead>,
    pub leaky_slope: f64,
    pub elu_alpha: f64,
}

/// Batched layer output.
#[derive(Debug, Clone)]
pub struct GatOutput<'t> {
    /// `N × (H·head_dim)`
    pub output: Var<'t>,
    /// One `N × N` attention matrix per head.
    pub attention: Vec<Var<'t>>,
}

fn check_mask(mask: &[bool], n: usize) -> Result<(), ModelError> {
    if mask.len() != n * n {
        return Err(ModelError::Width {
            what: "attention mask",
            expected: n * n,
            got: mask.len(),
        });
    }
    match (0..n).find(|&i| !mask[i * n + i]) {
        Some(i) => Err(ModelError::MissingSelfLoop(i)),
        None => Ok(()),
    }
}

impl GatLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, head_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let w_bound = 1.0 / (in_dim as f64).sqrt();
        let a_bound = 1.0 / ((2 * head_dim) as f64).sqrt();
        let heads = (0..heads)
            .map(|h| GatHead {
                weight: store.insert(format!("{prefix}.head{h}.weight"), uniform(rng, &[in_dim, head_dim], w_bound)),
                attention: store.insert(
                    format!("{prefix}.head{h}.attention"),
                    uniform(rng, &[2 * head_dim, 1], a_bound),
                ),
            })
            .collect();
        Self {
            in_dim,
            head_dim,
            heads,
            leaky_slope: 0.2,
            elu_alpha: 1.0,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// `x: N × in_dim`; `mask` is the row-major `N × N` neighborhood, self-loops required.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>, mask: &[bool]) -> Result<GatOutput<'t>, ModelError> {
        let n = x.shape()[0];
        check_mask(mask, n)?;
        let dg = self.head_dim;
        let mut outputs = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let u = tape.matmul(x, tape.param(store, head.weight))?;
            let a = tape.param(store, head.attention);
            let s_self = tape.matmul(u, tape.slice_rows(a, 0, dg)?)?;
            let s_other = tape.matmul(u, tape.slice_rows(a, dg, 2 * dg)?)?;
            // by_row[i][j] = s_self[i], by_col[i][j] = s_other[j]
            let by_row = tape.transpose(tape.tile_rows(tape.transpose(s_self)?, n)?)?;
            let by_col = tape.tile_rows(tape.transpose(s_other)?, n)?;
            let e = tape.leaky_relu(tape.add(by_row, by_col)?, self.leaky_slope);
            let alpha = tape.softmax(e, Some(mask))?;
            outputs.push(tape.elu(tape.matmul(alpha, u)?, self.elu_alpha));
            attention.push(alpha);
        }
        Ok(GatOutput {
            output: tape.concat(&outputs, Axis::Cols)?,
            attention,
        })
    }
}

/// Attention layer applied to one day: `x` holds one row per graph node, in
/// graph order. Returns the concatenated head outputs and each head's
/// attention matrix.
pub fn gat_forward(x: &Tensor, graph: &StockGraph, layer: &GatLayer, store: &ParamStore) -> Result<(Tensor, Vec<Tensor>), ModelError> {
    let (rows, cols) = x.dims2()?;
    if rows != graph.len() {
        return Err(ModelError::Misaligned {
            nodes: graph.len(),
            rows,
        });
    }
    if cols != layer.in_dim {
        return Err(ModelError::Width {
            what: "gat input",
            expected: layer.in_dim,
            got: cols,
        });
    }
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = layer.forward(&tape, store, xv, &graph.mask())?;
    Ok((out.output.value(), out.attention.iter().map(|a| a.value()).collect()))
}

/// `p = sigmoid(z·w + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub in_dim: usize,
    /// `[in_dim, 1]`
    pub weight: ParamId,
    /// `[1, 1]`
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn init(store: &mut ParamStore, prefix: &str, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            in_dim,
            weight: store.insert(format!("{prefix}.weight"), uniform(rng, &[in_dim, 1], bound)),
            bias: store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, 1])),
        }
    }

    /// `z: N × in_dim` to `N × 1` probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, z: Var<'t>) -> Result<Var<'t>, ModelError> {
        let n = z.shape()[0];
        let logits = tape.matmul(z, tape.param(store, self.weight))?;
        let bias = tape.tile_rows(tape.param(store, self.bias), n)?;
        Ok(tape.sigmoid(tape.add(logits, bias)?))
    }
}

/// Positive-movement probability for every row of `z`.
pub fn classify(z: &Tensor, head: &ClassifierHead, store: &ParamStore) -> Result<Vec<f64>, ModelError> {
    let (_, cols) = z.dims2()?;
    if cols != head.in_dim {
        return Err(ModelError::Width {
            what: "classifier input",
            expected: head.in_dim,
            got: cols,
        });
    }
    let tape = Tape::new();
    let zv = tape.leaf(z.clone());
    Ok(head.forward(&tape, store, zv)?.value().into_data())
}

/// Writes one day's attention as sparse triplets, one line per nonzero
/// weight: `date head source target weight`, with tickers for node names.
pub fn write_attention<W: Write>(
    out: &mut W,
    date: NaiveDate,
    tickers: &[String],
    attention: &[Tensor],
) -> std::io::Result<()> {
    let n = tickers.len();
    for (h, alpha) in attention.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                let a = alpha.data()[i * n + j];
                if a != 0.0 {
                    writeln!(out, "{date} {h} {} {} {a:.17e}", tickers[i], tickers[j])?;
                }
            }
        }
    }
    Ok(())
}
