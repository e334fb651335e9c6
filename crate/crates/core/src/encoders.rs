//! Sequence encoders for price and score windows, and their bilinear fusion.
//!
//! Both encoders share one architecture: an LSTM over the window's daily rows
//! followed by temporal attention, `β = softmax(h_iᵀ·w)` over days and
//! `summary = Σ β_i h_i`. They run batched: every step is a `B × input`
//! matrix holding that day of the window for `B` samples.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::model::ModelError;

/// Uniform `(-bound, bound)` tensor.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

/// LSTM with temporal attention. Gate columns are ordered input, forget,
/// cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalEncoder {
    pub input: usize,
    pub hidden: usize,
    /// `[input, 4·hidden]`
    pub w_input: ParamId,
    /// `[hidden, 4·hidden]`
    pub w_hidden: ParamId,
    /// `[1, 4·hidden]`
    pub bias: ParamId,
    /// `[hidden, 1]` attention vector.
    pub attention: ParamId,
}

/// Batched encoder output.
#[derive(Debug, Clone)]
pub struct Encoded<'t> {
    /// `B × hidden` attention-weighted summary.
    pub summary: Var<'t>,
    /// `B × T` attention weights.
    pub attention: Var<'t>,
    /// Hidden state after each step, each `B × hidden`.
    pub states: Vec<Var<'t>>,
}

impl TemporalEncoder {
    /// Registers fresh parameters under `prefix`. Weights are drawn from
    /// `U(-1/√hidden, 1/√hidden)`; the forget-gate bias starts at 1.
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.insert(format!("{prefix}.w_input"), uniform(rng, &[input, 4 * hidden], bound));
        let w_hidden = store.insert(format!("{prefix}.w_hidden"), uniform(rng, &[hidden, 4 * hidden], bound));
        let mut b = Tensor::zeros(&[1, 4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.insert(format!("{prefix}.bias"), b);
        let attention = store.insert(format!("{prefix}.attention"), uniform(rng, &[hidden, 1], bound));
        Self {
            input,
            hidden,
            w_input,
            w_hidden,
            bias,
            attention,
        }
    }

    /// Runs the encoder over `steps`, one `B × input` matrix per day, oldest first.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, steps: &[Var<'t>]) -> Result<Encoded<'t>, ModelError> {
        let first = steps.first().ok_or(ModelError::EmptyWindow)?;
        let batch = first.shape()[0];
        let d = self.hidden;
        let w_in = tape.param(store, self.w_input);
        let w_h = tape.param(store, self.w_hidden);
        let bias = tape.tile_rows(tape.param(store, self.bias), batch)?;
        let attn = tape.param(store, self.attention);

        let mut states = Vec::with_capacity(steps.len());
        let mut state: Option<(Var<'t>, Var<'t>)> = None;
        for &x in steps {
            let mut pre = tape.add(tape.matmul(x, w_in)?, bias)?;
            if let Some((h, _)) = state {
                pre = tape.add(pre, tape.matmul(h, w_h)?)?;
            }
            let i = tape.sigmoid(tape.slice_cols(pre, 0, d)?);
            let f = tape.sigmoid(tape.slice_cols(pre, d, 2 * d)?);
            let g = tape.tanh(tape.slice_cols(pre, 2 * d, 3 * d)?);
            let o = tape.sigmoid(tape.slice_cols(pre, 3 * d, 4 * d)?);
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => tape.add(tape.mul(f, c_prev)?, ig)?,
                None => ig,
            };
            let h = tape.mul(o, tape.tanh(c))?;
            states.push(h);
            state = Some((h, c));
        }

        let logits = states
            .iter()
            .map(|&h| tape.matmul(h, attn))
            .collect::<Result<Vec<_>, _>>()?;
        let beta = tape.softmax(tape.concat(&logits, Axis::Cols)?, None)?;
        let mut summary: Option<Var<'t>> = None;
        for (t, &h) in states.iter().enumerate() {
            let weighted = tape.row_scale(h, tape.slice_cols(beta, t, t + 1)?)?;
            summary = Some(match summary {
                Some(s) => tape.add(s, weighted)?,
                None => weighted,
            });
        }
        Ok(Encoded {
            summary: summary.expect("at least one step"),
            attention: beta,
            states,
        })
    }

    /// Encodes a single window (`T` rows of width `input`) and returns the
    /// summary vector and the attention weights.
    pub fn encode(&self, store: &ParamStore, rows: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyWindow);
        }
        let tape = Tape::new();
        let mut steps = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != self.input {
                return Err(ModelError::Width {
                    what: "encoder input",
                    expected: self.input,
                    got: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite("encoder input"));
            }
            steps.push(tape.leaf(Tensor::matrix(1, self.input, row.to_vec())?));
        }
        let out = self.forward(&tape, store, &steps)?;
        Ok((out.summary.value().into_data(), out.attention.value().into_data()))
    }
}

/// Technical summary `q` of a `T × 3` window of price ratios.
pub fn encode_technical(
    price_feats: &[[f64; 3]],
    encoder: &TemporalEncoder,
    store: &ParamStore,
) -> Result<Vec<f64>, ModelError> {
    let rows: Vec<&[f64]> = price_feats.iter().map(|r| r.as_slice()).collect();
    Ok(encoder.encode(store, &rows)?.0)
}

/// Media summary `c` of a `T × 2` window of score ratios.
pub fn encode_media(media_feats: &[[f64; 2]], encoder: &TemporalEncoder, store: &ParamStore) -> Result<Vec<f64>, ModelError> {
    let rows: Vec<&[f64]> = media_feats.iter().map(|r| r.as_slice()).collect();
    Ok(encoder.encode(store, &rows)?.0)
}

/// Output nonlinearity of the fusion layer. `Identity` exposes the raw
/// bilinear form and exists for testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionActivation {
    Tanh,
    Identity,
}

/// `x_k = act(qᵀ · W[:, k, :] · c + b_k)` with `W: [d_q, d_out, d_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    pub q_dim: usize,
    pub c_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    /// `[1, out_dim]`
    pub bias: ParamId,
    pub activation: FusionActivation,
}

impl Fusion {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        q_dim: usize,
        c_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (q_dim as f64).sqrt();
        let weight = store.insert(format!("{prefix}.weight"), uniform(rng, &[q_dim, out_dim, c_dim], bound));
        let bias = store.insert(format!("{prefix}.bias"), uniform(rng, &[1, out_dim], bound));
        Self {
            q_dim,
            c_dim,
            out_dim,
            weight,
            bias,
            activation: FusionActivation::Tanh,
        }
    }

    /// Batched fusion of `q: B × d_q` and `c: B × d_c`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, q: Var<'t>, c: Var<'t>) -> Result<Var<'t>, ModelError> {
        let batch = q.shape()[0];
        let raw = tape.bilinear(q, tape.param(store, self.weight), c)?;
        let shifted = tape.add(raw, tape.tile_rows(tape.param(store, self.bias), batch)?)?;
        Ok(match self.activation {
            FusionActivation::Tanh => tape.tanh(shifted),
            FusionActivation::Identity => shifted,
        })
    }
}

/// Fuses one technical summary with one media summary.
pub fn fuse(q: &[f64], c: &[f64], fusion: &Fusion, store: &ParamStore) -> Result<Vec<f64>, ModelError> {
    for (what, expected, got) in [("fusion q", fusion.q_dim, q.len()), ("fusion c", fusion.c_dim, c.len())] {
        if expected != got {
            return Err(ModelError::Width { what, expected, got });
        }
    }
    let tape = Tape::new();
    let qv = tape.leaf(Tensor::matrix(1, q.len(), q.to_vec())?);
    let cv = tape.leaf(Tensor::matrix(1, c.len(), c.to_vec())?);
    Ok(fusion.forward(&tape, store, qv, cv)?.value().into_data())
}
