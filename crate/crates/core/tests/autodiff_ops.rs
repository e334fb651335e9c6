//! Every differentiable op against central finite differences on random
//! inputs, plus softmax and determinism properties.

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use relgat::autodiff::{grad_check, AutodiffError, Axis, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use relgat::seed;

const SEEDS: u64 = 100;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so kinked ops are smooth within one step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, weights: &Tensor) -> Result<Var<'t>, AutodiffError> {
    let w = tape.leaf(weights.reshaped(y.shape())?);
    Ok(tape.sum(tape.mul(y, w)?))
}

/// Checks `op` at random inputs with the given shapes for `SEEDS` seeds.
fn check_op<F>(name: &str, shapes: &[&[usize]], smooth: bool, op: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AutodiffError>,
{
    for s in 0..SEEDS {
        let mut rng = seed::stream(s, name);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(k, shape)| {
                let t = if smooth { random(&mut rng, shape, -1.5, 1.5) } else { away_from_zero(&mut rng, shape) };
                store.insert(format!("x{k}"), t)
            })
            .collect();
        let out_len = {
            let tape = Tape::new();
            let vars: Vec<_> = ids.iter().map(|&id| tape.param(&store, id)).collect();
            op(&tape, &vars).unwrap().value().len()
        };
        let weights = random(&mut rng, &[out_len], -1.0, 1.0);
        let report = grad_check(
            &store,
            |tape, st| {
                let vars: Vec<_> = ids.iter().map(|&id| tape.param(st, id)).collect();
                weighted_sum(tape, op(tape, &vars)?, &weights)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{name} seed {s}\n{report}");
    }
}

#[test]
fn matmul_gradients() {
    check_op("matmul", &[&[3, 4], &[4, 2]], true, |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_binary_gradients() {
    check_op("add", &[&[3, 4], &[3, 4]], true, |t, v| t.add(v[0], v[1]));
    check_op("sub", &[&[3, 4], &[3, 4]], true, |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], true, |t, v| t.mul(v[0], v[1]));
}

#[test]
fn elementwise_unary_gradients() {
    check_op("scale", &[&[2, 5]], true, |t, v| Ok(t.scale(v[0], -1.7)));
    check_op("shift", &[&[2, 5]], true, |t, v| Ok(t.shift(v[0], 0.3)));
    check_op("tanh", &[&[2, 5]], true, |t, v| Ok(t.tanh(v[0])));
    check_op("sigmoid", &[&[2, 5]], true, |t, v| Ok(t.sigmoid(v[0])));
    check_op("exp", &[&[2, 5]], true, |t, v| Ok(t.exp(v[0])));
    check_op("leaky_relu", &[&[2, 5]], false, |t, v| Ok(t.leaky_relu(v[0], 0.2)));
    check_op("elu", &[&[2, 5]], false, |t, v| Ok(t.elu(v[0], 1.0)));
}

#[test]
fn shape_op_gradients() {
    check_op("concat_cols", &[&[3, 2], &[3, 4]], true, |t, v| t.concat(&[v[0], v[1]], Axis::Cols));
    check_op("concat_rows", &[&[2, 3], &[4, 3]], true, |t, v| t.concat(&[v[0], v[1]], Axis::Rows));
    check_op("slice_cols", &[&[3, 5]], true, |t, v| t.slice_cols(v[0], 1, 4));
    check_op("slice_rows", &[&[5, 3]], true, |t, v| t.slice_rows(v[0], 2, 5));
    check_op("transpose", &[&[3, 5]], true, |t, v| t.transpose(v[0]));
    check_op("tile_rows", &[&[1, 4]], true, |t, v| t.tile_rows(v[0], 3));
    check_op("row_scale", &[&[4, 3], &[4, 1]], true, |t, v| t.row_scale(v[0], v[1]));
}

#[test]
fn reduction_gradients() {
    check_op("sum", &[&[3, 4]], true, |t, v| Ok(t.sum(v[0])));
    check_op("mean", &[&[3, 4]], true, |t, v| Ok(t.mean(v[0])));
}

#[test]
fn softmax_gradients() {
    check_op("softmax", &[&[3, 4]], true, |t, v| t.softmax(v[0], None));
    let mask = [true, false, true, true, true, true, false, false, false, true, true, true];
    check_op("softmax_masked", &[&[3, 4]], true, move |t, v| t.softmax(v[0], Some(&mask)));
}

#[test]
fn bilinear_gradients() {
    check_op("bilinear", &[&[3, 4], &[4, 2, 5], &[3, 5]], true, |t, v| t.bilinear(v[0], v[1], v[2]));
}

#[test]
fn bce_gradients() {
    let targets = [1.0, 0.0, 0.0, 1.0, 1.0];
    check_op("bce", &[&[5, 1]], true, move |t, v| t.bce(t.sigmoid(v[0]), &targets));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = seed::stream(11, "determinism");
        let tape = Tape::new();
        let x = tape.leaf(random(&mut rng, &[6, 5], -1.0, 1.0));
        let w = tape.leaf(random(&mut rng, &[5, 3], -1.0, 1.0));
        let y = tape.softmax(tape.tanh(tape.matmul(x, w).unwrap()), None).unwrap();
        y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1usize..5,
        cols in 1usize..7,
        values in prop::collection::vec(-50.0f64..50.0, 36),
        mask_bits in prop::collection::vec(any::<bool>(), 36),
    ) {
        let n = rows * cols;
        let data: Vec<f64> = values.iter().cycle().take(n).copied().collect();
        let mut mask: Vec<bool> = mask_bits.iter().cycle().take(n).copied().collect();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(rows, cols, data).unwrap());
        let p = tape.softmax(x, Some(&mask)).unwrap().value();
        for r in 0..rows {
            let mut total = 0.0;
            for c in 0..cols {
                let v = p.at2(r, c);
                prop_assert!(v >= 0.0);
                if !mask[r * cols + c] {
                    prop_assert_eq!(v, 0.0);
                }
                total += v;
            }
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }
}
