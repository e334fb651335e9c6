use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, ParamStore, Tape, Tensor, Var};

/// Settings for comparing tape gradients with central finite differences.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// both numerically zero compare on an absolute scale.
    pub denominator_floor: f64,
    /// Check at most this many coordinates per parameter (sampled), or all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            denominator_floor: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Result for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let status = if p.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:<24} coords={:<6} max_rel={:.3e} max_abs={:.3e} worst={}",
                p.name, p.checked, p.max_rel_error, p.max_abs_error, p.worst_index
            )?;
        }
        write!(
            f,
            "overall max relative error {:.3e} (tolerance {:.1e}): {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<E, F>(f: &F, store: &ParamStore) -> Result<f64, E>
where
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, E>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    loss.item().ok_or_else(|| AutodiffError::NonScalarLoss(loss.shape()).into())
}

/// Compares the tape gradient of the scalar `f` with respect to every
/// parameter in `store` against central finite differences.
pub fn grad_check<E, F>(store: &ParamStore, f: F, options: &GradCheckOptions) -> Result<GradCheckReport, E>
where
    E: From<AutodiffError>,
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>, E>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    {
        let tape = Tape::new();
        let loss = f(&tape, &analytic_store)?;
        tape.backward_into(loss, &mut analytic_store)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let len = store.get(id).len();
        let coords: Vec<usize> = match options.max_coords_per_param {
            Some(max) if max < len => {
                let mut c = sample(&mut rng, len, max).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let analytic = analytic_store.get(id).grad().unwrap_or(&[]).to_vec();
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for idx in coords {
            let original = probe.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = original + options.step;
            let plus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[idx] = original - options.step;
            let minus = evaluate(&f, &probe)?;
            probe.get_mut(id).data_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.get(idx).copied().unwrap_or(0.0);
            let rel = relative_error(a, numeric, options.denominator_floor);
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            if rel > check.max_rel_error || rel.is_nan() {
                check.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = idx;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        params,
        tolerance: options.tolerance,
    })
}

/// Single-input form of [`grad_check`]: checks `f` at `point`.
pub fn grad_check_point<F>(f: F, point: &Tensor, options: &GradCheckOptions) -> Result<GradCheckReport, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, AutodiffError>,
{
    let mut store = ParamStore::new();
    let id = store.insert("x", point.detached());
    grad_check(
        &store,
        |tape, s| {
            let x = tape.param(s, id);
            f(tape, x)
        },
        options,
    )
}
