//! Central finite-difference checking of tape gradients at float64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(input index, flat element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compare analytic and central-difference gradients of `f` at `inputs`.
///
/// Non-scalar outputs are reduced to `sum(out ⊙ R)` with `R` drawn uniformly
/// from `[-1, 1]` using `seed`, which exercises every output entry with a
/// distinct weight.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradients_with_step(inputs, seed, DEFAULT_STEP, f)
}

pub fn check_gradients_with_step<F>(
    inputs: &[Tensor<f64>],
    seed: u64,
    step: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradients_sampled(inputs, seed, step, usize::MAX, f)
}

/// Like [`check_gradients_with_step`] but probes at most `per_input`
/// elements of each input, chosen at random from `seed`. Every input is
/// still exercised; large models stay affordable.
pub fn check_gradients_sampled<F>(
    inputs: &[Tensor<f64>],
    seed: u64,
    step: f64,
    per_input: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut projection: Option<Tensor<f64>> = None;

    let mut eval = |values: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let shape = out.shape();
        let loss = if shape.is_empty() {
            out
        } else {
            let r = projection.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
                Tensor::from_fn(shape.clone(), |_| rng.random_range(-1.0..1.0))
            });
            out.mul(tape.constant(r.clone()))?.sum()?
        };
        let value = loss.value().item();
        let grads = if want_grads {
            let g = tape.backward(loss)?;
            vars.iter().map(|&v| g.get_or_zeros(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    let mut picker = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for (which, input) in inputs.iter().enumerate() {
        let indices: Vec<usize> = if input.len() <= per_input {
            (0..input.len()).collect()
        } else {
            rand::seq::index::sample(&mut picker, input.len(), per_input).into_vec()
        };
        for idx in indices {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + step;
            let (plus, _) = eval(&probe, false)?;
            probe[which].data_mut()[idx] = orig - step;
            let (minus, _) = eval(&probe, false)?;
            probe[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].data()[idx];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((which, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
