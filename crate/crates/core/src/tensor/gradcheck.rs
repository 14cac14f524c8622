//! Central finite-difference gradient checking, the reference oracle for
//! every differentiable operation in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of the per-coordinate relative error. Coordinates whose
/// analytic and numeric gradients are both below it are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::shape("finite_diff_check needs a scalar output", value.shape(), &[]));
    }
    Ok(value.data()[0])
}

/// Perturbs every coordinate of every input by `±eps` and compares the
/// central difference against the tape gradient of `f`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + eps;
            let plus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = original - eps;
            let minus = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[j], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite(format!("gradient check at input {i} index {j}")));
            }
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = analytic[j];
                report.numeric = numeric;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Reduces `x` to a scalar by a fixed random linear functional, so that every
/// output element contributes a distinct weight to the checked gradient.
pub fn random_projection(tape: &Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x);
    let weights = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(weights);
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}

/// Uniform random tensor in `[-scale, scale)`.
pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}
