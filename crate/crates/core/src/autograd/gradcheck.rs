//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest total input size accepted by [`grad_check`].
pub const MAX_CHECK_ELEMENTS: usize = 512;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-element relative deviation between analytic and numeric gradients.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the tape's gradients of `op` against central differences.
///
/// The op's output is reduced to a scalar with fixed pseudo-random weights so
/// every output element contributes. Runs in `f64`; the kernels are the same
/// generic code the `f32` models execute.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    if total > MAX_CHECK_ELEMENTS {
        return Err(Error::invalid(format!(
            "grad_check accepts at most {MAX_CHECK_ELEMENTS} input elements, got {total}"
        )));
    }

    let eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|x| tape.leaf(x.clone().with_requires_grad(grad)))
            .collect();
        let out = op(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };

    let (mut tape, vars, out) = eval(inputs, true)?;
    let mut rng = SplitMix64::seed_from_u64(0x6772_6164);
    let weights: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let weighted = |t: &Tensor<f64>| -> f64 { t.data().iter().zip(&weights).map(|(a, b)| a * b).sum() };

    let w = tape.constant(Tensor::from_vec(tape.shape(out), weights.clone()));
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.gradients(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        tolerance,
        passed: true,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for (j, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[j].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        let mut numeric = vec![0.0; inputs[j].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[j].data()[i];
            perturbed[j].data_mut()[i] = orig + FD_STEP;
            let (t, _, o) = eval(&perturbed, false)?;
            let plus = weighted(t.value(o));
            perturbed[j].data_mut()[i] = orig - FD_STEP;
            let (t, _, o) = eval(&perturbed, false)?;
            let minus = weighted(t.value(o));
            perturbed[j].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * FD_STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Entries far below the largest gradient are compared on an absolute scale.
        let floor = (1e-3 * scale).max(1e-10);
        for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_input = j;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}
