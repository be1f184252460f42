//! Finite-difference gradient checking.
//!
//! Shared by unit tests and the acceptance suite. The checks build a fresh tape
//! for every function evaluation, so they never reuse the analytic path they
//! verify.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Uniform samples in `[-scale, scale]`.
pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..=scale))
}

fn eval<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).item()
}

/// Analytic gradients of a scalar function with respect to every input.
pub fn analytic_gradients<F>(inputs: &[Tensor], f: &F) -> Vec<Tensor>
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Central finite-difference gradient with respect to input `which`.
pub fn numeric_gradient<F>(inputs: &[Tensor], which: usize, step: f64, f: &F) -> Tensor
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut work = inputs.to_vec();
    let n = inputs[which].numel();
    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = inputs[which].data()[i];
        work[which].data_mut()[i] = orig + step;
        let up = eval(&work, f);
        work[which].data_mut()[i] = orig - step;
        let down = eval(&work, f);
        work[which].data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * step);
    }
    Tensor::from_vec(inputs[which].shape(), out)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.zip_map(numeric, |a, b| a - b).norm();
    let scale = analytic.norm().max(numeric.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Largest relative error between analytic and numeric gradients over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_gradients(inputs, &f);
    (0..inputs.len())
        .map(|i| relative_error(&analytic[i], &numeric_gradient(inputs, i, step, &f)))
        .fold(0.0, f64::max)
}

/// Directional-derivative check: compares `∇f · d` with a central difference along `d`.
///
/// Cheap enough for inputs with many elements.
pub fn directional_relative_error<F>(inputs: &[Tensor], directions: &[Tensor], step: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let analytic = analytic_gradients(inputs, &f);
    let projected: f64 = analytic.iter().zip(directions).map(|(g, d)| g.dot(d)).sum();
    let shifted = |s: f64| -> Vec<Tensor> {
        inputs
            .iter()
            .zip(directions)
            .map(|(x, d)| x.zip_map(d, |a, b| a + s * b))
            .collect()
    };
    let numeric = (eval(&shifted(step), &f) - eval(&shifted(-step), &f)) / (2.0 * step);
    let scale = projected.abs().max(numeric.abs());
    if scale < 1e-12 {
        (projected - numeric).abs()
    } else {
        (projected - numeric).abs() / scale
    }
}

/// Panics when any input's gradient disagrees with finite differences by more than 1e-6.
pub fn check_gradients<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let err = max_relative_error(inputs, FD_STEP, f);
    assert!(err < 1e-6, "gradient check failed: relative error {err:e}");
}
