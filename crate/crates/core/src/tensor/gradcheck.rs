//! Central finite-difference gradient checking (64-bit only).

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::tensor::Fault;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-6;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares backward() against central differences for every element of
/// every input. `build` must map the bound inputs to a scalar loss.
pub fn check<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(inputs, None, STEP, None, build)
}

/// Like [`check`] but probes at most `max_per_input` evenly spaced elements of
/// each input, optionally with a fault injected into the analytic path.
pub fn check_with<F>(
    inputs: &[Tensor<f64>],
    max_per_input: Option<usize>,
    step: f64,
    fault: Option<Fault>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gt| gt.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for j in (0..n).step_by(stride) {
            let orig = input.data()[j];
            work[i] = with_element(input, j, orig + step);
            let plus = eval(&work)?;
            work[i] = with_element(input, j, orig - step);
            let minus = eval(&work)?;
            work[i] = input.clone();
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[i][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

fn with_element(t: &Tensor<f64>, index: usize, value: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}
