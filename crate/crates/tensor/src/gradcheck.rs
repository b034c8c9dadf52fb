//! Central finite-difference verification of recorded backward rules.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Bound on `|analytic − numeric| / max(1, |numeric|)`.
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// Compare the analytic gradient of the scalar built by `f` against central
/// differences, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.with_value(|v| v.item()))
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < opts.tolerance) {
                report.failures.push(GradMismatch {
                    input: i,
                    element: j,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
