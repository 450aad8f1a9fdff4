//! Central finite-difference verification of tape gradients (64-bit only).

use crate::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Perturbation `h` of the central difference `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor of the relative error, so that gradients which are
    /// zero up to rounding compare by absolute difference instead.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-4, floor: 1e-6, max_elements: None }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn sample_indices(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            if m == 0 {
                return Vec::new();
            }
            (0..m).map(|i| i * len / m + (len / m) / 2).map(|i| i.min(len - 1)).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// finite differences for every (sampled) element of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars);
        assert_eq!(out.numel(), 1, "gradient check needs a scalar output");
        let grads = tape.backward(out);
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in sample_indices(input.len(), cfg.max_elements) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - cfg.step;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i].data()[e];
            let rel = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch { input: i, element: e, analytic: a, numeric, rel_error: rel });
            }
        }
    }
    report
}
