//! Central finite-difference checks of tape gradients.

use super::{AutodiffError, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Worst entry found by a check.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let err = relative_error(analytic, numeric);
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = label();
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }

    pub fn merge(&mut self, other: GradCheck) {
        let checked = self.checked + other.checked;
        if other.max_rel_error > self.max_rel_error || self.checked == 0 {
            *self = other;
        }
        self.checked = checked;
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a fresh tape.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |vals: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars = vals.iter().map(|v| tape.leaf(v.clone(), false)).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect::<Result<Vec<_>, _>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let grad = tape.grad(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[which].rows(), inputs[which].cols()));
        for idx in 0..inputs[which].len() {
            let base = inputs[which].data()[idx];
            work[which].data_mut()[idx] = base + FD_STEP;
            let up = eval(&work)?;
            work[which].data_mut()[idx] = base - FD_STEP;
            let down = eval(&work)?;
            work[which].data_mut()[idx] = base;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(|| format!("input {which}[{idx}]"), grad.data()[idx], numeric);
        }
    }
    Ok(report)
}
