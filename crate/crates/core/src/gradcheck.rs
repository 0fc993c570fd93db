//! Central-difference verification of reverse-mode gradients.

use crate::tape::{Tape, Var};
use crate::{Result, Tensor};

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of a scalar composition `f` against
/// central differences with step `eps`, for every element of every input.
///
/// `f` receives a fresh tape with `inputs` recorded as leaves (in order)
/// and must return a one-element value.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for (e, &a) in analytic.iter().enumerate() {
            let orig = probe[k].data()[e];
            probe[k].data_mut()[e] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[e] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
