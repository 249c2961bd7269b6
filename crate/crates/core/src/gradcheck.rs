//! Central finite-difference checks of tape gradients.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest relative error over all checked entries.
    pub max_rel_err: f64,
    /// Entry with the largest error: (input, flat index, analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar `f(inputs)` against central
/// differences with step `h`. At most `max_entries` entries per input are
/// probed, spread evenly over the flat index range.
pub fn check<F>(inputs: &[Tensor], h: f64, max_entries: usize, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    check_with_floor(inputs, h, max_entries, 1e-6, f)
}

/// As [`check`], with the magnitude below which errors count as absolute.
pub fn check_with_floor<F>(inputs: &[Tensor], h: f64, max_entries: usize, floor: f64, f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let stride = (n / max_entries.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = rel_err(a, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report
}
