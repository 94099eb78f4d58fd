//! Central finite-difference checks of tape gradients.

use super::tape::{ParamSet, Tape, Var};

/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding compare by absolute difference instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Parameter name and flat element index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compare the tape gradient of the scalar built by `loss` against central
/// differences with step `h`, for every element of every parameter.
pub fn check_gradients<F>(params: &mut ParamSet, h: f64, loss: F) -> GradCheck
where
    F: Fn(&mut Tape) -> Var,
{
    let mut grads = params.zero_grads();
    {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape);
        tape.backward(l, &mut grads);
    }
    let eval = |params: &ParamSet| {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let mut report = GradCheck {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for p in 0..params.len() {
        let id = super::tape::ParamId(p);
        for k in 0..params.get(id).len() {
            let original = params.get(id).as_slice().expect("standard layout")[k];
            params.get_mut(id).as_slice_mut().expect("standard layout")[k] = original + h;
            let plus = eval(params);
            params.get_mut(id).as_slice_mut().expect("standard layout")[k] = original - h;
            let minus = eval(params);
            params.get_mut(id).as_slice_mut().expect("standard layout")[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[p].as_slice().expect("standard layout")[k];
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((params.name(id).to_string(), k));
                }
            }
        }
    }
    report
}
