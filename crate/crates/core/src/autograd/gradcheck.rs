//! Central finite-difference gradient checks.

use super::tape::{ParamStore, Tape, Var};
use crate::error::Result;

/// Gradients smaller than this are compared on an absolute scale.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares [`Tape::backward`] against central differences with step `h` for
/// every scalar of every parameter. `build` must be deterministic: it is
/// re-run on perturbed parameters and must record the same graph each time.
pub fn check_gradients<F>(params: &ParamStore, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = build(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut work = params.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((params.name(id).to_string(), i));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
