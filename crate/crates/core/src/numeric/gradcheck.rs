//! Central finite-difference gradient checking.

use super::params::{Bound, ParameterSet};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale instead of amplifying rounding noise.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of `forward` against central differences
/// with step `h`, for every scalar entry of every tensor in `params`.
pub fn check<F>(params: &ParameterSet, h: f64, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &Bound) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = forward(&tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParameterSet| -> Result<f64> {
        let t = Tape::new();
        let b = p.bind_frozen(&t);
        let l = forward(&t, &b)?;
        Ok(t.scalar(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let analytic = grads
            .get(bound[id])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = params.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((params.name(id).to_string(), i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
