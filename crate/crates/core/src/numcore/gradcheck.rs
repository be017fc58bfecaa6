//! Central finite-difference gradient checking.

use super::tape::{NodeId, Tape};
use super::{Matrix, NumError};

/// Outcome of a [`grad_check`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked coordinate.
    pub max_relative_error: f64,
    /// `(parameter index, row, col)` of the worst coordinate.
    pub worst: Option<(usize, usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation moved some ReLU input across zero.
    pub skipped: usize,
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` receives a fresh tape and one parameter node per entry of `params`
/// and must return a scalar node. For every coordinate the relative error is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`. Coordinates
/// whose `±h` perturbations land on opposite sides of a ReLU kink are
/// skipped, since the one-sided derivatives disagree there.
pub fn grad_check<F, E>(f: F, params: &[Matrix], h: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, E>,
    E: From<NumError>,
{
    if !(h > 0.0) {
        return Err(NumError::StepSize(h).into());
    }
    let eval = |values: &[Matrix]| -> Result<(Tape, Vec<NodeId>, NodeId), E> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &ids)?;
        Ok((tape, ids, out))
    };

    let (tape, ids, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = ids.iter().map(|&id| grads.wrt(id).clone()).collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut perturbed = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for r in 0..param.rows() {
            for c in 0..param.cols() {
                let x = param.get(r, c);
                perturbed[pi] = param.with_entry(r, c, x + h);
                let (plus_tape, _, plus_out) = eval(&perturbed)?;
                perturbed[pi] = param.with_entry(r, c, x - h);
                let (minus_tape, _, minus_out) = eval(&perturbed)?;
                perturbed[pi] = param.clone();

                if crosses_kink(&plus_tape, &minus_tape) {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (plus_tape.value(plus_out).get(0, 0)
                    - minus_tape.value(minus_out).get(0, 0))
                    / (2.0 * h);
                let a = analytic[pi].get(r, c);
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                report.checked += 1;
                if rel > report.max_relative_error || report.worst.is_none() {
                    report.max_relative_error = rel;
                    report.worst = Some((pi, r, c));
                }
            }
        }
    }
    Ok(report)
}

fn crosses_kink(plus: &Tape, minus: &Tape) -> bool {
    plus.relu_inputs()
        .iter()
        .zip(minus.relu_inputs())
        .any(|(p, m)| {
            p.data()
                .iter()
                .zip(m.data())
                .any(|(&a, &b)| (a > 0.0) != (b > 0.0))
        })
}
