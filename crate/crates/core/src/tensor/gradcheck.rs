//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative errors below this denominator are measured absolutely.
const ABS_FLOOR: f64 = 1e-8;
/// How many times a step straddling a ReLU kink is shrunk by 10x before giving up.
const KINK_RETRIES: usize = 3;

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    /// Worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates whose step had to be shrunk to stay on one side of every kink.
    pub kink_adjusted: usize,
    /// Coordinates sitting on a kink even at the smallest step; excluded from the max.
    pub kink_skipped: usize,
    /// `(input index, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], grads: bool) -> Result<(f64, u64, Tape<f64>, Vec<Var>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().with_kink_tracking();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), grads))
        .collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Contract("grad_check: function must return a scalar".into()));
    }
    let value = tape.value(root).item();
    if grads {
        tape.backward(root)?;
    }
    Ok((value, tape.kink_fingerprint(), tape, vars))
}

/// Compare analytic gradients of a scalar function with central differences
/// `(f(x+h) - f(x-h)) / 2h` at every coordinate of every input, extrapolated from
/// steps `h` and `h/2`.
///
/// Steps that change the ReLU activation pattern are retried with a smaller `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let (_, base_kinks, tape, vars) = evaluate(&f, inputs, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut step = h;
            let mut numeric = None;
            for attempt in 0..=KINK_RETRIES {
                let mut diffs = [0.0; 2];
                let mut smooth = true;
                for (d, s) in diffs.iter_mut().zip([step, step / 2.0]) {
                    work[i].data_mut()[j] = x0 + s;
                    let (fp, kp, _, _) = evaluate(&f, &work, false)?;
                    work[i].data_mut()[j] = x0 - s;
                    let (fm, km, _, _) = evaluate(&f, &work, false)?;
                    work[i].data_mut()[j] = x0;
                    smooth &= kp == base_kinks && km == base_kinks;
                    *d = (fp - fm) / (2.0 * s);
                }
                if smooth {
                    if attempt > 0 {
                        report.kink_adjusted += 1;
                    }
                    // Richardson: cancels the h^2 truncation term
                    numeric = Some((4.0 * diffs[1] - diffs[0]) / 3.0);
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.kink_skipped += 1;
                continue;
            };
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.coords_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
