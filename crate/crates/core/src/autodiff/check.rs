use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative disagreement between reverse-mode gradients and central
/// differences, over every entry of every parameter.
///
/// The error of one entry is `|analytic - numeric| / max(1e-12, |analytic| + |numeric|)`.
/// With no parameter entries the result is 0.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(f, params, step, None)
}

/// [`grad_check`] with a deliberately broken backward rule for `fault`.
#[doc(hidden)]
pub fn grad_check_with_fault<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    fault: Option<OpKind>,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {step}")));
    }

    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|p| t.param(p.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for e in 0..grad.numel() {
            let original = work[pi].data()[e];
            work[pi].data_mut()[e] = original + step;
            let plus = evaluate(&work)?;
            work[pi].data_mut()[e] = original - step;
            let minus = evaluate(&work)?;
            work[pi].data_mut()[e] = original;

            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            let a = grad.data()[e];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
