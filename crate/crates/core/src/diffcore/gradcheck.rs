use crate::diffcore::tape::{OpKind, Precision, Tape, Var};
use crate::diffcore::tensor::Tensor;
use crate::error::{invalid, Result};

/// Maximum relative disagreement between reverse-mode and central-difference
/// gradients of a scalar objective, over every element of every input:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `objective` receives one trainable leaf per entry of `point`.
pub fn grad_check<F>(point: &[Tensor], h: f64, objective: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_fault(point, h, None, objective)
}

#[doc(hidden)]
pub fn grad_check_with_fault<F>(
    point: &[Tensor],
    h: f64,
    fault: Option<OpKind>,
    objective: F,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return invalid(format!("finite-difference step {h} outside [1e-7, 1e-3]"));
    }
    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_precision(Precision::Double);
        let vars = pt
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = objective(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return invalid("grad_check objective must be scalar");
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::with_precision(Precision::Double);
    tape.inject_fault(fault);
    let vars = point
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = objective(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return invalid("grad_check objective must be scalar");
    }
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut pt = point.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v);
        for j in 0..pt[i].len() {
            let x0 = pt[i].data()[j];
            pt[i].data_mut()[j] = x0 + h;
            let fp = eval(&pt)?;
            pt[i].data_mut()[j] = x0 - h;
            let fm = eval(&pt)?;
            pt[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
