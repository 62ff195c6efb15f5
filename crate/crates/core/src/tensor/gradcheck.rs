//! Central finite-difference gradient checking.

use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

const EPS_FLOOR: f64 = 1e-12;

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the maximum relative error over all
/// coordinates: `|analytic - central| / (|analytic| + |central| + floor)`.
///
/// `build` constructs the scalar from a tracked input; it is re-evaluated
/// at `x ± h·e_i` for every coordinate.
pub fn finite_diff_check<E, F>(build: F, x: &Tensor<E>, h: f64) -> Result<f64>
where
    E: Element,
    F: Fn(&Tape<E>, &Var<E>) -> Result<Var<E>>,
{
    let eval = |t: &Tensor<E>| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(t.clone(), false);
        let out = build(&tape, &xv)?;
        let v = out.item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite value {v} in oracle")));
        }
        Ok(v)
    };

    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&tape, &xv)?;
        if out.with_value(|v| v.numel()) != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        out.backward()?;
        xv.grad_value()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i].as_f64();
        let mut plus = x.clone();
        plus.data_mut()[i] = E::from_f64(orig + h);
        let mut minus = x.clone();
        minus.data_mut()[i] = E::from_f64(orig - h);
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let a = analytic.data()[i].as_f64();
        let rel = (a - central).abs() / (a.abs() + central.abs() + EPS_FLOOR);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
