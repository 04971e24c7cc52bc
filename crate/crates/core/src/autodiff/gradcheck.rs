use super::tape::{Tape, Var};
use crate::error::{contract_err, Error, Result};
use crate::tensor::Tensor;

/// Compares the taped gradient of a scalar function against central finite
/// differences at `point`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone(), true)?;
        let y = tape.leaf_output(&f, x)?;
        tape.backward(y)?;
        tape.grad(x)
            .unwrap_or_else(|| Tensor::zeros(point.shape()))
    };

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false)?;
        let y = tape.leaf_output(&f, x)?;
        let v = tape.value(y).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric("non-finite value during grad_check".into()))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

impl Tape {
    fn leaf_output<F>(&mut self, f: &F, x: Var) -> Result<Var>
    where
        F: Fn(&mut Tape, Var) -> Result<Var>,
    {
        let y = f(self, x)?;
        if !self.value(y).is_scalar() {
            return Err(contract_err!(
                "grad_check needs a scalar function, got shape {:?}",
                self.shape(y)
            ));
        }
        Ok(y)
    }
}
