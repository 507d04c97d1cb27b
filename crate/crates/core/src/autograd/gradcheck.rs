//! Central finite differences, the reference every backward rule is checked
//! against.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Denominator floor for [`max_rel_error`]; below this magnitude an entry is
/// compared absolutely.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("non-finite function value at element {i}")));
        }
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `maxᵢ |aᵢ − bᵢ| / max(|aᵢ|, |bᵢ|, GRAD_REL_FLOOR)`.
pub fn max_rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_error shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(GRAD_REL_FLOOR)
        })
        .fold(0.0, f64::max)
}

/// Builds `f` on a fresh tape with every input as a trainable leaf, runs the
/// reverse pass, and compares each input gradient to central differences
/// with step `h`. Returns the worst relative error over all inputs.
pub fn check_gradients<T, F>(inputs: &[Tensor<T>], h: T, f: F) -> Result<f64>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var<'_, T>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.constant(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                Ok(f(&tape, &vars)?.value().item())
            },
            input,
            h,
        )?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::from_vec(vec![1.0, -3.0, 0.5]);
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::from_vec(vec![0.0]);
        let r = finite_diff_grad(|t| Ok(1.0 / (t.data()[0] - 1e-5)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
