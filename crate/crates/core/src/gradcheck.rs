//! Central finite differences, the oracle every analytic gradient is
//! checked against.

use crate::scalar::Scalar;
use crate::tensor::Tensor4;

/// `(f(x + ε·eᵢ) − f(x − ε·eᵢ)) / 2ε` for every element `i` of `x`.
pub fn finite_difference_grad<T, F>(mut f: F, x: &Tensor4<T>, eps: T) -> Tensor4<T>
where
    T: Scalar,
    F: FnMut(&Tensor4<T>) -> T,
{
    assert!(eps > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    probe.clear_grad();
    let two = T::one() + T::one();
    let mut out = Tensor4::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (two * eps);
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`. The floor keeps gradients that are
/// zero up to round-off from reporting huge relative errors.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst [`relative_error`] over paired slices.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.as_f64(), n.as_f64(), floor))
        .fold(0.0, f64::max)
}
