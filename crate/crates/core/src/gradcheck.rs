//! Finite-difference gradient oracles.
//!
//! These evaluate a scalar function twice per input element and are
//! independent of every backward implementation in the crate.

use crate::tensor::{Scalar, Tensor};

/// Central-difference estimate of `d f / d x` at `x`:
/// `(f(x + step e_i) - f(x - step e_i)) / (2 step)` for each element `i`.
pub fn central_difference<T: Scalar>(
    x: &Tensor<T>,
    step: f64,
    mut f: impl FnMut(&Tensor<T>) -> T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let h = T::from_f64_lossy(step);
    let two_h = h + h;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / two_h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `||a - b||_2 / max(||a||_2, ||b||_2)`, or 0 when both are zero.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let norm = |t: &mut dyn Iterator<Item = f64>| t.map(|v| v * v).sum::<f64>().sqrt();
    let to64 = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let diff = norm(&mut a.data().iter().zip(b.data()).map(|(x, y)| to64(x) - to64(y)));
    let scale = norm(&mut a.data().iter().map(to64)).max(norm(&mut b.data().iter().map(to64)));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
