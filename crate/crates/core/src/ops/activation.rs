use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Masks `grad_out` by `saved_input > 0`. The subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(saved_input, "relu_backward", |g, x| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_masks_including_origin() {
        let x = Tensor::<f32>::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let g = Tensor::full(vec![3], 5.0);
        assert_eq!(relu_backward(&g, &x).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let x = Tensor::<f32>::zeros(vec![3]);
        let g = Tensor::zeros(vec![4]);
        assert!(relu_backward(&g, &x).is_err());
    }

    proptest! {
        #[test]
        fn rectifier_identity(values in prop::collection::vec(-1e30f32..1e30, 1..64)) {
            let x = Tensor::new(vec![values.len()], values).unwrap();
            let diff = relu(&x).sub(&relu(&x.scale(-1.0))).unwrap();
            prop_assert_eq!(diff, x);
        }
    }
}
