use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / B` with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (batch, classes) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for a batch of {batch}", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Label {
            index,
            label,
            classes,
        });
    }
    let inv_batch = T::one() / T::from_usize(batch).unwrap();
    let mut grad = Vec::with_capacity(batch * classes);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: T = exps.iter().copied().sum();
        total = total + (sum.ln() - (row[label] - max));
        for (k, e) in exps.into_iter().enumerate() {
            let p = e / sum;
            let target = if k == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_batch);
        }
    }
    Ok((total * inv_batch, Tensor::new(vec![batch, classes], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = Tensor::<f64>::zeros(vec![3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn large_correct_logit_is_stable() {
        let mut logits = Tensor::<f32>::zeros(vec![1, 10]);
        logits.data_mut()[3] = 1000.0;
        let (loss, grad) = softmax_cross_entropy(&logits, &[3]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(grad.all_finite());
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Tensor::<f32>::zeros(vec![2, 3]);
        let err = softmax_cross_entropy(&logits, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Label { index: 1, label: 3, classes: 3 }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor::<f64>::randn(vec![4, 6], 2.0, &mut rng);
        let labels = [1, 0, 5, 3];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let numeric = central_difference(&logits, 1e-5, |l| softmax_cross_entropy(l, &labels).unwrap().0);
        assert!(relative_error(&grad, &numeric) < 1e-6);
    }
}
