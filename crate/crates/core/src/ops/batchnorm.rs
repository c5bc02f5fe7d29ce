//! Per-channel batch normalization over (batch, height, width).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Values saved by [`batch_norm_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormContext<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

fn check<T: Scalar>(op: &'static str, x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = x.dims4(op)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!(
                "{c} channels but gamma {:?} and beta {:?}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((b, c, h * w))
}

fn affine<T: Scalar>(x: &Tensor<T>, c: usize, area: usize, scale: &[T], shift: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(area).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = *v * scale[ch] + shift[ch]);
    }
    out
}

/// Normalizes with batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormContext<T>)> {
    let (b, c, area) = check("batch_norm", x, gamma, beta)?;
    let count = T::from_usize(b * area).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for (i, plane) in x.data().chunks(area).enumerate() {
        mean[i % c] = mean[i % c] + plane.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for (i, plane) in x.data().chunks(area).enumerate() {
        let m = mean[i % c];
        var[i % c] = var[i % c] + plane.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    let eps = T::from_f64_lossy(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let shift: Vec<T> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
    let normalized = affine(x, c, area, &inv_std, &shift);
    let out = affine(&normalized, c, area, gamma.data(), beta.data());
    Ok((
        out,
        BatchNormContext {
            normalized,
            inv_std,
            mean,
            var,
        },
    ))
}

/// Normalizes with fixed (running) statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (_, c, area) = check("batch_norm", x, gamma, beta)?;
    let eps = T::from_f64_lossy(eps);
    let scale: Vec<T> = (0..c)
        .map(|i| gamma.data()[i] / (running_var.data()[i] + eps).sqrt())
        .collect();
    let shift: Vec<T> = (0..c)
        .map(|i| beta.data()[i] - running_mean.data()[i] * scale[i])
        .collect();
    Ok(affine(x, c, area, &scale, &shift))
}

pub fn batch_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    gamma: &Tensor<T>,
    ctx: &BatchNormContext<T>,
) -> Result<BatchNormGrads<T>> {
    grad_out.expect_same_shape(&ctx.normalized, "batch_norm_backward")?;
    let (b, c, h, w) = grad_out.dims4("batch_norm_backward")?;
    let area = h * w;
    let count = T::from_usize(b * area).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (g, xh)) in grad_out
        .data()
        .chunks(area)
        .zip(ctx.normalized.data().chunks(area))
        .enumerate()
    {
        let ch = i % c;
        dbeta[ch] = dbeta[ch] + g.iter().copied().sum::<T>();
        dgamma[ch] = dgamma[ch] + g.iter().zip(xh).map(|(&a, &x)| a * x).sum::<T>();
    }
    // dx = gamma * inv_std / N * (N dy - sum(dy) - xhat * sum(dy * xhat))
    let mut dx = grad_out.clone();
    for (i, (plane, xh)) in dx
        .data_mut()
        .chunks_mut(area)
        .zip(ctx.normalized.data().chunks(area))
        .enumerate()
    {
        let ch = i % c;
        let k = gamma.data()[ch] * ctx.inv_std[ch] / count;
        for (v, &x) in plane.iter_mut().zip(xh) {
            *v = k * (count * *v - dbeta[ch] - x * dgamma[ch]);
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}
