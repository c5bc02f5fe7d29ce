use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Max-pool output together with the flat input index chosen for each cell.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max over each `window` placed every `stride` cells, without padding.
/// Ties go to the first occurrence in row-major scan order.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<MaxPoolOutput<T>> {
    let (b, c, h, w) = input.dims4("maxpool2d")?;
    let (wh, ww) = window;
    let (sh, sw) = stride;
    if wh == 0 || ww == 0 || sh == 0 || sw == 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {window:?} and stride {stride:?} must be positive"),
        ));
    }
    if wh > h || ww > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {wh}x{ww} exceeds input {h}x{w}"),
        ));
    }
    let oh = (h - wh) / sh + 1;
    let ow = (w - ww) / sw + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + y * sh * w + xx * sw;
                for dy in 0..wh {
                    let row = base + (y * sh + dy) * w + xx * sw;
                    for idx in row..row + ww {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![b, c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input position recorded in `argmax`.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "grad-out has {} cells but {} argmax entries were saved",
                grad_out.len(),
                argmax.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(input_shape.to_vec());
    let gd = grad.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        gd[idx] = gd[idx] + g;
    }
    Ok(grad)
}

/// Mean over the spatial extent: `(b, c, h, w) -> (b, c)`.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = input.dims4("global_avg_pool")?;
    let area = h * w;
    let inv = T::one() / T::from_usize(area).unwrap();
    let data = input
        .data()
        .chunks(area)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let [b, c, h, w] = *input_shape else {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("expected a 4-D input shape, got {input_shape:?}"),
        ));
    };
    if grad_out.shape() != [b, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad-out shape {:?} vs expected {:?}", grad_out.shape(), [b, c]),
        ));
    }
    let area = h * w;
    let inv = T::one() / T::from_usize(area).unwrap();
    let mut data = Vec::with_capacity(b * c * area);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, area));
    }
    Tensor::new(input_shape.to_vec(), data)
}
