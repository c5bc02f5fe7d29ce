use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (batch, features) = input.dims2(op)?;
    let (out, wf) = weight.dims2(op)?;
    if wf != features {
        return Err(Error::shape(
            op,
            format!("input has {features} features but weight expects {wf}"),
        ));
    }
    Ok((batch, features, out))
}

/// `output = input * weight^T + bias` for `input: (B, F)`, `weight: (O, F)`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, features, out) = check("linear", input, weight)?;
    if bias.shape() != [out] {
        return Err(Error::shape(
            "linear",
            format!("bias shape {:?} does not match {out} outputs", bias.shape()),
        ));
    }
    let mut data = Vec::with_capacity(batch * out);
    for _ in 0..batch {
        data.extend_from_slice(bias.data());
    }
    gemm(false, true, batch, features, out, T::one(), input.data(), weight.data(), T::one(), &mut data);
    Tensor::new(vec![batch, out], data)
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, features, out) = check("linear_backward", input, weight)?;
    if grad_out.shape() != [batch, out] {
        return Err(Error::shape(
            "linear_backward",
            format!("grad-out shape {:?} vs forward output {:?}", grad_out.shape(), [batch, out]),
        ));
    }
    let g = grad_out.data();
    let mut gi = vec![T::zero(); batch * features];
    gemm(false, false, batch, out, features, T::one(), g, weight.data(), T::zero(), &mut gi);
    let mut gw = vec![T::zero(); out * features];
    gemm(true, false, out, batch, features, T::one(), g, input.data(), T::zero(), &mut gw);
    let mut gb = vec![T::zero(); out];
    for row in g.chunks(out) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(vec![batch, features], gi)?,
        weight: Tensor::new(vec![out, features], gw)?,
        bias: Tensor::new(vec![out], gb)?,
    })
}
