//! 2-D cross-correlation (no kernel flip) with zero padding, lowered to GEMM
//! through an im2col buffer.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Gradients of [`conv2d`] with respect to each of its arguments.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    sh: usize,
    sw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(
        op: &'static str,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        padding: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4(op)?;
        let (cout, kcin, kh, kw) = kernel.dims4(op)?;
        if cin != kcin {
            return Err(Error::shape(
                op,
                format!("input has {cin} channels but kernel expects {kcin}"),
            ));
        }
        let (ph, pw) = padding;
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(Error::shape(op, format!("stride must be positive, got {stride:?}")));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(
                op,
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * ph,
                    w + 2 * pw
                ),
            ));
        }
        Ok(Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ph,
            pw,
            sh,
            sw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (w + 2 * pw - kw) / sw + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source coordinate for output index `o` and kernel tap `d`, if in bounds.
    #[inline]
    fn src(o: usize, d: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + d).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    fn im2col<T: Scalar>(&self, image: &[T], col: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for y in 0..self.oh {
                        let out_row = &mut dst[y * self.ow..(y + 1) * self.ow];
                        match Self::src(y, dy, self.sh, self.ph, self.h) {
                            None => out_row.fill(T::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (x, v) in out_row.iter_mut().enumerate() {
                                    *v = match Self::src(x, dx, self.sw, self.pw, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Scatter-adds a column buffer back onto an image (adjoint of im2col).
    fn col2im<T: Scalar>(&self, col: &[T], image: &mut [T]) {
        let p = self.positions();
        let mut row = 0;
        for c in 0..self.cin {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for dy in 0..self.kh {
                for dx in 0..self.kw {
                    let src = &col[row * p..(row + 1) * p];
                    for y in 0..self.oh {
                        if let Some(iy) = Self::src(y, dy, self.sh, self.ph, self.h) {
                            let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                            for x in 0..self.ow {
                                if let Some(ix) = Self::src(x, dx, self.sw, self.pw, self.w) {
                                    dst_row[ix] = dst_row[ix] + src[y * self.ow + x];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `output[b,o,y,x] = bias[o] + sum_{i,dy,dx} input[b,i,y*sh+dy-ph,x*sw+dx-pw] * kernel[o,i,dy,dx]`
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    let g = Geometry::new("conv2d", input, kernel, padding, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match {} output channels", b.shape(), g.cout),
            ));
        }
    }
    let (k, p) = (g.patch(), g.positions());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let mut col = vec![T::zero(); k * p];
    let mut out = vec![T::zero(); g.batch * out_item];
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_item..(b + 1) * in_item], &mut col);
        let dst = &mut out[b * out_item..(b + 1) * out_item];
        gemm(false, false, g.cout, k, p, T::one(), kernel.data(), &col, T::zero(), dst);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out)
}

/// Exact adjoints of [`conv2d`] for the saved `input` and `kernel`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: (usize, usize),
    stride: (usize, usize),
) -> Result<ConvGrads<T>> {
    let g = Geometry::new("conv2d_backward", input, kernel, padding, stride)?;
    let expected = [g.batch, g.cout, g.oh, g.ow];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad-out shape {:?} differs from forward output {expected:?}",
                grad_out.shape()
            ),
        ));
    }
    let (k, p) = (g.patch(), g.positions());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let mut col = vec![T::zero(); k * p];
    let mut dcol = vec![T::zero(); k * p];
    let mut grad_in = vec![T::zero(); input.len()];
    let mut grad_k = vec![T::zero(); kernel.len()];
    let mut grad_b = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        let gout = &grad_out.data()[b * out_item..(b + 1) * out_item];
        for (o, acc) in grad_b.iter_mut().enumerate() {
            *acc = *acc + gout[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        g.im2col(&input.data()[b * in_item..(b + 1) * in_item], &mut col);
        // dK[o, K] += gout[o, P] * col[K, P]^T
        gemm(false, true, g.cout, p, k, T::one(), gout, &col, T::one(), &mut grad_k);
        // dcol[K, P] = K^T[K, o] * gout[o, P]
        gemm(true, false, k, g.cout, p, T::one(), kernel.data(), gout, T::zero(), &mut dcol);
        g.col2im(&dcol, &mut grad_in[b * in_item..(b + 1) * in_item]);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        kernel: Tensor::new(kernel.shape().to_vec(), grad_k)?,
        bias: Tensor::new(vec![g.cout], grad_b)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop evaluation of the cross-correlation formula.
    fn brute_force(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        (ph, pw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Tensor<f64> {
        let (b, cin, h, w) = input.dims4("t").unwrap();
        let (cout, _, kh, kw) = kernel.dims4("t").unwrap();
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let mut out = Tensor::zeros(vec![b, cout, oh, ow]);
        let x = input.data();
        let kd = kernel.data();
        for n in 0..b {
            for o in 0..cout {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = bias.map(|bb| bb.data()[o]).unwrap_or(0.0);
                        for i in 0..cin {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (y * sh + dy) as isize - ph as isize;
                                    let ix = (xx * sw + dx) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let (iy, ix) = (iy as usize, ix as usize);
                                    acc += x[((n * cin + i) * h + iy) * w + ix]
                                        * kd[((o * cin + i) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        out.data_mut()[((n * cout + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut r = rng();
        let x = Tensor::<f32>::zeros(vec![2, 3, 6, 6]);
        let k = Tensor::randn(vec![4, 3, 3, 3], 1.0, &mut r);
        let b = Tensor::zeros(vec![4]);
        let y = conv2d(&x, &k, Some(&b), (1, 1), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_reproduces_reflected_kernel() {
        let mut x = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        x.data_mut()[4] = 1.0;
        let k = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let y = conv2d(&x, &k, None, (1, 1), (1, 1)).unwrap();
        let oracle = brute_force(&x, &k, None, (1, 1), (1, 1));
        assert_eq!(y, oracle);
        // output[y,x] = K[2-y, 2-x] for a centered impulse
        assert_eq!(y.data(), &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn ones_window_sums_to_four() {
        let x = Tensor::<f32>::full(vec![1, 1, 4, 4], 1.0);
        let k = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &k, None, (0, 0), (1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn matches_brute_force_with_stride_and_padding() {
        let mut r = rng();
        for &(pad, stride) in &[((0, 0), (1, 1)), ((1, 2), (2, 1)), ((2, 2), (2, 2)), ((0, 1), (3, 2))] {
            let x = Tensor::<f64>::randn(vec![2, 3, 7, 6], 1.0, &mut r);
            let k = Tensor::randn(vec![4, 3, 3, 2], 1.0, &mut r);
            let b = Tensor::randn(vec![4], 1.0, &mut r);
            let y = conv2d(&x, &k, Some(&b), pad, stride).unwrap();
            let o = brute_force(&x, &k, Some(&b), pad, stride);
            assert_eq!(y.shape(), o.shape());
            for (a, e) in y.data().iter().zip(o.data()) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![2, 1, 5, 5], 1.0, &mut r);
        let k = Tensor::full(vec![1, 1, 1, 1], 2.5);
        let y = conv2d(&x, &k, None, (0, 0), (1, 1)).unwrap();
        assert_eq!(y, x.scale(2.5));
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 5, 5]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &k, None, (0, 0), (1, 1)).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");

        let k = Tensor::zeros(vec![1, 2, 7, 7]);
        assert!(conv2d(&x, &k, None, (0, 0), (1, 1)).is_err());
        assert!(conv2d(&x, &k, None, (1, 1), (1, 1)).is_ok());

        let k = Tensor::zeros(vec![1, 2, 3, 3]);
        let bad_grad = Tensor::zeros(vec![1, 1, 2, 2]);
        assert!(conv2d_backward(&bad_grad, &x, &k, (0, 0), (1, 1)).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![1, 2, 5, 5], 1.0, &mut r);
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut r);
        let g = conv2d_backward(&Tensor::zeros(vec![1, 3, 5, 5]), &x, &k, (1, 1), (1, 1)).unwrap();
        assert!(g.input.data().iter().chain(g.kernel.data()).chain(g.bias.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_gradient_of_sum_matches_finite_differences() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(vec![1, 1, 5, 5], 1.0, &mut r);
        let k = Tensor::randn(vec![1, 1, 3, 3], 1.0, &mut r);
        let out = conv2d(&x, &k, None, (0, 0), (1, 1)).unwrap();
        let g = conv2d_backward(&Tensor::full(out.shape().to_vec(), 1.0), &x, &k, (0, 0), (1, 1)).unwrap();
        let numeric = central_difference(&k, 1e-5, |kk| conv2d(&x, kk, None, (0, 0), (1, 1)).unwrap().sum());
        assert!(relative_error(&g.kernel, &numeric) < 1e-6);
    }

    #[test]
    fn all_gradients_match_finite_differences() {
        let mut r = rng();
        let (pad, stride) = ((1, 0), (2, 1));
        let x = Tensor::<f64>::randn(vec![2, 2, 6, 5], 1.0, &mut r);
        let k = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut r);
        let b = Tensor::randn(vec![3], 1.0, &mut r);
        let probe = Tensor::randn(conv2d(&x, &k, Some(&b), pad, stride).unwrap().shape().to_vec(), 1.0, &mut r);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
            let y = conv2d(x, k, Some(b), pad, stride).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, p)| a * p).sum::<f64>()
        };
        let g = conv2d_backward(&probe, &x, &k, pad, stride).unwrap();
        let nx = central_difference(&x, 1e-5, |xx| loss(xx, &k, &b));
        let nk = central_difference(&k, 1e-5, |kk| loss(&x, kk, &b));
        let nb = central_difference(&b, 1e-5, |bb| loss(&x, &k, bb));
        assert!(relative_error(&g.input, &nx) < 1e-6);
        assert!(relative_error(&g.kernel, &nk) < 1e-6);
        assert!(relative_error(&g.bias, &nb) < 1e-6);
    }
}
