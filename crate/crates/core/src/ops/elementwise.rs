use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, "relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

/// Parameter-free residual shortcut: spatial subsampling by `stride` and
/// zero padding of the channel axis up to `out_channels`, split evenly
/// before and after the existing channels.
pub fn shortcut_pad<T: Scalar>(
    input: &Tensor<T>,
    stride: usize,
    out_channels: usize,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(TernError::Shape {
            shape: input.shape().to_vec(),
            reason: "shortcut expects N×C×H×W".into(),
        });
    };
    if stride == 0 || out_channels < c {
        return Err(TernError::Config(format!(
            "shortcut cannot map {c} channels to {out_channels} with stride {stride}"
        )));
    }
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let front = (out_channels - c) / 2;
    let x = input.data();
    let mut out = vec![T::zero(); n * out_channels * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let src = (b * c + ch) * h * w;
            let dst = (b * out_channels + ch + front) * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    out[dst + y * ow + xx] = x[src + y * stride * w + xx * stride];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, out_channels, oh, ow], out))
}

pub fn shortcut_pad_backward<T: Scalar>(
    input_shape: &[usize],
    stride: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let gs = grad_out.shape();
    let (out_channels, oh, ow) = (gs[1], gs[2], gs[3]);
    let front = (out_channels - c) / 2;
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let dst = (b * c + ch) * h * w;
            let src = (b * out_channels + ch + front) * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    gx[dst + y * stride * w + xx * stride] = g[src + y * ow + xx];
                }
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), gx)
}
