use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry { stride, pad }
    }

    pub fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: 1, pad: 0 }
    }
}

/// Resolved shapes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<ConvDims> {
    if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
        return Err(TernError::dim("conv2d", input, weight));
    }
    if geom.stride == 0 {
        return Err(TernError::Config("conv2d stride must be >= 1".into()));
    }
    let (oh, ow) = match (
        geom.out_dim(input[2], weight[2]),
        geom.out_dim(input[3], weight[3]),
    ) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => return Err(TernError::dim("conv2d", input, weight)),
    };
    Ok(ConvDims {
        n: input[0],
        c: input[1],
        h: input[2],
        w: input[3],
        o: weight[0],
        kh: weight[2],
        kw: weight[3],
        oh,
        ow,
    })
}

/// Output positions `[lo, hi)` whose tap `k` lands inside an input of length `len`.
#[inline]
pub(crate) fn valid_range(
    out_len: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    // input index = o * stride + k - pad
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Bias-free 2-D convolution over NCHW input and OIHW weights.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    let (x, wt) = (input.data(), weight.data());
    let mut out = vec![T::zero(); d.n * d.o * d.oh * d.ow];
    let (s, p) = (geom.stride, geom.pad);
    for n in 0..d.n {
        for o in 0..d.o {
            let plane = &mut out[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
            for c in 0..d.c {
                let xin = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let wv = wt[((o * d.c + c) * d.kh + ky) * d.kw + kx];
                        let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let row = &xin[iy * d.w..][..d.w];
                            let orow = &mut plane[oy * d.ow..][..d.ow];
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    let out = Tensor::from_parts(vec![d.n, d.o, d.oh, d.ow], out);
    out.debug_check("conv2d")?;
    Ok(out)
}

/// Gradients of `conv2d` with respect to input and weight.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    if grad_out.shape() != [d.n, d.o, d.oh, d.ow] {
        return Err(TernError::dim(
            "conv2d_backward",
            grad_out.shape(),
            &[d.n, d.o, d.oh, d.ow],
        ));
    }
    let (x, wt, g) = (input.data(), weight.data(), grad_out.data());
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let (s, p) = (geom.stride, geom.pad);
    for n in 0..d.n {
        for o in 0..d.o {
            let gplane = &g[(n * d.o + o) * d.oh * d.ow..][..d.oh * d.ow];
            for c in 0..d.c {
                let base = (n * d.c + c) * d.h * d.w;
                for ky in 0..d.kh {
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    for kx in 0..d.kw {
                        let widx = ((o * d.c + c) * d.kh + ky) * d.kw + kx;
                        let wv = wt[widx];
                        let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let grow = &gplane[oy * d.ow..][..d.ow];
                            for ox in x0..x1 {
                                let xi = base + iy * d.w + ox * s + kx - p;
                                acc += grow[ox] * x[xi];
                                gx[xi] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(weight.shape().to_vec(), gw),
    ))
}

/// Multiply-accumulate count of one convolution, counting padded taps.
pub fn conv2d_macs(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<u64> {
    let d = conv_dims(input, weight, geom)?;
    Ok((d.n * d.o * d.oh * d.ow) as u64 * (d.c * d.kh * d.kw) as u64)
}
