use crate::error::{Result, TernError};
use crate::ops::conv::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeometry {
    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let g = ConvGeometry::new(self.stride, self.pad);
        if self.kernel == 0 || self.pad >= self.kernel {
            return None;
        }
        Some((g.out_dim(h, self.kernel)?, g.out_dim(w, self.kernel)?))
    }
}

/// Max pooling; also returns the flat input index chosen for each output.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    geom: PoolGeometry,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[n, c, h, w] = input.shape() else {
        return Err(TernError::Shape {
            shape: input.shape().to_vec(),
            reason: "max pool expects N×C×H×W".into(),
        });
    };
    let (oh, ow) = geom.out_dims(h, w).ok_or_else(|| TernError::Shape {
        shape: input.shape().to_vec(),
        reason: format!("pool {geom:?} does not fit"),
    })?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if x[i] > best || best_i == usize::MAX {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, oh, ow], out), arg))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    gx
}

/// `N×C×H×W → N×C` spatial mean.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(TernError::Shape {
            shape: input.shape().to_vec(),
            reason: "global average pool expects N×C×H×W".into(),
        });
    };
    let hw = h * w;
    let inv = T::one() / T::of_usize(hw);
    let out = input
        .data()
        .chunks_exact(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Ok(Tensor::from_parts(vec![n, c], out))
}

pub fn global_avg_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::of_usize(hw);
    let data = grad_out
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    Tensor::from_parts(input_shape.to_vec(), data)
}
