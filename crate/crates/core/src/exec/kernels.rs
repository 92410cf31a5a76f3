//! Multiplication-free ternary convolution and dense kernels.
//!
//! Each output element is accumulated as `Σ x` over `+1` codes minus `Σ x`
//! over `-1` codes; zero codes are skipped entirely. The scaling factor is
//! applied with a single multiply per output element, or not at all when it
//! has been folded into the following batch norm.

use std::cell::Cell;

use crate::error::{Result, TernError};
use crate::exec::packed::PackedTernary;
use crate::ops::conv::{conv_dims, valid_range};
use crate::ops::ConvGeometry;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Operation counts recorded by the kernels in debug builds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    /// Accumulations of an activation into an output (`+x` or `-x`).
    pub add_sub: u64,
    /// Multiplications of an activation by a weight value.
    pub weight_mul: u64,
    /// Multiplications of an accumulated output by `α`.
    pub scale_mul: u64,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { add_sub: 0, weight_mul: 0, scale_mul: 0 }) };
}

pub fn reset_counters() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

/// Counts accumulated on this thread since the last reset. Always zero in
/// release builds.
pub fn counters() -> OpCounts {
    COUNTS.with(|c| c.get())
}

#[inline]
fn record(add_sub: u64, scale_mul: u64) {
    if cfg!(debug_assertions) {
        COUNTS.with(|c| {
            let mut v = c.get();
            v.add_sub += add_sub;
            v.scale_mul += scale_mul;
            c.set(v);
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// Multiply every output element by the layer's `α`.
    Apply,
    /// `α` lives in the following batch norm; outputs are raw code sums.
    Folded,
}

/// Nonzero taps of one output channel, split by sign.
#[derive(Default)]
struct Taps {
    plus: Vec<(usize, usize, usize)>,
    minus: Vec<(usize, usize, usize)>,
}

fn finish<T: Scalar>(out: &mut [T], alpha: T, mode: AlphaMode) {
    if mode == AlphaMode::Apply {
        for v in out.iter_mut() {
            *v *= alpha;
        }
        record(0, out.len() as u64);
    }
}

/// `α · (x ⊛ codes)` over NCHW input and OIHW packed weights.
pub fn ternary_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &PackedTernary<T>,
    geom: ConvGeometry,
    mode: AlphaMode,
) -> Result<Tensor<T>> {
    let d = conv_dims(input.shape(), weight.shape(), geom)?;
    let (s, p) = (geom.stride, geom.pad);
    let per_kernel = d.c * d.kh * d.kw;
    let taps: Vec<Taps> = (0..d.o)
        .map(|o| {
            let mut t = Taps::default();
            for c in 0..d.c {
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        match weight.code(o * per_kernel + (c * d.kh + ky) * d.kw + kx) {
                            1 => t.plus.push((c, ky, kx)),
                            -1 => t.minus.push((c, ky, kx)),
                            _ => {}
                        }
                    }
                }
            }
            t
        })
        .collect();

    let x = input.data();
    let plane_len = d.oh * d.ow;
    let mut out = vec![T::zero(); d.n * d.o * plane_len];
    let mut adds = 0u64;
    for n in 0..d.n {
        for (o, t) in taps.iter().enumerate() {
            let plane = &mut out[(n * d.o + o) * plane_len..][..plane_len];
            for (negate, list) in [(false, &t.plus), (true, &t.minus)] {
                for &(c, ky, kx) in list {
                    let xin = &x[(n * d.c + c) * d.h * d.w..][..d.h * d.w];
                    let (y0, y1) = valid_range(d.oh, d.h, ky, s, p);
                    let (x0, x1) = valid_range(d.ow, d.w, kx, s, p);
                    adds += ((y1 - y0) * (x1 - x0)) as u64;
                    for oy in y0..y1 {
                        let row = &xin[(oy * s + ky - p) * d.w..][..d.w];
                        let orow = &mut plane[oy * d.ow..][..d.ow];
                        if negate {
                            for ox in x0..x1 {
                                orow[ox] -= row[ox * s + kx - p];
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    record(adds, 0);
    finish(&mut out, weight.alpha(), mode);
    Ok(Tensor::from_parts(vec![d.n, d.o, d.oh, d.ow], out))
}

/// `α · (x · codes) + bias` for `x: N×F` and packed `F×G` weights.
pub fn ternary_dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &PackedTernary<T>,
    bias: Option<&Tensor<T>>,
    mode: AlphaMode,
) -> Result<Tensor<T>> {
    let (xs, ws) = (input.shape(), weight.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(TernError::dim("ternary_dense", xs, ws));
    }
    let (n, f, g) = (xs[0], xs[1], ws[1]);
    if let Some(b) = bias {
        if b.shape() != [g] {
            return Err(TernError::dim("ternary_dense bias", b.shape(), &[g]));
        }
    }
    let mut plus: Vec<Vec<usize>> = vec![Vec::new(); f];
    let mut minus: Vec<Vec<usize>> = vec![Vec::new(); f];
    for k in 0..f {
        for j in 0..g {
            match weight.code(k * g + j) {
                1 => plus[k].push(j),
                -1 => minus[k].push(j),
                _ => {}
            }
        }
    }
    let nnz: usize = plus.iter().chain(&minus).map(Vec::len).sum();
    let x = input.data();
    let mut out = vec![T::zero(); n * g];
    for i in 0..n {
        let orow = &mut out[i * g..][..g];
        for k in 0..f {
            let xv = x[i * f + k];
            for &j in &plus[k] {
                orow[j] += xv;
            }
            for &j in &minus[k] {
                orow[j] -= xv;
            }
        }
    }
    record((n * nnz) as u64, 0);
    finish(&mut out, weight.alpha(), mode);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, g], out))
}
