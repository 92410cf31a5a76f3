//! Statistical weight ternarization.
//!
//! A layer's full-precision weights `w` map to `α · code` with
//! `code ∈ {-1, 0, +1}`:
//!
//! * threshold `Δth = β · max|w|`
//! * `code_i = sign(w_i)` when `|w_i| ≥ Δth`, otherwise `0`
//! * `α` is the mean magnitude of the weights that reached the threshold
//!
//! A single symmetric `α` per layer lets the scale be pulled out of the
//! dot product (`x · (α·code) = α · (x · code)`) and folded into a following
//! batch norm. Gradients reach the full-precision weights through a
//! straight-through estimator clipped at `|w| ≤ 1`.

use log::warn;

use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient of the quantizer is passed through only where `|w|` is at most this.
pub const STE_CLIP: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSpec<T> {
    pub beta: T,
    pub delta_th: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TernaryTensor<T> {
    codes: Vec<i8>,
    alpha: T,
    beta: T,
    shape: Vec<usize>,
}

pub(crate) fn check_beta<T: Scalar>(beta: T) -> Result<()> {
    if beta > T::zero() && beta < T::one() {
        Ok(())
    } else {
        Err(TernError::Config(format!(
            "threshold factor beta must lie in (0, 1), got {beta}"
        )))
    }
}

/// `Δth = β · max|w|`.
pub fn compute_threshold<T: Scalar>(w: &Tensor<T>, beta: T) -> Result<ThresholdSpec<T>> {
    check_beta(beta)?;
    if w.is_empty() {
        return Err(TernError::Empty("cannot threshold an empty weight tensor"));
    }
    Ok(ThresholdSpec {
        beta,
        delta_th: beta * w.max_abs(),
    })
}

/// Mean of `|w_i|` over `{ i : |w_i| ≥ Δth }`, or zero when that set is empty.
///
/// Accumulates in `f64` so the 32-bit path does not drift on large layers.
pub fn compute_alpha<T: Scalar>(w: &Tensor<T>, spec: &ThresholdSpec<T>) -> T {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for &v in w.data() {
        let a = v.abs();
        if a >= spec.delta_th {
            sum += a.as_f64();
            count += 1;
        }
    }
    if count == 0 {
        warn!(
            "no weight reaches threshold {}; scaling factor set to 0",
            spec.delta_th
        );
        return T::zero();
    }
    T::of(sum / count as f64)
}

#[inline]
fn code_of<T: Scalar>(v: T, delta_th: T) -> i8 {
    if v.abs() >= delta_th {
        if v > T::zero() {
            1
        } else if v < T::zero() {
            -1
        } else {
            // only reachable when Δth = 0 (all-zero layer)
            0
        }
    } else {
        0
    }
}

/// Ternarize with a freshly computed threshold and scaling factor.
pub fn ternarize<T: Scalar>(w: &Tensor<T>, beta: T) -> Result<TernaryTensor<T>> {
    let spec = compute_threshold(w, beta)?;
    let alpha = compute_alpha(w, &spec);
    Ok(ternarize_with(w, &spec, alpha))
}

/// Ternarize against a given threshold and scaling factor, e.g. values
/// frozen at initialisation.
pub fn ternarize_with<T: Scalar>(
    w: &Tensor<T>,
    spec: &ThresholdSpec<T>,
    alpha: T,
) -> TernaryTensor<T> {
    let codes: Vec<i8> = w
        .data()
        .iter()
        .map(|&v| code_of(v, spec.delta_th))
        .collect();
    let alpha = if codes.iter().all(|&c| c == 0) {
        T::zero()
    } else {
        alpha
    };
    TernaryTensor {
        codes,
        alpha,
        beta: spec.beta,
        shape: w.shape().to_vec(),
    }
}

/// Elementwise `α · code`.
pub fn dequantize<T: Scalar>(t: &TernaryTensor<T>) -> Tensor<T> {
    let a = t.alpha;
    let data = t
        .codes
        .iter()
        .map(|&c| match c {
            1 => a,
            -1 => -a,
            _ => T::zero(),
        })
        .collect();
    Tensor::from_parts(t.shape.clone(), data)
}

/// Straight-through gradient: `upstream ⊙ 1[|w| ≤ 1]`.
pub fn ste_backward<T: Scalar>(upstream: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let clip = T::of(STE_CLIP);
    upstream.zip_map(w, "ste_backward", |g, v| {
        if v.abs() <= clip {
            g
        } else {
            T::zero()
        }
    })
}

impl<T: Scalar> TernaryTensor<T> {
    /// Validates that every code is in `{-1, 0, +1}` and the shape covers them.
    pub fn from_parts(codes: Vec<i8>, alpha: T, beta: T, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != codes.len() {
            return Err(TernError::Shape {
                shape,
                reason: format!("{} codes do not fill the shape", codes.len()),
            });
        }
        if let Some(index) = codes.iter().position(|c| !(-1..=1).contains(c)) {
            return Err(TernError::CorruptCode { index });
        }
        if !alpha.is_finite() || alpha < T::zero() {
            return Err(TernError::NonFinite {
                context: format!("scaling factor {alpha}"),
            });
        }
        Ok(TernaryTensor {
            codes,
            alpha,
            beta,
            shape,
        })
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn beta(&self) -> T {
        self.beta
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn nonzeros(&self) -> usize {
        self.codes.iter().filter(|&&c| c != 0).count()
    }

    /// Fraction of nonzero codes.
    pub fn density(&self) -> f64 {
        if self.codes.is_empty() {
            0.0
        } else {
            self.nonzeros() as f64 / self.codes.len() as f64
        }
    }

    pub fn cast<U: Scalar>(&self) -> TernaryTensor<U> {
        TernaryTensor {
            codes: self.codes.clone(),
            alpha: U::of(self.alpha.as_f64()),
            beta: U::of(self.beta.as_f64()),
            shape: self.shape.clone(),
        }
    }
}
