//! Residual expanded layers.
//!
//! One full-precision weight tensor is ternarized `T_ex` times at strictly
//! increasing threshold factors. Each branch is an ordinary ternary layer;
//! the branch outputs are summed, which is equivalent to convolving with a
//! single multi-level weight taking at most `2·T_ex + 1` distinct values.

use crate::error::{Result, TernError};
use crate::ops::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::ternarize::{self, check_beta, dequantize, TernaryTensor};

pub const BETAS_TEX1: [f64; 1] = [0.05];
pub const BETAS_TEX2: [f64; 2] = [0.05, 0.1];
pub const BETAS_TEX4: [f64; 4] = [0.05, 0.1, 0.15, 0.2];

/// Threshold factors used for a given expansion factor, when one is defined.
pub fn default_betas(t_ex: usize) -> Option<Vec<f64>> {
    match t_ex {
        1 => Some(BETAS_TEX1.to_vec()),
        2 => Some(BETAS_TEX2.to_vec()),
        4 => Some(BETAS_TEX4.to_vec()),
        _ => None,
    }
}

pub(crate) fn check_betas<T: Scalar>(betas: &[T]) -> Result<()> {
    if betas.is_empty() {
        return Err(TernError::Config(
            "expansion needs at least one threshold factor".into(),
        ));
    }
    for &b in betas {
        check_beta(b)?;
    }
    if betas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TernError::Config(format!(
            "threshold factors must be strictly increasing, got {:?}",
            betas.iter().map(|b| b.as_f64()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

/// Ternary branches of one expanded layer, ordered by ascending threshold factor.
#[derive(Clone, Debug, PartialEq)]
pub struct RelStack<T> {
    layers: Vec<TernaryTensor<T>>,
}

/// Either a 2-D convolution or a dense product; selects the `⊛` in `x ⊛ w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvGeometry),
    Dense,
}

impl LayerKind {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            LayerKind::Conv(g) => ops::conv2d(x, w, *g),
            LayerKind::Dense => ops::dense(x, w, None),
        }
    }
}

/// Ternarizes `w` once per threshold factor.
pub fn expand<T: Scalar>(w: &Tensor<T>, betas: &[T]) -> Result<RelStack<T>> {
    check_betas(betas)?;
    let layers = betas
        .iter()
        .map(|&b| ternarize::ternarize(w, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(RelStack { layers })
}

/// Elementwise `Σ_k α_k · code_k`.
pub fn effective_quantizer<T: Scalar>(stack: &RelStack<T>) -> Tensor<T> {
    let mut acc = dequantize(&stack.layers[0]);
    for layer in &stack.layers[1..] {
        acc.add_assign(&dequantize(layer))
            .expect("branches share one shape");
    }
    acc
}

/// `Σ_k α_k · (x ⊛ code_k)`, summed in ascending branch order.
pub fn rel_forward<T: Scalar>(
    x: &Tensor<T>,
    stack: &RelStack<T>,
    kind: LayerKind,
) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for layer in &stack.layers {
        let codes = Tensor::from_parts(
            layer.shape().to_vec(),
            layer.codes().iter().map(|&c| T::of(c as f64)).collect(),
        );
        let y = kind.apply(x, &codes)?.scale(layer.alpha());
        match &mut acc {
            None => acc = Some(y),
            Some(a) => a.add_assign(&y)?,
        }
    }
    Ok(acc.expect("stack has at least one branch"))
}

impl<T: Scalar> RelStack<T> {
    /// Assembles branches built elsewhere (e.g. with frozen thresholds),
    /// checking shapes and the ascending-β order.
    pub fn from_layers(layers: Vec<TernaryTensor<T>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| TernError::Config("expansion needs at least one branch".into()))?;
        if let Some(bad) = layers.iter().find(|l| l.shape() != first.shape()) {
            return Err(TernError::dim("rel stack", first.shape(), bad.shape()));
        }
        check_betas(&layers.iter().map(|l| l.beta()).collect::<Vec<_>>())?;
        Ok(RelStack { layers })
    }

    pub fn layers(&self) -> &[TernaryTensor<T>] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<TernaryTensor<T>> {
        self.layers
    }

    pub fn t_ex(&self) -> usize {
        self.layers.len()
    }

    pub fn betas(&self) -> Vec<T> {
        self.layers.iter().map(|l| l.beta()).collect()
    }

    pub fn alphas(&self) -> Vec<T> {
        self.layers.iter().map(|l| l.alpha()).collect()
    }

    pub fn shape(&self) -> &[usize] {
        self.layers[0].shape()
    }

    /// True when every element zero in a lower-β branch is zero in all
    /// higher-β branches.
    pub fn zeros_nest(&self) -> bool {
        self.layers.windows(2).all(|pair| {
            pair[0]
                .codes()
                .iter()
                .zip(pair[1].codes())
                .all(|(&lo, &hi)| hi == 0 || lo != 0)
        })
    }
}
