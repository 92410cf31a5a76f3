//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value plus whatever
//! it needs for the backward pass. `backward` walks the nodes in exact
//! reverse insertion order, accumulates gradients into parameter leaves and
//! then frees every stored value; the tape cannot be replayed afterwards.

use std::collections::BTreeMap;

use crate::error::{Result, TernError};
use crate::ops::{self, ConvGeometry, NormCache, NormMode, PoolGeometry, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::ternarize::{self, TernaryTensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(usize),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: T,
    },
    Sum {
        x: Var,
    },
    ShortcutPad {
        x: Var,
        stride: usize,
    },
    /// Quantized view of a weight; backward is the clipped straight-through estimator.
    Ternary {
        w: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Tensor<T>,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Parameter gradients produced by [`Tape::backward`], keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> FromIterator<(usize, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (usize, Tensor<T>)>>(iter: I) -> Self {
        Gradients {
            by_param: iter.into_iter().collect(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, param: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(TernError::Backward(
                "tape already consumed by backward".into(),
            ));
        }
        value.debug_check(op_name(&op))?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input)
    }

    /// Records a read of parameter `id`; gradients for every read of the same
    /// id are summed.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Param(id))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), geom)?;
        self.push(y, Op::Conv2d { x, w, geom })
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::dense(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: NormMode,
        eps: T,
    ) -> Result<Var> {
        let (y, cache) = ops::batchnorm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            stats,
            mode,
            eps,
        )?;
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn maxpool2d(&mut self, x: Var, geom: PoolGeometry) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), geom)?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        self.push(y, Op::GlobalAvgPool { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape { x })
    }

    /// `N×...` to `N×F`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let n = s[0];
        let f = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, f])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "add", |p, q| p + q)?;
        self.push(y, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), "mul", |p, q| p * q)?;
        self.push(y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let y = self.value(x).scale(k);
        self.push(y, Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::Sum { x })
    }

    pub fn shortcut_pad(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let y = ops::shortcut_pad(self.value(x), stride, out_channels)?;
        self.push(y, Op::ShortcutPad { x, stride })
    }

    /// Substitutes the dequantized ternary weight for `w` in the forward pass.
    pub fn ternary(&mut self, w: Var, quantized: &TernaryTensor<T>) -> Result<Var> {
        if quantized.shape() != self.value(w).shape() {
            return Err(TernError::dim(
                "ternary",
                quantized.shape(),
                self.value(w).shape(),
            ));
        }
        let y = ternarize::dequantize(quantized);
        self.push(y, Op::Ternary { w })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), targets)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// Backpropagates from the scalar `loss`, returning gradients for every
    /// parameter leaf and releasing all recorded values.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TernError::Backward(
                "backward called twice; re-run the forward pass first".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(TernError::Backward("empty tape".into()));
        }
        if self.value(loss).shape() != [1] {
            return Err(TernError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.by_param.get_mut(id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.by_param.insert(*id, g);
                    }
                },
                Op::Conv2d { x, w, geom } => {
                    let (gx, gw) = ops::conv2d_backward(val(*x), val(*w), &g, *geom)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(val(*x), val(*w), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    cache,
                } => {
                    let (gx, gg, gb) = ops::batchnorm_backward(cache, val(*gamma), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gamma, gg)?;
                    accumulate(&mut grads, *beta, gb)?;
                }
                Op::Relu { x } => {
                    let gx = ops::relu_backward(val(*x), &g)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::MaxPool { x, argmax } => {
                    let gx = ops::maxpool2d_backward(val(*x).shape(), argmax, &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::GlobalAvgPool { x } => {
                    let gx = ops::global_avg_pool_backward(val(*x).shape(), &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Reshape { x } => {
                    let gx = g.reshape(val(*x).shape())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul { a, b } => {
                    let ga = g.zip_map(val(*b), "mul_backward", |p, q| p * q)?;
                    let gb = g.zip_map(val(*a), "mul_backward", |p, q| p * q)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale { x, k } => accumulate(&mut grads, *x, g.scale(*k))?,
                Op::Sum { x } => {
                    let gx = Tensor::full(val(*x).shape(), g.data()[0]);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ShortcutPad { x, stride } => {
                    let gx = ops::shortcut_pad_backward(val(*x).shape(), *stride, &g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Ternary { w } => {
                    let gw = ternarize::ste_backward(&g, val(*w))?;
                    accumulate(&mut grads, *w, gw)?;
                }
                Op::SoftmaxCe {
                    logits,
                    probs,
                    targets,
                } => {
                    let gl = ops::softmax_cross_entropy_backward(probs, targets, g.data()[0]);
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Conv2d { .. } => "conv2d",
        Op::Dense { .. } => "dense",
        Op::BatchNorm { .. } => "batchnorm",
        Op::Relu { .. } => "relu",
        Op::MaxPool { .. } => "maxpool2d",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::Reshape { .. } => "reshape",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Sum { .. } => "sum",
        Op::ShortcutPad { .. } => "shortcut_pad",
        Op::Ternary { .. } => "ternary",
        Op::SoftmaxCe { .. } => "softmax_cross_entropy",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec64(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn identity_loss_has_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(0, vec64(&[3.0])).unwrap();
        let g = tape.backward(w).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn half_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.param(0, vec64(&[1.0, -2.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn repeated_param_reads_accumulate() {
        let mut tape = Tape::new();
        let a = tape.param(7, vec64(&[2.0])).unwrap();
        let b = tape.param(7, vec64(&[2.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(7).unwrap().data(), &[2.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let w = tape.param(0, vec64(&[1.0])).unwrap();
        tape.backward(w).unwrap();
        assert!(matches!(tape.backward(w), Err(TernError::Backward(_))));
        assert!(tape.is_empty(), "intermediates are freed");
        assert!(tape.input(vec64(&[1.0])).is_err());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(0, vec64(&[1.0, 2.0])).unwrap();
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn ternary_node_masks_clipped_weights() {
        let mut tape = Tape::new();
        let wt = vec64(&[0.5, -1.5, 1.0, 0.01]);
        let q = ternarize::ternarize(&wt, 0.1).unwrap();
        let w = tape.param(0, wt).unwrap();
        let wq = tape.ternary(w, &q).unwrap();
        let s = tape.sum(wq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0, 0.0, 1.0, 1.0]);
    }
}
