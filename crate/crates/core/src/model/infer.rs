//! Tape-free evaluation. Quantized layers run through the packed add/sub
//! kernels, so in-memory evaluation and a reloaded exported model share one
//! code path.

use crate::error::{Result, TernError};
use crate::exec::{
    fold_alpha_into_bn, pack, ternary_conv2d, ternary_dense, AlphaMode, BnParams, PackedTernary,
};
use crate::model::graph::{Layer, ModelGraph, QuantViews, Shortcut};
use crate::ops::{self, PoolGeometry};
use crate::rel::LayerKind;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum InferLayer<T> {
    Fp {
        name: String,
        kind: LayerKind,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    Packed {
        name: String,
        kind: LayerKind,
        branches: Vec<PackedTernary<T>>,
        bias: Option<Tensor<T>>,
        alpha: AlphaMode,
    },
    BatchNorm {
        name: String,
        params: BnParams<T>,
    },
    Relu,
    MaxPool(PoolGeometry),
    GlobalAvgPool,
    Flatten,
    Residual {
        body: Vec<InferLayer<T>>,
        shortcut: InferShortcut<T>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum InferShortcut<T> {
    Identity,
    Pad { stride: usize, out_channels: usize },
    Projection(Vec<InferLayer<T>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNet<T> {
    layers: Vec<InferLayer<T>>,
    classes: usize,
}

fn convert<T: Scalar>(
    layers: &[Layer<T>],
    g: &ModelGraph<T>,
    views: Option<&QuantViews<T>>,
) -> Result<Vec<InferLayer<T>>> {
    let p = |id: usize| g.params[id].value.clone();
    layers
        .iter()
        .map(|l| {
            Ok(match l {
                Layer::Weight(wl) => {
                    let bias = wl.bias.map(p);
                    match views {
                        Some(v) if wl.policy.is_quantized() => {
                            let branches = v.get(&wl.weight).ok_or_else(|| TernError::Layer {
                                layer: wl.name.clone(),
                                reason: "quantized layer has no ternary view".into(),
                            })?;
                            InferLayer::Packed {
                                name: wl.name.clone(),
                                kind: wl.kind,
                                branches: branches.iter().map(pack).collect(),
                                bias,
                                alpha: AlphaMode::Apply,
                            }
                        }
                        _ => InferLayer::Fp {
                            name: wl.name.clone(),
                            kind: wl.kind,
                            weight: p(wl.weight),
                            bias,
                        },
                    }
                }
                Layer::BatchNorm(bn) => InferLayer::BatchNorm {
                    name: bn.name.clone(),
                    params: BnParams {
                        gamma: p(bn.gamma).into_data(),
                        beta: p(bn.beta).into_data(),
                        mean: bn.stats.mean.clone(),
                        var: bn.stats.var.clone(),
                        eps: bn.eps,
                    },
                },
                Layer::Relu => InferLayer::Relu,
                Layer::MaxPool(geom) => InferLayer::MaxPool(*geom),
                Layer::GlobalAvgPool => InferLayer::GlobalAvgPool,
                Layer::Flatten => InferLayer::Flatten,
                Layer::Residual(r) => InferLayer::Residual {
                    body: convert(&r.body, g, views)?,
                    shortcut: match &r.shortcut {
                        Shortcut::Identity => InferShortcut::Identity,
                        Shortcut::Pad {
                            stride,
                            out_channels,
                        } => InferShortcut::Pad {
                            stride: *stride,
                            out_channels: *out_channels,
                        },
                        Shortcut::Projection(p) => InferShortcut::Projection(convert(p, g, views)?),
                    },
                },
            })
        })
        .collect()
}

fn batchnorm_eval<T: Scalar>(x: &Tensor<T>, bn: &BnParams<T>) -> Result<Tensor<T>> {
    let (c, spatial) = match *x.shape() {
        [_, c] => (c, 1),
        [_, c, h, w] => (c, h * w),
        _ => {
            return Err(TernError::dim(
                "batch norm",
                x.shape(),
                &[0, bn.gamma.len()],
            ))
        }
    };
    if c != bn.gamma.len() {
        return Err(TernError::dim(
            "batch norm",
            x.shape(),
            &[0, bn.gamma.len()],
        ));
    }
    let scale: Vec<T> = (0..c)
        .map(|i| bn.gamma[i] / (bn.var[i] + bn.eps).sqrt())
        .collect();
    let mut out = x.clone();
    for (j, v) in out.data_mut().iter_mut().enumerate() {
        let ch = (j / spatial) % c;
        *v = (*v - bn.mean[ch]) * scale[ch] + bn.beta[ch];
    }
    Ok(out)
}

fn run<T: Scalar>(layers: &[InferLayer<T>], mut x: Tensor<T>) -> Result<Tensor<T>> {
    for layer in layers {
        x = match layer {
            InferLayer::Fp {
                kind, weight, bias, ..
            } => match kind {
                LayerKind::Conv(g) => ops::conv2d(&x, weight, *g)?,
                LayerKind::Dense => ops::dense(&x, weight, bias.as_ref())?,
            },
            InferLayer::Packed {
                kind,
                branches,
                bias,
                alpha,
                ..
            } => {
                let mut acc: Option<Tensor<T>> = None;
                for (k, b) in branches.iter().enumerate() {
                    let y = match kind {
                        LayerKind::Conv(g) => ternary_conv2d(&x, b, *g, *alpha)?,
                        LayerKind::Dense => {
                            ternary_dense(&x, b, if k == 0 { bias.as_ref() } else { None }, *alpha)?
                        }
                    };
                    match &mut acc {
                        None => acc = Some(y),
                        Some(a) => a.add_assign(&y)?,
                    }
                }
                acc.ok_or(TernError::Empty("packed layer without branches"))?
            }
            InferLayer::BatchNorm { params, .. } => batchnorm_eval(&x, params)?,
            InferLayer::Relu => ops::relu(&x),
            InferLayer::MaxPool(g) => ops::maxpool2d(&x, *g)?.0,
            InferLayer::GlobalAvgPool => ops::global_avg_pool(&x)?,
            InferLayer::Flatten => {
                let n = x.shape()[0];
                let f = x.len() / n.max(1);
                x.reshape(&[n, f])?
            }
            InferLayer::Residual { body, shortcut } => {
                let mut y = run(body, x.clone())?;
                let s = match shortcut {
                    InferShortcut::Identity => x,
                    InferShortcut::Pad {
                        stride,
                        out_channels,
                    } => ops::shortcut_pad(&x, *stride, *out_channels)?,
                    InferShortcut::Projection(p) => run(p, x)?,
                };
                y.add_assign(&s)?;
                ops::relu(&y)
            }
        };
    }
    Ok(x)
}

fn fold_in<T: Scalar>(layers: &mut [InferLayer<T>], name: &str) -> Option<Result<()>> {
    for i in 0..layers.len() {
        if let InferLayer::Residual { body, shortcut } = &mut layers[i] {
            if let Some(r) = fold_in(body, name) {
                return Some(r);
            }
            if let InferShortcut::Projection(p) = shortcut {
                if let Some(r) = fold_in(p, name) {
                    return Some(r);
                }
            }
            continue;
        }
        let InferLayer::Packed { name: n, .. } = &layers[i] else {
            continue;
        };
        if n != name {
            continue;
        }
        return Some(fold_at(layers, i));
    }
    None
}

fn fold_at<T: Scalar>(layers: &mut [InferLayer<T>], i: usize) -> Result<()> {
    let (head, tail) = layers.split_at_mut(i + 1);
    let InferLayer::Packed {
        name,
        branches,
        alpha,
        ..
    } = &mut head[i]
    else {
        unreachable!("fold_at is only called on packed layers")
    };
    let layer_err = |reason: &str| TernError::Layer {
        layer: name.clone(),
        reason: reason.into(),
    };
    if *alpha == AlphaMode::Folded {
        return Ok(());
    }
    let Some(InferLayer::BatchNorm { params, .. }) = tail.first_mut() else {
        return Err(layer_err(
            "no batch norm follows this layer; keep the scaling factor explicit",
        ));
    };
    let a = branches[0].alpha();
    if branches.iter().any(|b| b.alpha() != a) {
        return Err(layer_err(
            "branches have different scaling factors; keep them explicit",
        ));
    }
    *params = fold_alpha_into_bn(a, params).map_err(|e| layer_err(&e.to_string()))?;
    *alpha = AlphaMode::Folded;
    Ok(())
}

impl<T: Scalar> InferenceNet<T> {
    /// Snapshot of `graph`; quantized layers are packed from `views`, or
    /// kept full precision when `views` is `None`.
    pub fn from_graph(graph: &ModelGraph<T>, views: Option<&QuantViews<T>>) -> Result<Self> {
        Ok(InferenceNet {
            layers: convert(&graph.layers, graph, views)?,
            classes: graph.classes,
        })
    }

    pub fn layers(&self) -> &[InferLayer<T>] {
        &self.layers
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Logits for an `N×C×H×W` batch.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        run(&self.layers, x.clone())
    }

    /// Moves the named layer's scaling factor into the batch norm after it.
    pub fn fold_alpha(&mut self, layer: &str) -> Result<()> {
        fold_in(&mut self.layers, layer).unwrap_or_else(|| {
            Err(TernError::Layer {
                layer: layer.into(),
                reason: "no packed layer with this name".into(),
            })
        })
    }

    /// Folds every layer that can be folded; returns the names kept explicit.
    pub fn fold_all(&mut self) -> Vec<String> {
        let mut names = Vec::new();
        collect_packed(&self.layers, &mut names);
        names
            .into_iter()
            .filter(|n| self.fold_alpha(n).is_err())
            .collect()
    }
}

fn collect_packed<T>(layers: &[InferLayer<T>], out: &mut Vec<String>) {
    for l in layers {
        match l {
            InferLayer::Packed { name, .. } => out.push(name.clone()),
            InferLayer::Residual { body, shortcut } => {
                collect_packed(body, out);
                if let InferShortcut::Projection(p) = shortcut {
                    collect_packed(p, out);
                }
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::{Arch, Policy};
    use crate::ops::NormMode;
    use rand::SeedableRng;

    fn trained_stats(g: &mut ModelGraph<f32>, x: &Tensor<f32>) {
        // a few train-mode passes give the running statistics non-trivial values
        for _ in 0..3 {
            let mut tape = Tape::new();
            g.forward(&mut tape, x.clone(), None, NormMode::Train)
                .unwrap();
        }
    }

    #[test]
    fn fp_net_matches_tape_eval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut g = Arch::ResNet20.build::<f32>([3, 8, 8], 5, 2).unwrap();
        let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng);
        trained_stats(&mut g, &x);
        let net = InferenceNet::from_graph(&g, None).unwrap();
        let mut tape = Tape::new();
        let y = g
            .forward(&mut tape, x.clone(), None, NormMode::Eval)
            .unwrap();
        assert!(net.forward(&x).unwrap().max_rel_diff(tape.value(y), 1.0) < 1e-5);
    }

    #[test]
    fn packed_net_matches_tape_with_dequantized_weights() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut g = Arch::LeNet { width: 4 }
            .build::<f32>([1, 8, 8], 3, 2)
            .unwrap();
        g.set_policy(&Policy::Rel(vec![0.05, 0.1]), false);
        let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut rng);
        trained_stats(&mut g, &x);
        let views = g.quantize().unwrap();
        let net = InferenceNet::from_graph(&g, Some(&views)).unwrap();
        let mut tape = Tape::new();
        let y = g
            .forward(&mut tape, x.clone(), Some(&views), NormMode::Eval)
            .unwrap();
        assert!(net.forward(&x).unwrap().max_rel_diff(tape.value(y), 1.0) < 1e-5);
    }

    #[test]
    fn folding_preserves_outputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut g = Arch::LeNet { width: 4 }
            .build::<f32>([1, 8, 8], 3, 7)
            .unwrap();
        g.set_policy(&Policy::Tern(0.05), false);
        let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut rng);
        trained_stats(&mut g, &x);
        let views = g.quantize().unwrap();
        let net = InferenceNet::from_graph(&g, Some(&views)).unwrap();
        let mut folded = net.clone();
        // the classifier has no batch norm after it
        assert_eq!(folded.fold_all(), vec!["fc2".to_string()]);
        let (a, b) = (net.forward(&x).unwrap(), folded.forward(&x).unwrap());
        assert!(a.max_rel_diff(&b, 1.0) < 1e-5);
        let err = folded.fold_alpha("fc2").unwrap_err();
        assert!(err.to_string().contains("keep the scaling factor explicit"));
    }

    #[test]
    fn rel_with_distinct_alphas_cannot_fold() {
        let mut g = Arch::LeNet { width: 4 }
            .build::<f32>([1, 8, 8], 3, 7)
            .unwrap();
        g.set_policy(&Policy::Rel(vec![0.05, 0.1]), false);
        let views = g.quantize().unwrap();
        let mut net = InferenceNet::from_graph(&g, Some(&views)).unwrap();
        assert!(net.fold_alpha("conv1").is_err());
    }
}
