use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TernError};
use crate::ops::{NormMode, PoolGeometry, RunningStats};
use crate::optim::Param;
use crate::rel::{check_betas, LayerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::ternarize::{
    self, compute_alpha, compute_threshold, ternarize_with, TernaryTensor, ThresholdSpec,
};

/// How a conv or dense layer's weight is used in the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Fp,
    Tern(f64),
    Rel(Vec<f64>),
}

/// Serialized form of a [`Policy`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyTag {
    Fp = 0,
    Tern = 1,
    Rel = 2,
}

impl Policy {
    pub fn tern(beta: f64) -> Result<Self> {
        ternarize::check_beta(beta)?;
        Ok(Policy::Tern(beta))
    }

    pub fn rel(betas: Vec<f64>) -> Result<Self> {
        check_betas(&betas)?;
        Ok(Policy::Rel(betas))
    }

    /// Threshold factors of the quantized branches; empty for FP.
    pub fn betas(&self) -> &[f64] {
        match self {
            Policy::Fp => &[],
            Policy::Tern(b) => std::slice::from_ref(b),
            Policy::Rel(bs) => bs,
        }
    }

    pub fn is_quantized(&self) -> bool {
        !matches!(self, Policy::Fp)
    }

    pub fn tag(&self) -> PolicyTag {
        match self {
            Policy::Fp => PolicyTag::Fp,
            Policy::Tern(_) => PolicyTag::Tern,
            Policy::Rel(_) => PolicyTag::Rel,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightLayer {
    pub name: String,
    pub kind: LayerKind,
    /// Parameter id of the weight (OIHW for conv, F×G for dense).
    pub weight: usize,
    pub bias: Option<usize>,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub name: String,
    pub gamma: usize,
    pub beta: usize,
    pub stats: RunningStats<T>,
    pub eps: T,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Shortcut<T> {
    Identity,
    /// Parameter-free: subsample by `stride`, zero-pad channels.
    Pad {
        stride: usize,
        out_channels: usize,
    },
    /// Learned projection, normally 1×1 conv plus batch norm.
    Projection(Vec<Layer<T>>),
}

/// `relu(body(x) + shortcut(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub name: String,
    pub body: Vec<Layer<T>>,
    pub shortcut: Shortcut<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Weight(WeightLayer),
    BatchNorm(BatchNormLayer<T>),
    Relu,
    MaxPool(PoolGeometry),
    GlobalAvgPool,
    Flatten,
    Residual(ResidualBlock<T>),
}

/// Quantized weights per weight-parameter id, one entry per branch.
pub type QuantViews<T> = BTreeMap<usize, Vec<TernaryTensor<T>>>;

/// Threshold and scaling factor per branch, captured once and reused.
pub type FrozenThresholds<T> = BTreeMap<usize, Vec<(ThresholdSpec<T>, T)>>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    pub(crate) arch: String,
    pub(crate) input: [usize; 3],
    pub(crate) classes: usize,
    pub(crate) layers: Vec<Layer<T>>,
    pub(crate) params: Vec<Param<T>>,
}

fn visit<'a, T>(layers: &'a [Layer<T>], f: &mut impl FnMut(&'a Layer<T>)) {
    for l in layers {
        f(l);
        if let Layer::Residual(r) = l {
            visit(&r.body, f);
            if let Shortcut::Projection(p) = &r.shortcut {
                visit(p, f);
            }
        }
    }
}

fn visit_mut<T>(layers: &mut [Layer<T>], f: &mut impl FnMut(&mut Layer<T>)) {
    for l in layers {
        f(l);
        if let Layer::Residual(r) = l {
            visit_mut(&mut r.body, f);
            if let Shortcut::Projection(p) = &mut r.shortcut {
                visit_mut(p, f);
            }
        }
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(
        arch: impl Into<String>,
        input: [usize; 3],
        classes: usize,
        layers: Vec<Layer<T>>,
        params: Vec<Param<T>>,
    ) -> Self {
        ModelGraph {
            arch: arch.into(),
            input,
            classes,
            layers,
            params,
        }
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    /// `[C, H, W]` of one input sample.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Weight layers in forward order, including shortcut projections.
    pub fn weight_layers(&self) -> Vec<&WeightLayer> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| {
            if let Layer::Weight(w) = l {
                out.push(w);
            }
        });
        out
    }

    pub fn batchnorm_layers(&self) -> Vec<&BatchNormLayer<T>> {
        let mut out = Vec::new();
        visit(&self.layers, &mut |l| {
            if let Layer::BatchNorm(b) = l {
                out.push(b);
            }
        });
        out
    }

    pub(crate) fn for_each_batchnorm_mut(&mut self, mut f: impl FnMut(&mut BatchNormLayer<T>)) {
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::BatchNorm(b) = l {
                f(b);
            }
        });
    }

    /// Sets every weight layer's policy; with `keep_ends_fp` the first and
    /// last weight layers stay full precision.
    pub fn set_policy(&mut self, policy: &Policy, keep_ends_fp: bool) {
        let total = self.weight_layers().len();
        let mut i = 0;
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::Weight(w) = l {
                let end = i == 0 || i + 1 == total;
                w.policy = if keep_ends_fp && end {
                    Policy::Fp
                } else {
                    policy.clone()
                };
                i += 1;
            }
        });
    }

    pub fn set_layer_policy(&mut self, name: &str, policy: Policy) -> Result<()> {
        let mut found = false;
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::Weight(w) = l {
                if w.name == name {
                    w.policy = policy.clone();
                    found = true;
                }
            }
        });
        if found {
            Ok(())
        } else {
            Err(TernError::Layer {
                layer: name.into(),
                reason: "no such weight layer".into(),
            })
        }
    }

    /// Ternarizes every quantized layer from its current weights.
    pub fn quantize(&self) -> Result<QuantViews<T>> {
        let mut views = QuantViews::new();
        for wl in self.weight_layers() {
            if !wl.policy.is_quantized() {
                continue;
            }
            let w = &self.params[wl.weight].value;
            let branches = wl
                .policy
                .betas()
                .iter()
                .map(|&b| ternarize::ternarize(w, T::of(b)))
                .collect::<Result<Vec<_>>>()?;
            views.insert(wl.weight, branches);
        }
        Ok(views)
    }

    /// Captures the current thresholds and scaling factors.
    pub fn freeze_thresholds(&self) -> Result<FrozenThresholds<T>> {
        let mut frozen = FrozenThresholds::new();
        for wl in self.weight_layers() {
            let w = &self.params[wl.weight].value;
            let mut per = Vec::new();
            for &b in wl.policy.betas() {
                let spec = compute_threshold(w, T::of(b))?;
                per.push((spec, compute_alpha(w, &spec)));
            }
            if !per.is_empty() {
                frozen.insert(wl.weight, per);
            }
        }
        Ok(frozen)
    }

    /// Ternarizes current weights against previously frozen thresholds.
    pub fn quantize_frozen(&self, frozen: &FrozenThresholds<T>) -> Result<QuantViews<T>> {
        let mut views = QuantViews::new();
        for wl in self.weight_layers() {
            if !wl.policy.is_quantized() {
                continue;
            }
            let per = frozen.get(&wl.weight).ok_or_else(|| TernError::Layer {
                layer: wl.name.clone(),
                reason: "no frozen threshold recorded".into(),
            })?;
            let w = &self.params[wl.weight].value;
            views.insert(
                wl.weight,
                per.iter().map(|(s, a)| ternarize_with(w, s, *a)).collect(),
            );
        }
        Ok(views)
    }

    /// Records the forward pass of a batch on `tape` and returns the logits.
    /// Quantized layers use `views` when given, their FP weights otherwise.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        input: Tensor<T>,
        views: Option<&QuantViews<T>>,
        mode: NormMode,
    ) -> Result<Var> {
        let [c, h, w] = self.input;
        if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(TernError::dim("model input", input.shape(), &[0, c, h, w]));
        }
        let x = tape.input(input)?;
        run(&mut self.layers, &self.params, tape, x, views, mode)
    }
}

fn run<T: Scalar>(
    layers: &mut [Layer<T>],
    params: &[Param<T>],
    tape: &mut Tape<T>,
    mut x: Var,
    views: Option<&QuantViews<T>>,
    mode: NormMode,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Weight(wl) => weight_forward(wl, params, tape, x, views)?,
            Layer::BatchNorm(bn) => {
                let g = tape.param(bn.gamma, params[bn.gamma].value.clone())?;
                let b = tape.param(bn.beta, params[bn.beta].value.clone())?;
                tape.batchnorm(x, g, b, &mut bn.stats, mode, bn.eps)?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::MaxPool(g) => tape.maxpool2d(x, *g)?,
            Layer::GlobalAvgPool => tape.global_avg_pool(x)?,
            Layer::Flatten => tape.flatten(x)?,
            Layer::Residual(r) => {
                let body = run(&mut r.body, params, tape, x, views, mode)?;
                let short = match &mut r.shortcut {
                    Shortcut::Identity => x,
                    Shortcut::Pad {
                        stride,
                        out_channels,
                    } => tape.shortcut_pad(x, *stride, *out_channels)?,
                    Shortcut::Projection(p) => run(p, params, tape, x, views, mode)?,
                };
                let sum = tape.add(body, short)?;
                tape.relu(sum)?
            }
        };
    }
    Ok(x)
}

fn weight_forward<T: Scalar>(
    wl: &WeightLayer,
    params: &[Param<T>],
    tape: &mut Tape<T>,
    x: Var,
    views: Option<&QuantViews<T>>,
) -> Result<Var> {
    let apply = |tape: &mut Tape<T>, w: Var, bias: Option<Var>| match wl.kind {
        LayerKind::Conv(g) => tape.conv2d(x, w, g),
        LayerKind::Dense => tape.dense(x, w, bias),
    };
    let bias = wl
        .bias
        .map(|b| tape.param(b, params[b].value.clone()))
        .transpose()?;
    let value = &params[wl.weight].value;
    let branches = match views {
        Some(v) if wl.policy.is_quantized() => {
            Some(v.get(&wl.weight).ok_or_else(|| TernError::Layer {
                layer: wl.name.clone(),
                reason: "quantized layer has no ternary view".into(),
            })?)
        }
        _ => None,
    };
    let Some(branches) = branches else {
        let w = tape.param(wl.weight, value.clone())?;
        return apply(tape, w, bias);
    };
    // each branch is a separate read of the same parameter, so the weight
    // receives the sum of the per-branch masked gradients
    let mut acc: Option<Var> = None;
    for (k, q) in branches.iter().enumerate() {
        let w = tape.param(wl.weight, value.clone())?;
        let wq = tape.ternary(w, q)?;
        let y = apply(tape, wq, if k == 0 { bias } else { None })?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    acc.ok_or_else(|| TernError::Layer {
        layer: wl.name.clone(),
        reason: "quantized layer has no branches".into(),
    })
}
