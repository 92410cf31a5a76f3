//! SGD with momentum, Adam and a milestone learning-rate schedule.

use crate::autodiff::Gradients;
use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param {
            name: name.into(),
            value,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    first: Tensor<T>,
    second: Option<Tensor<T>>,
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    slots: Vec<Option<Slot<T>>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TernError::Config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(TernError::Config(
                "weight decay must be non-negative".into(),
            ));
        }
        Ok(Optimizer {
            kind,
            lr,
            weight_decay,
            slots: Vec::new(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TernError::Config(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            let p = params
                .get(id)
                .ok_or_else(|| TernError::Config(format!("gradient for unknown parameter {id}")))?;
            if g.shape() != p.value.shape() {
                return Err(TernError::dim("optimizer_step", g.shape(), p.value.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(TernError::NonFinite {
                    context: format!("gradient of `{}`", p.name),
                });
            }
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        self.steps += 1;
        let (lr, wd) = (T::of(self.lr), T::of(self.weight_decay));
        for (id, g) in grads.iter() {
            let p = &mut params[id].value;
            let slot = self.slots[id].get_or_insert_with(|| Slot {
                first: Tensor::zeros(p.shape()),
                second: match self.kind {
                    OptimizerKind::Adam { .. } => Some(Tensor::zeros(p.shape())),
                    OptimizerKind::Sgd { .. } => None,
                },
            });
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let m = T::of(momentum);
                    for ((w, v), &gi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(slot.first.data_mut())
                        .zip(g.data())
                    {
                        let d = gi + wd * *w;
                        *v = m * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (T::of(beta1), T::of(beta2), T::of(eps));
                    let t = self.steps as i32;
                    let c1 = T::one() - T::of(beta1.powi(t));
                    let c2 = T::one() - T::of(beta2.powi(t));
                    let second = slot.second.as_mut().expect("adam keeps a second moment");
                    for (((w, m1), m2), &gi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(slot.first.data_mut())
                        .zip(second.data_mut())
                        .zip(g.data())
                    {
                        let d = gi + wd * *w;
                        *m1 = b1 * *m1 + (T::one() - b1) * d;
                        *m2 = b2 * *m2 + (T::one() - b2) * d * d;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *w -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Multiplies the base learning rate by `factors[i]` from epoch `milestones[i]` on.
#[derive(Clone, Debug, PartialEq)]
pub struct MilestoneSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub factors: Vec<f64>,
}

impl MilestoneSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, factors: Vec<f64>) -> Result<Self> {
        if milestones.len() != factors.len() {
            return Err(TernError::Config(format!(
                "{} milestones but {} factors",
                milestones.len(),
                factors.len()
            )));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TernError::Config(
                "milestones must be strictly increasing".into(),
            ));
        }
        Ok(MilestoneSchedule {
            base_lr,
            milestones,
            factors,
        })
    }

    pub fn constant(lr: f64) -> Self {
        MilestoneSchedule {
            base_lr: lr,
            milestones: Vec::new(),
            factors: Vec::new(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .zip(&self.factors)
            .filter(|(&m, _)| epoch >= m)
            .fold(self.base_lr, |lr, (_, f)| lr * f)
    }
}
