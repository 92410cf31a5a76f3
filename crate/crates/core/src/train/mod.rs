//! The ternary training loop: quantize the full-precision weights, run the
//! forward pass with the quantized view, backpropagate through the
//! straight-through estimator and update the full-precision weights.

mod config;

pub use config::{parse_key_values, Mode, TrainConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Result, TernError};
use crate::io::Dataset;
use crate::model::{FrozenThresholds, InferenceNet, ModelGraph, QuantViews};
use crate::ops::NormMode;
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source of the quantized weights used in a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Quantizer<T> {
    /// No quantization.
    Fp,
    /// Threshold and scaling factor recomputed from the current weights.
    Ics,
    /// Threshold and scaling factor captured once.
    Frozen(FrozenThresholds<T>),
}

impl<T: Scalar> Quantizer<T> {
    /// The quantizer a mode trains with, freezing from `graph` where needed.
    pub fn for_mode(mode: Mode, graph: &ModelGraph<T>) -> Result<Self> {
        Ok(match mode {
            Mode::Fp => Quantizer::Fp,
            m if m.ics() => Quantizer::Ics,
            _ => Quantizer::Frozen(graph.freeze_thresholds()?),
        })
    }

    pub fn views(&self, graph: &ModelGraph<T>) -> Result<Option<QuantViews<T>>> {
        Ok(match self {
            Quantizer::Fp => None,
            Quantizer::Ics => Some(graph.quantize()?),
            Quantizer::Frozen(f) => Some(graph.quantize_frozen(f)?),
        })
    }
}

/// Top-1 and top-5 accuracy in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc
            ));
        }
        s
    }
}

/// Outcome of [`fit`].
#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub history: History,
    /// Model at the epoch with the best validation accuracy.
    pub best: ModelGraph<T>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// The quantizer the model was trained with, for evaluation and export.
    pub quantizer: Quantizer<T>,
}

/// Indices of the top `k` entries of `row`, highest first; ties favour the
/// lower index.
fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (usize, usize) {
    let classes = logits.shape()[1];
    let k = classes.min(5);
    let mut top1 = 0;
    let mut top5 = 0;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let top = top_k(row, k);
        top1 += usize::from(top[0] == label);
        top5 += usize::from(top.contains(&label));
    }
    (top1, top5)
}

/// Predicted class per sample.
pub fn predict<T: Scalar>(
    net: &InferenceNet<T>,
    data: &Dataset<T>,
    batch: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch::<ChaCha8Rng>(chunk, None);
        let logits = net.forward(&x)?;
        let c = logits.shape()[1];
        out.extend(logits.data().chunks_exact(c).map(|r| top_k(r, 1)[0]));
    }
    Ok(out)
}

/// Accuracy of an inference network over a dataset.
pub fn evaluate_net<T: Scalar>(net: &InferenceNet<T>, data: &Dataset<T>) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(TernError::Empty("evaluation dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut t1, mut t5) = (0, 0);
    for chunk in idx.chunks(256) {
        let (x, labels) = data.batch::<ChaCha8Rng>(chunk, None);
        let (a, b) = count_correct(&net.forward(&x)?, &labels);
        t1 += a;
        t5 += b;
    }
    let n = data.len() as f64;
    Ok(Accuracy {
        top1: t1 as f64 / n,
        top5: t5 as f64 / n,
    })
}

/// Evaluates with the given quantizer: FP weights for [`Quantizer::Fp`],
/// otherwise the packed ternary path used for deployment.
pub fn evaluate<T: Scalar>(
    graph: &ModelGraph<T>,
    data: &Dataset<T>,
    quantizer: &Quantizer<T>,
) -> Result<Accuracy> {
    let views = quantizer.views(graph)?;
    evaluate_net(&InferenceNet::from_graph(graph, views.as_ref())?, data)
}

/// Loss and number of correct top-1 predictions of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
}

/// One forward/backward/update step. `step` is only used in error reports.
pub fn train_step<T: Scalar>(
    graph: &mut ModelGraph<T>,
    optimizer: &mut Optimizer<T>,
    quantizer: &Quantizer<T>,
    x: Tensor<T>,
    labels: &[usize],
    bn_update: bool,
    step: usize,
) -> Result<StepOutcome> {
    if labels.is_empty() {
        return Err(TernError::Empty("training batch"));
    }
    let views = quantizer.views(graph)?;
    let saved = (!bn_update).then(|| {
        graph
            .batchnorm_layers()
            .into_iter()
            .map(|b| b.stats.clone())
            .collect::<Vec<_>>()
    });
    let mut tape = Tape::new();
    let logits = graph.forward(&mut tape, x, views.as_ref(), NormMode::Train)?;
    let (correct, _) = count_correct(tape.value(logits), labels);
    let loss_var = tape.softmax_cross_entropy(logits, labels)?;
    let loss = tape.value(loss_var).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(TernError::Divergence { step, loss });
    }
    let grads = tape.backward(loss_var)?;
    optimizer.step(graph.params_mut(), &grads)?;
    if let Some(saved) = saved {
        let mut it = saved.into_iter();
        graph.for_each_batchnorm_mut(|bn| bn.stats = it.next().expect("one entry per batch norm"));
    }
    Ok(StepOutcome { loss, correct })
}

/// Trains `graph` per `config`, validating on `val` after every epoch.
///
/// The caller applies the quantization policy and, for fine-tuning modes,
/// loads the pretrained weights first. Thresholds of non-ICS modes are
/// frozen from the weights as passed in.
pub fn fit<T: Scalar>(
    graph: &mut ModelGraph<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    config: &TrainConfig,
) -> Result<FitResult<T>> {
    config.validate()?;
    if train.len() < 2 {
        return Err(TernError::Empty("training set needs at least two samples"));
    }
    let schedule = config.schedule()?;
    let mut optimizer = Optimizer::new(config.optimizer, schedule.lr_at(0), config.weight_decay)?;
    let quantizer = Quantizer::for_mode(config.mode, graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    let mut best: Option<(usize, f64, ModelGraph<T>)> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        optimizer.set_lr(lr)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = train.batch(chunk, Some((config.augment, &mut rng)));
            let out = train_step(
                graph,
                &mut optimizer,
                &quantizer,
                x,
                &labels,
                config.bn_update,
                step,
            )?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            seen += chunk.len();
            step += 1;
        }
        let val_acc = evaluate(graph, val, &quantizer)?.top1;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
        };
        log::info!(
            "{} epoch {}: lr {} loss {:.4} train {:.4} val {:.4}",
            config.mode,
            record.epoch,
            lr,
            record.train_loss,
            record.train_acc,
            val_acc
        );
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| val_acc > *b) {
            best = Some((epoch + 1, val_acc, graph.clone()));
        }
    }
    let (best_epoch, best_val_acc, best) = best.expect("at least one epoch");
    Ok(FitResult {
        history,
        best,
        best_epoch,
        best_val_acc,
        quantizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, Policy};
    use crate::optim::OptimizerKind;
    use crate::ternarize::{compute_alpha, compute_threshold};
    use rand::Rng;

    /// Two linearly separable blobs.
    fn blobs(n: usize, seed: u64) -> Dataset<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let k = i % 2;
            let sign = if k == 0 { 1.0 } else { -1.0 };
            for p in 0..16 {
                let base = if p % 2 == 0 { sign } else { -sign };
                images.push(base + rng.gen_range(-0.5..0.5));
            }
            labels.push(k);
        }
        Dataset::new(images, [1, 4, 4], labels, 2).unwrap()
    }

    fn small() -> ModelGraph<f32> {
        Arch::LeNet { width: 4 }.build([1, 4, 4], 2, 3).unwrap()
    }

    #[test]
    fn zero_lr_leaves_weights_and_loss_unchanged() {
        let mut g = small();
        g.set_policy(&Policy::Tern(0.05), false);
        let data = blobs(8, 0);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.0, 0.0).unwrap();
        let (x, y) = data.batch::<ChaCha8Rng>(&(0..8).collect::<Vec<_>>(), None);
        let before = g.params().to_vec();
        let a = train_step(&mut g, &mut opt, &Quantizer::Ics, x.clone(), &y, false, 0).unwrap();
        let b = train_step(&mut g, &mut opt, &Quantizer::Ics, x, &y, false, 1).unwrap();
        assert_eq!(g.params(), &before[..]);
        assert_eq!(a, b);
    }

    #[test]
    fn weights_beyond_clip_get_no_gradient() {
        let mut g = small();
        g.set_policy(&Policy::Tern(0.05), false);
        let id = g.weight_layers()[1].weight;
        g.params_mut()[id].value.data_mut()[0] = 1.5;
        let data = blobs(8, 1);
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.5, 0.0).unwrap();
        let (x, y) = data.batch::<ChaCha8Rng>(&(0..8).collect::<Vec<_>>(), None);
        train_step(&mut g, &mut opt, &Quantizer::Ics, x, &y, true, 0).unwrap();
        assert_eq!(g.params()[id].value.data()[0], 1.5);
    }

    #[test]
    fn ics_recomputes_alpha_from_current_weights() {
        let mut g = small();
        g.set_policy(&Policy::Tern(0.05), false);
        let data = blobs(16, 2);
        let mut opt = Optimizer::new(OptimizerKind::sgd(), 0.1, 0.0).unwrap();
        let (x, y) = data.batch::<ChaCha8Rng>(&(0..16).collect::<Vec<_>>(), None);
        let id = g.weight_layers()[0].weight;
        let first = g.quantize().unwrap()[&id][0].alpha();
        train_step(&mut g, &mut opt, &Quantizer::Ics, x, &y, true, 0).unwrap();
        let w = &g.params()[id].value;
        let expected = compute_alpha(w, &compute_threshold(w, 0.05).unwrap());
        let second = g.quantize().unwrap()[&id][0].alpha();
        assert_eq!(second, expected);
        assert_ne!(first, second);
    }

    #[test]
    fn frozen_quantizer_keeps_alpha() {
        let mut g = small();
        g.set_policy(&Policy::Tern(0.05), false);
        let q = Quantizer::for_mode(Mode::Tw, &g).unwrap();
        let id = g.weight_layers()[0].weight;
        let before = q.views(&g).unwrap().unwrap()[&id][0].alpha();
        g.params_mut()[id].value = g.params()[id].value.scale(3.0);
        let after = q.views(&g).unwrap().unwrap()[&id][0].alpha();
        assert_eq!(before, after);
    }

    #[test]
    fn separable_task_fp_and_ternary() {
        let train = blobs(64, 3);
        let val = blobs(32, 4);
        let mut fp_cfg = TrainConfig::fp(50, 1);
        fp_cfg.batch_size = 16;
        fp_cfg.lr = 0.05;
        let mut g = small();
        let fp = fit(&mut g, &train, &val, &fp_cfg).unwrap();
        assert!(fp.history.epochs.iter().any(|r| r.train_acc == 1.0));

        let mut t = small();
        t.set_policy(&Policy::Tern(0.05), false);
        let mut cfg = TrainConfig::ternary(Mode::TwIcs, 50, 1);
        cfg.batch_size = 16;
        cfg.lr = 0.05;
        let res = fit(&mut t, &train, &val, &cfg).unwrap();
        let best_train = res
            .history
            .epochs
            .iter()
            .map(|r| r.train_acc)
            .fold(0.0, f64::max);
        assert!(best_train >= 0.95, "{best_train}");
    }

    #[test]
    fn fit_is_deterministic() {
        let train = blobs(32, 5);
        let mut cfg = TrainConfig::ternary(Mode::TwIcs, 3, 9);
        cfg.batch_size = 8;
        cfg.augment = crate::io::Augment { pad: 1, flip: true };
        let run = || {
            let mut g = small();
            g.set_policy(&Policy::Tern(0.05), false);
            fit(&mut g, &train, &train, &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn random_model_is_at_chance() {
        let spec = crate::io::SyntheticSpec {
            train: 10,
            test: 2000,
            ..Default::default()
        };
        let data = crate::io::data::synthetic::<f32>(&spec).unwrap();
        let g = Arch::LeNet { width: 4 }
            .build::<f32>([1, 12, 12], 10, 11)
            .unwrap();
        let acc = evaluate(&g, &data.test, &Quantizer::Fp).unwrap();
        // 10 classes, n = 2000: chance 0.1 with std ≈ 0.0067
        assert!((0.05..=0.2).contains(&acc.top1), "{acc:?}");
        assert!(acc.top5 >= acc.top1);
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                lr: 0.1,
                train_loss: 0.5,
                train_acc: 0.75,
                val_acc: 0.5,
            }],
        };
        assert_eq!(
            h.to_csv(),
            "epoch,lr,train_loss,train_acc,val_acc\n1,0.1,0.500000,0.750000,0.500000\n"
        );
    }
}
