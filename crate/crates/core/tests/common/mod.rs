//! Shared helpers for the integration tests.
//!
//! Gradient checks use central finite differences in f64 with step 1e-3 and
//! relative tolerance 1e-4.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tern_core::autodiff::{Tape, Var};
use tern_core::model::{Arch, ModelGraph};
use tern_core::ops::{ConvGeometry, NormMode, PoolGeometry, RunningStats};
use tern_core::{Result, Tensor};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;
/// Gradients below this magnitude are compared in absolute terms.
const FLOOR: f64 = 1e-3;

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero, so ReLU kinks stay out of reach of the
/// finite-difference step.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so max-pool choices are stable.
fn spread(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(&mut rng(seed));
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// Loss `Σ y ⊙ r` with `r` a fixed random tensor, so every output element
/// carries a distinct weight.
fn loss_of(
    build: &Build,
    params: &[Tensor<f64>],
    r: &Tensor<f64>,
) -> Result<(f64, Tape<f64>, Var)> {
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(i, p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &vars)?;
    let loss = if tape.value(y).len() == 1 && r.len() == 1 {
        y
    } else {
        let rv = tape.input(r.clone())?;
        let m = tape.mul(y, rv)?;
        tape.sum(m)?
    };
    Ok((tape.value(loss).data()[0], tape, loss))
}

fn check(name: &str, params: Vec<Tensor<f64>>, build: &Build) {
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(i, p.clone()).unwrap())
            .collect();
        let y = build(&mut tape, &vars).unwrap();
        tape.value(y).shape().to_vec()
    };
    let r = Tensor::randn(&shape, 1.0, &mut rng(99));
    let (_, mut tape, loss) = loss_of(build, &params, &r).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (i, p) in params.iter().enumerate() {
        let analytic = grads
            .get(i)
            .unwrap_or_else(|| panic!("{name}: no gradient for input {i}"));
        let numeric = Tensor::from_fn(p.shape(), |j| {
            let mut probe = params.clone();
            probe[i].data_mut()[j] = p.data()[j] + STEP;
            let up = loss_of(build, &probe, &r).unwrap().0;
            probe[i].data_mut()[j] = p.data()[j] - STEP;
            let down = loss_of(build, &probe, &r).unwrap().0;
            (up - down) / (2.0 * STEP)
        });
        let err = analytic.max_rel_diff(&numeric, FLOOR);
        assert!(err < TOL, "{name} input {i}: relative error {err:.3e}");
    }
}

pub fn grad_conv2d() {
    for (k, geom) in [
        (3, ConvGeometry::new(1, 0)),
        (3, ConvGeometry::new(1, 1)),
        (3, ConvGeometry::new(2, 1)),
        (1, ConvGeometry::new(2, 0)),
    ] {
        check(
            &format!("conv2d k{k} {geom:?}"),
            vec![
                Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng(1)),
                Tensor::randn(&[4, 3, k, k], 0.5, &mut rng(2)),
            ],
            &|t, v| t.conv2d(v[0], v[1], geom),
        );
    }
}

pub fn grad_dense() {
    let x = Tensor::randn(&[3, 5], 1.0, &mut rng(3));
    let w = Tensor::randn(&[5, 4], 0.5, &mut rng(4));
    let b = Tensor::randn(&[4], 0.5, &mut rng(5));
    check("dense", vec![x.clone(), w.clone()], &|t, v| {
        t.dense(v[0], v[1], None)
    });
    check("dense+bias", vec![x, w, b], &|t, v| {
        t.dense(v[0], v[1], Some(v[2]))
    });
}

pub fn grad_batchnorm() {
    let gamma = Tensor::randn(&[3], 1.0, &mut rng(6));
    let beta = Tensor::randn(&[3], 1.0, &mut rng(7));
    for (shape, mode) in [
        (vec![4, 3, 2, 2], NormMode::Train),
        (vec![5, 3], NormMode::Train),
        (vec![4, 3, 2, 2], NormMode::Eval),
    ] {
        check(
            &format!("batchnorm {shape:?} {mode:?}"),
            vec![
                Tensor::randn(&shape, 1.0, &mut rng(8)),
                gamma.clone(),
                beta.clone(),
            ],
            &|t, v| {
                let mut stats = RunningStats::new(3);
                stats.mean = vec![0.2, -0.1, 0.3];
                stats.var = vec![0.5, 1.5, 2.0];
                t.batchnorm(v[0], v[1], v[2], &mut stats, mode, 1e-5)
            },
        );
    }
}

pub fn grad_relu() {
    check("relu", vec![away_from_zero(&[2, 3, 4], 9)], &|t, v| {
        t.relu(v[0])
    });
}

pub fn grad_pooling() {
    for geom in [
        PoolGeometry {
            kernel: 2,
            stride: 2,
            pad: 0,
        },
        PoolGeometry {
            kernel: 3,
            stride: 2,
            pad: 1,
        },
    ] {
        check(
            &format!("maxpool {geom:?}"),
            vec![spread(&[2, 2, 5, 5], 10)],
            &|t, v| t.maxpool2d(v[0], geom),
        );
    }
    check(
        "global_avg_pool",
        vec![Tensor::randn(&[2, 3, 3, 4], 1.0, &mut rng(11))],
        &|t, v| t.global_avg_pool(v[0]),
    );
}

pub fn grad_shape_ops() {
    let x = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut rng(12));
    check("flatten", vec![x.clone()], &|t, v| t.flatten(v[0]));
    check("reshape", vec![x.clone()], &|t, v| t.reshape(v[0], &[4, 6]));
    check(
        "shortcut_pad",
        vec![Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng(13))],
        &|t, v| t.shortcut_pad(v[0], 2, 4),
    );
}

pub fn grad_elementwise() {
    let a = Tensor::randn(&[2, 5], 1.0, &mut rng(14));
    let b = Tensor::randn(&[2, 5], 1.0, &mut rng(15));
    check("add", vec![a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
    check("scale", vec![a.clone()], &|t, v| t.scale(v[0], -1.7));
    check("sum", vec![a.clone()], &|t, v| t.sum(v[0]));
    // a parameter read twice accumulates both paths
    check("x*x+x", vec![a], &|t, v| {
        let sq = t.mul(v[0], v[0])?;
        t.add(sq, v[0])
    });
}

pub fn grad_softmax_cross_entropy() {
    check(
        "softmax_cross_entropy",
        vec![Tensor::randn(&[4, 5], 2.0, &mut rng(16))],
        &|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]),
    );
}

/// Gradients of a full model through `ModelGraph::forward`, checked on up
/// to `per_param` elements of every parameter. In deep ReLU stacks under
/// batch statistics, nudging one weight moves every later activation, and
/// one of them often changes sign within `STEP`; the probe then shrinks the
/// step to `STEP / 10` and `STEP / 100`, and must agree at one of them.
fn check_graph(
    name: &str,
    mut graph: ModelGraph<f64>,
    x: Tensor<f64>,
    labels: &[usize],
    per_param: usize,
) {
    let loss = |g: &mut ModelGraph<f64>| -> (f64, Tape<f64>, Var) {
        let mut tape = Tape::new();
        let logits = g
            .forward(&mut tape, x.clone(), None, NormMode::Train)
            .unwrap();
        let l = tape.softmax_cross_entropy(logits, labels).unwrap();
        (tape.value(l).data()[0], tape, l)
    };
    let (_, mut tape, l) = loss(&mut graph);
    let grads = tape.backward(l).unwrap();
    let central = |g: &mut ModelGraph<f64>, id: usize, j: usize, h: f64| {
        let orig = g.params()[id].value.data()[j];
        g.params_mut()[id].value.data_mut()[j] = orig + h;
        let up = loss(g).0;
        g.params_mut()[id].value.data_mut()[j] = orig - h;
        let down = loss(g).0;
        g.params_mut()[id].value.data_mut()[j] = orig;
        (up - down) / (2.0 * h)
    };
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(FLOOR);
    let mut r = rng(17);
    for id in 0..graph.params().len() {
        let n = graph.params()[id].value.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        idx.truncate(per_param);
        let g = grads.get(id).unwrap().clone();
        for j in idx {
            let analytic = g.data()[j];
            let numeric: Vec<f64> = [STEP, STEP / 10.0, STEP / 100.0]
                .into_iter()
                .scan(false, |done, h| {
                    if *done {
                        return None;
                    }
                    let d = central(&mut graph, id, j, h);
                    *done = rel(analytic, d) < TOL;
                    Some(d)
                })
                .collect();
            let pname = &graph.params()[id].name;
            assert!(
                rel(analytic, *numeric.last().unwrap()) < TOL,
                "{name} {pname}[{j}]: analytic {analytic:.6e} numeric {numeric:?}"
            );
        }
    }
}

pub fn grad_small_cnn() {
    let graph = Arch::LeNet { width: 2 }
        .build::<f64>([1, 8, 8], 3, 21)
        .unwrap();
    let x = Tensor::randn(&[4, 1, 8, 8], 1.0, &mut rng(22));
    check_graph("lenet", graph, x, &[0, 1, 2, 1], usize::MAX);
}

pub fn grad_residual_network() {
    let graph = Arch::ResNet20.build::<f64>([3, 8, 8], 3, 23).unwrap();
    let x = Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng(24));
    check_graph("resnet20", graph, x, &[2, 0, 1], 3);
}

/// Every differentiable operation.
pub fn grad_all_ops() {
    grad_conv2d();
    grad_dense();
    grad_batchnorm();
    grad_relu();
    grad_pooling();
    grad_shape_ops();
    grad_elementwise();
    grad_softmax_cross_entropy();
}
