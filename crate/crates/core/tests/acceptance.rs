//! Acceptance criteria 1 to 11. Each test writes one `PASS` or `FAIL` line
//! to stderr, bypassing the test harness capture.
//!
//! Criterion 10 trains ResNet-20 on CIFAR-10 for the full schedule and is
//! ignored by default; run it with
//! `TERN_CIFAR10_DIR=<dir> cargo test --release -p tern-core --test acceptance -- --ignored`.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tern_core::analysis::{compression_rate, fpga_cost, FpgaModel};
use tern_core::exec::{counters, pack, reset_counters, ternary_conv2d, ternary_dense, AlphaMode};
use tern_core::io::data::synthetic;
use tern_core::io::{load_dataset, save_fp, save_ternary, DatasetSource, Splits, SyntheticSpec};
use tern_core::model::{Arch, ModelGraph};
use tern_core::ops::{conv2d, dense, ConvGeometry};
use tern_core::rel::{default_betas, effective_quantizer, expand, rel_forward, LayerKind};
use tern_core::ternarize::{dequantize, ste_backward, ternarize};
use tern_core::train::{evaluate, fit, Mode, Quantizer, TrainConfig};
use tern_core::Tensor;

/// Runs one criterion, writes its result line and fails the test on error.
fn criterion(n: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let outcome = match catch_unwind(AssertUnwindSafe(body)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let line = match &outcome {
        Ok(detail) => format!("criterion {n:>2} PASS  {name}: {detail}\n"),
        Err(why) => format!("criterion {n:>2} FAIL  {name}: {why}\n"),
    };
    let _ = std::io::stderr().write_all(line.as_bytes());
    if let Err(why) = outcome {
        panic!("criterion {n} failed: {why}");
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Threshold, codes and scaling factor written out elementwise, one scalar
/// at a time, with the threshold product taken in the tensor's precision.
fn scalar_ternarize(w: &[f32], beta: f32) -> (Vec<i8>, f64) {
    let mut max = 0.0f32;
    for &v in w {
        if v.abs() > max {
            max = v.abs();
        }
    }
    let th = beta * max;
    let mut codes = Vec::with_capacity(w.len());
    let (mut sum, mut count) = (0.0f64, 0u64);
    for &v in w {
        if v.abs() >= th && v != 0.0 {
            codes.push(if v > 0.0 { 1 } else { -1 });
        } else {
            codes.push(0);
        }
        if v.abs() >= th {
            sum += v.abs() as f64;
            count += 1;
        }
    }
    (codes, if count == 0 { 0.0 } else { sum / count as f64 })
}

#[test]
fn c01_quantizer_matches_scalar_oracle() {
    criterion(1, "quantizer oracle", || {
        let start = Instant::now();
        let mut r = rng(1);
        let mut elements = 0usize;
        for case in 0..1000 {
            // log-uniform size in [1, 1e5]
            let len = (10f64.powf(r.gen_range(0.0..=5.0)).round() as usize).clamp(1, 100_000);
            let beta = [0.05f32, 0.1, 0.2][case % 3];
            let scale: f64 = 10f64.powf(r.gen_range(-3.0..1.0));
            let w = Tensor::<f32>::randn(&[len], scale, &mut r);
            let t = ternarize(&w, beta).map_err(|e| e.to_string())?;
            let (codes, alpha) = scalar_ternarize(w.data(), beta);
            ensure(t.codes() == codes.as_slice(), || {
                format!("case {case}: codes differ (len {len}, beta {beta})")
            })?;
            let got = t.alpha() as f64;
            let rel = (got - alpha).abs() / alpha.abs().max(f64::MIN_POSITIVE);
            ensure(alpha == 0.0 && got == 0.0 || rel <= 1e-6, || {
                format!("case {case}: alpha {got} vs {alpha}")
            })?;
            elements += len;
        }
        let secs = start.elapsed().as_secs_f64();
        ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
        Ok(format!(
            "1000 tensors, {elements} elements, exact codes, {secs:.2}s"
        ))
    });
}

#[test]
fn c02_ste_is_exact() {
    criterion(2, "straight-through estimator", || {
        let weight = prop_oneof![
            Just(1.0f32),
            Just(-1.0f32),
            Just(0.0f32),
            Just(f32::from_bits(1.0f32.to_bits() + 1)),
            Just(f32::from_bits(1.0f32.to_bits() - 1)),
            -3.0f32..3.0,
        ];
        let cases = prop::collection::vec((weight, -5.0f32..5.0), 1..300);
        let mut runner = TestRunner::new(ProptestConfig {
            cases: 512,
            ..ProptestConfig::default()
        });
        let mut boundary = 0usize;
        runner
            .run(&cases, |pairs| {
                let w =
                    Tensor::new(vec![pairs.len()], pairs.iter().map(|p| p.0).collect()).unwrap();
                let g =
                    Tensor::new(vec![pairs.len()], pairs.iter().map(|p| p.1).collect()).unwrap();
                let out = ste_backward(&g, &w).unwrap();
                for (i, &(wv, gv)) in pairs.iter().enumerate() {
                    let expected = if wv.abs() <= 1.0 { gv } else { 0.0 };
                    prop_assert_eq!(out.data()[i].to_bits(), expected.to_bits());
                }
                Ok(())
            })
            .map_err(|e| e.to_string())?;
        let w = Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.25f32, -4.0]).unwrap();
        ensure(ste_backward(&g, &w).unwrap().data() == [0.25, -4.0], || {
            "boundary |w| = 1 clipped".into()
        })?;
        boundary += 2;
        Ok(format!(
            "512 random cases bit-exact, {boundary} explicit boundary values pass"
        ))
    });
}

/// A random ternary conv instance: input, weights and geometry.
fn random_conv(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, ConvGeometry) {
    let k: usize = r.gen_range(1..=3);
    let stride = r.gen_range(1..=2);
    let pad = r.gen_range(0..k);
    let h = r.gen_range(k.saturating_sub(2 * pad).max(1)..=9);
    let w = r.gen_range(k.saturating_sub(2 * pad).max(1)..=9);
    let (n, c, o) = (r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=5));
    (
        Tensor::randn(&[n, c, h, w], 1.0, r),
        Tensor::randn(&[o, c, k, k], 0.5, r),
        ConvGeometry::new(stride, pad),
    )
}

#[test]
fn c03_packed_kernels_match_dense() {
    criterion(3, "kernel equivalence", || {
        ensure(cfg!(debug_assertions), || {
            "operation counters need debug assertions".into()
        })?;
        let start = Instant::now();
        let mut r = rng(3);
        let mut worst = 0.0f64;
        let (mut convs, mut denses) = (0, 0);
        for case in 0..400 {
            let beta = [0.05, 0.1, 0.2, 0.5][case % 4];
            let (x, reference, t, counts, outputs, mode) = if case % 2 == 0 {
                let (x, w, geom) = random_conv(&mut r);
                let t = ternarize(&w, beta).unwrap();
                let mode = if case % 8 == 0 {
                    AlphaMode::Folded
                } else {
                    AlphaMode::Apply
                };
                reset_counters();
                let y = ternary_conv2d(&x, &pack(&t), geom, mode).unwrap();
                let counts = counters();
                let mut reference = conv2d(&x, &dequantize(&t), geom).unwrap();
                if mode == AlphaMode::Folded {
                    reference = reference.scale(1.0 / t.alpha().max(f64::MIN_POSITIVE));
                    if t.alpha() == 0.0 {
                        reference = Tensor::zeros(y.shape());
                    }
                }
                convs += 1;
                (y, reference, t, counts, y_len(&x, &w, geom), mode)
            } else {
                let (n, f, g) = (r.gen_range(1..=4), r.gen_range(1..=40), r.gen_range(1..=12));
                let x = Tensor::randn(&[n, f], 1.0, &mut r);
                let w = Tensor::randn(&[f, g], 0.5, &mut r);
                let b = Tensor::randn(&[g], 0.5, &mut r);
                let t = ternarize(&w, beta).unwrap();
                reset_counters();
                let y = ternary_dense(&x, &pack(&t), Some(&b), AlphaMode::Apply).unwrap();
                let counts = counters();
                let reference = dense(&x, &dequantize(&t), Some(&b)).unwrap();
                denses += 1;
                (y, reference, t, counts, (n * g) as u64, AlphaMode::Apply)
            };
            let err = x.max_rel_diff(&reference, 1e-9);
            worst = worst.max(err);
            ensure(err <= 1e-5, || {
                format!("case {case}: relative error {err:.2e}")
            })?;
            ensure(counts.weight_mul == 0, || {
                format!("case {case}: {} weight multiplies", counts.weight_mul)
            })?;
            let expected_scale = if mode == AlphaMode::Apply { outputs } else { 0 };
            ensure(counts.scale_mul == expected_scale, || {
                format!(
                    "case {case}: {} scale multiplies for {outputs} outputs",
                    counts.scale_mul
                )
            })?;
            let _ = t;
        }
        let secs = start.elapsed().as_secs_f64();
        ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
        Ok(format!(
            "{convs} conv + {denses} dense geometries, max rel err {worst:.1e}, zero weight multiplies, {secs:.2}s"
        ))
    });
}

fn y_len(x: &Tensor<f64>, w: &Tensor<f64>, geom: ConvGeometry) -> u64 {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = geom.out_dim(xs[2], ws[2]).unwrap();
    let ow = geom.out_dim(xs[3], ws[3]).unwrap();
    (xs[0] * ws[0] * oh * ow) as u64
}

#[test]
fn c04_rel_matches_effective_quantizer() {
    criterion(4, "expanded layer equivalence", || {
        let mut r = rng(4);
        let mut worst = 0.0f64;
        let mut instances = 0;
        for t_ex in [1usize, 2, 4] {
            let betas = default_betas(t_ex).unwrap();
            for case in 0..100 {
                let (x, w, geom) = random_conv(&mut r);
                let stack = expand(&w, &betas).map_err(|e| e.to_string())?;
                let y = rel_forward(&x, &stack, LayerKind::Conv(geom)).unwrap();
                let eff = effective_quantizer(&stack);
                let reference = conv2d(&x, &eff, geom).unwrap();
                let err = y.max_rel_diff(&reference, 1e-9);
                worst = worst.max(err);
                ensure(err <= 1e-5, || {
                    format!("T_ex {t_ex} case {case}: relative error {err:.2e}")
                })?;
                ensure(stack.zeros_nest(), || {
                    format!("T_ex {t_ex} case {case}: zeros do not nest")
                })?;
                let levels: BTreeSet<u64> = eff.data().iter().map(|v| v.to_bits()).collect();
                ensure(levels.len() <= 2 * t_ex + 1, || {
                    format!("T_ex {t_ex} case {case}: {} distinct levels", levels.len())
                })?;
                instances += 1;
            }
        }
        Ok(format!("{instances} instances over T_ex 1/2/4, max rel err {worst:.1e}, zeros nest, level bound holds"))
    });
}

#[test]
fn c05_gradients_match_finite_differences() {
    criterion(5, "gradient checks", || {
        common::grad_all_ops();
        common::grad_small_cnn();
        Ok("conv2d, dense, batch norm, relu, pooling, shape ops, elementwise, softmax cross-entropy, small CNN".into())
    });
}

#[test]
fn c06_fpga_table() {
    criterion(6, "FPGA cost table", || {
        let unit = FpgaModel::default();
        let fp = fpga_cost(&unit, 100, 0);
        let tern = fpga_cost(&unit, 0, 90);
        ensure((fp.fp_lut, fp.fp_dsp) == (49_600, 200), || {
            format!("fp {fp:?}")
        })?;
        ensure((tern.tern_lut, tern.tern_dsp) == (23_490, 0), || {
            format!("ternary {tern:?}")
        })?;
        Ok("100 FP MACs: 49600 LUT / 200 DSP; 90 ternary MACs: 23490 LUT / 0 DSP".into())
    });
}

#[test]
fn c07_compression_rates() {
    criterion(7, "compression rates", || {
        let g = Arch::ResNet20
            .build::<f32>([3, 32, 32], 10, 7)
            .map_err(|e| e.to_string())?;
        let rate = |t| {
            compression_rate(&g, t)
                .map(|c| c.rate)
                .map_err(|e| e.to_string())
        };
        let (r1, r2, r4) = (rate(1)?, rate(2)?, rate(4)?);
        ensure(r1 >= 15.0, || format!("T_ex 1: {r1:.3}x"))?;
        ensure((7.5..=8.0).contains(&r2), || format!("T_ex 2: {r2:.3}x"))?;
        ensure((3.75..=4.0).contains(&r4), || format!("T_ex 4: {r4:.3}x"))?;
        Ok(format!(
            "ResNet-20: {r1:.2}x / {r2:.2}x / {r4:.2}x at T_ex 1 / 2 / 4"
        ))
    });
}

/// Test accuracies of one seed, in percent.
#[derive(Clone, Copy, Debug)]
struct DeskSeed {
    fp: f64,
    tw: f64,
    tw_ics: f64,
    tw_ics_ft: f64,
    rel: f64,
}

struct Desk {
    seeds: Vec<DeskSeed>,
    secs: f64,
}

pub const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_FP_EPOCHS: usize = 8;
const DESK_FT_EPOCHS: usize = 4;
const DESK_ARCH: Arch = Arch::LeNet { width: 4 };

fn desk_seed(data: &Splits<f32>, seed: u64) -> tern_core::Result<DeskSeed> {
    let build = || DESK_ARCH.build::<f32>(data.train.sample_shape(), data.train.classes(), seed);
    let pct = |g: &ModelGraph<f32>, q: &Quantizer<f32>| {
        evaluate(g, &data.test, q).map(|a| 100.0 * a.top1)
    };
    let mut fp = build()?;
    fit(
        &mut fp,
        &data.train,
        &data.test,
        &TrainConfig::fp(DESK_FP_EPOCHS, seed),
    )?;
    let run = |mode: Mode| -> tern_core::Result<f64> {
        let epochs = if mode.fine_tunes() {
            DESK_FT_EPOCHS
        } else {
            DESK_FP_EPOCHS
        };
        let cfg = TrainConfig::ternary(mode, epochs, seed);
        let mut g = if mode.fine_tunes() {
            fp.clone()
        } else {
            build()?
        };
        g.set_policy(&cfg.policy()?, cfg.first_last_fp);
        let result = fit(&mut g, &data.train, &data.test, &cfg)?;
        pct(&g, &result.quantizer)
    };
    Ok(DeskSeed {
        tw: run(Mode::Tw)?,
        tw_ics: run(Mode::TwIcs)?,
        tw_ics_ft: run(Mode::TwIcsFt)?,
        rel: run(Mode::TwIcsFtRel)?,
        fp: pct(&fp, &Quantizer::Fp)?,
    })
}

/// The desk-scale ablation, run once and shared by criteria 8 and 9.
fn desk() -> Result<&'static Desk, String> {
    static DESK: OnceLock<Result<Desk, String>> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let data = synthetic::<f32>(&SyntheticSpec::default()).map_err(|e| e.to_string())?;
        let seeds = DESK_SEEDS
            .iter()
            .map(|&s| desk_seed(&data, s).map_err(|e| format!("seed {s}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Desk {
            seeds,
            secs: start.elapsed().as_secs_f64(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn c08_desk_scale_ternarization() {
    criterion(8, "desk-scale training", || {
        let d = desk()?;
        let fp = median(d.seeds.iter().map(|s| s.fp).collect());
        let gap = median(d.seeds.iter().map(|s| s.fp - s.tw_ics_ft).collect());
        let rel_gap = median(d.seeds.iter().map(|s| s.fp - s.rel).collect());
        let detail = format!(
            "FP {fp:.2}%, TW+ICS+FT gap {gap:+.2}, with REL {rel_gap:+.2} points (median of {} seeds, {:.0}s)",
            d.seeds.len(),
            d.secs
        );
        ensure(fp >= 97.0, || format!("FP below 97%: {detail}"))?;
        ensure(gap <= 1.5, || format!("ternary gap above 1.5: {detail}"))?;
        ensure(rel_gap <= 0.75, || format!("REL gap above 0.75: {detail}"))?;
        ensure(d.secs <= 1800.0, || format!("over 30 minutes: {detail}"))?;
        Ok(detail)
    });
}

#[test]
fn c09_ablation_ordering() {
    criterion(9, "ablation ordering", || {
        let d = desk()?;
        let m = |f: fn(&DeskSeed) -> f64| median(d.seeds.iter().map(f).collect());
        let order = [
            ("TW", m(|s| s.tw)),
            ("TW+ICS", m(|s| s.tw_ics)),
            ("TW+ICS+FT", m(|s| s.tw_ics_ft)),
            ("TW+ICS+FT+REL", m(|s| s.rel)),
        ];
        let detail = order
            .iter()
            .map(|(n, a)| format!("{n} {a:.2}"))
            .collect::<Vec<_>>()
            .join(", ");
        for pair in order.windows(2) {
            ensure(pair[0].1 <= pair[1].1 + 0.3, || {
                format!("{} above {}: {detail}", pair[0].0, pair[1].0)
            })?;
        }
        Ok(detail)
    });
}

#[test]
#[ignore = "full CIFAR-10 schedule; needs TERN_CIFAR10_DIR and days of CPU time"]
fn c10_resnet20_cifar10() {
    criterion(10, "ResNet-20 on CIFAR-10", || {
        let dir = std::env::var("TERN_CIFAR10_DIR")
            .map_err(|_| "TERN_CIFAR10_DIR is not set".to_string())?;
        let data =
            load_dataset::<f32>(&DatasetSource::Cifar10(dir.into())).map_err(|e| e.to_string())?;
        let seed = 0;
        let mut fp = Arch::ResNet20
            .build::<f32>(data.train.sample_shape(), data.train.classes(), seed)
            .map_err(|e| e.to_string())?;
        let mut cfg = TrainConfig::fp(160, seed);
        cfg.batch_size = 128;
        cfg.milestones = vec![80, 120];
        cfg.augment = tern_core::io::Augment::CIFAR;
        fit(&mut fp, &data.train, &data.test, &cfg).map_err(|e| e.to_string())?;
        let fp_acc = 100.0
            * evaluate(&fp, &data.test, &Quantizer::Fp)
                .map_err(|e| e.to_string())?
                .top1;
        let mut tcfg = TrainConfig::ternary(Mode::TwIcsFt, 200, seed);
        tcfg.batch_size = 128;
        tcfg.augment = tern_core::io::Augment::CIFAR;
        let mut g = fp.clone();
        g.set_policy(&tcfg.policy().map_err(|e| e.to_string())?, false);
        let r = fit(&mut g, &data.train, &data.test, &tcfg).map_err(|e| e.to_string())?;
        let acc = 100.0
            * evaluate(&g, &data.test, &r.quantizer)
                .map_err(|e| e.to_string())?
                .top1;
        let detail = format!("FP {fp_acc:.2}%, ternary {acc:.2}%");
        ensure(fp_acc - acc <= 1.0, || {
            format!("gap above 1 point: {detail}")
        })?;
        Ok(detail)
    });
}

#[test]
fn c11_runs_are_byte_identical() {
    criterion(11, "determinism", || {
        let spec = SyntheticSpec {
            train: 512,
            test: 256,
            ..SyntheticSpec::default()
        };
        let data = synthetic::<f32>(&spec).map_err(|e| e.to_string())?;
        let run = || -> tern_core::Result<(Vec<u8>, Vec<u8>, String, String)> {
            let mut g =
                DESK_ARCH.build::<f32>(data.train.sample_shape(), data.train.classes(), 5)?;
            let fp = fit(&mut g, &data.train, &data.test, &TrainConfig::fp(2, 5))?;
            let cfg = TrainConfig::ternary(Mode::TwIcsFtRel, 2, 5);
            g.set_policy(&cfg.policy()?, false);
            let tern = fit(&mut g, &data.train, &data.test, &cfg)?;
            let views = tern.quantizer.views(&g)?.expect("ternary mode");
            Ok((
                save_fp(&fp.best)?.encode(),
                save_ternary(&g, &views)?.encode(),
                fp.history.to_csv(),
                tern.history.to_csv(),
            ))
        };
        let a = run().map_err(|e| e.to_string())?;
        let b = run().map_err(|e| e.to_string())?;
        ensure(a.0 == b.0, || "FP model files differ".into())?;
        ensure(a.1 == b.1, || "ternary model files differ".into())?;
        ensure(a.2 == b.2 && a.3 == b.3, || "history CSVs differ".into())?;
        Ok(format!(
            "model files ({} and {} bytes) and history CSVs identical",
            a.0.len(),
            a.1.len()
        ))
    });
}
