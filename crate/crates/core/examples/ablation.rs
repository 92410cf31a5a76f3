//! Runs the ternarization ablation on the synthetic task.
//!
//! ```text
//! cargo run --release -p tern-core --example ablation -- [noise] [fp_epochs] [ft_epochs] [seeds] [width] [train] [test]
//! ```

use std::time::Instant;

use tern_core::io::data::synthetic;
use tern_core::io::SyntheticSpec;
use tern_core::model::Arch;
use tern_core::train::{evaluate, fit, Mode, Quantizer, TrainConfig};

fn main() -> tern_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let spec = SyntheticSpec {
        noise: arg(0, 1.4),
        train: arg(5, 8000.0) as usize,
        test: arg(6, 5000.0) as usize,
        ..SyntheticSpec::default()
    };
    let (fp_epochs, ft_epochs, seeds) = (
        arg(1, 8.0) as usize,
        arg(2, 4.0) as usize,
        arg(3, 3.0) as u64,
    );
    let data = synthetic::<f32>(&spec)?;
    let arch = Arch::LeNet {
        width: arg(4, 4.0) as usize,
    };
    for seed in 0..seeds {
        let t = Instant::now();
        let mut fp = arch.build::<f32>(data.train.sample_shape(), data.train.classes(), seed)?;
        fit(
            &mut fp,
            &data.train,
            &data.test,
            &TrainConfig::fp(fp_epochs, seed),
        )?;
        let fp_acc = evaluate(&fp, &data.test, &Quantizer::Fp)?.top1;
        print!("seed {seed}: fp {:.2}", 100.0 * fp_acc);
        for mode in [Mode::Tw, Mode::TwIcs, Mode::TwIcsFt, Mode::TwIcsFtRel] {
            let mut cfg = TrainConfig::ternary(
                mode,
                if mode.fine_tunes() {
                    ft_epochs
                } else {
                    fp_epochs
                },
                seed,
            );
            if mode.fine_tunes() {
                // e.g. FT_SET="optimizer=sgd;lr=0.1"
                for kv in std::env::var("FT_SET")
                    .unwrap_or_default()
                    .split(';')
                    .filter(|s| !s.is_empty())
                {
                    let (k, v) = kv.split_once('=').expect("key=value");
                    cfg.set(k, v)?;
                }
            }
            let mut g = if mode.fine_tunes() {
                fp.clone()
            } else {
                arch.build::<f32>(data.train.sample_shape(), data.train.classes(), seed)?
            };
            g.set_policy(&cfg.policy()?, false);
            let r = fit(&mut g, &data.train, &data.test, &cfg)?;
            print!(
                "  {mode} {:.2}",
                100.0 * evaluate(&g, &data.test, &r.quantizer)?.top1
            );
        }
        println!("  ({:.1}s)", t.elapsed().as_secs_f64());
    }
    Ok(())
}
