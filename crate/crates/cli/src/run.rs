//! Run configuration and subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use tern_core::analysis::{compression_report, density, fpga_cost, op_counts, FpgaModel};
use tern_core::io::{
    adopt_policies, is_ternary_file, load_dataset, load_fp, load_ternary, save_fp, save_ternary,
    DatasetSource, Splits, SyntheticSpec, TernModelFile,
};
use tern_core::model::{Arch, InferenceNet, ModelGraph, QuantViews};
use tern_core::train::{
    evaluate, evaluate_net, fit, parse_key_values, Accuracy, Mode, Quantizer, TrainConfig,
};
use tern_core::{Result, TernError};

use crate::{Cli, Command, Common};

const DEFAULT_EPOCHS: usize = 10;

/// What a run config is resolved for; decides the mode defaults.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    /// Full-precision training; the mode must be fp.
    Pretrain,
    /// Ternary training; the mode must be ternary.
    Ternarize,
    /// Loading models; any mode.
    Inspect,
}

/// Everything a run depends on. Keys beyond those of [`TrainConfig`]:
///
/// ```text
/// arch = lenet            # lenet | resnet20 | resnet32 | resnet44 | resnet56 | resnet18
/// lenet_width = 16        # channels of the first lenet convolution
/// dataset = synthetic     # synthetic | mnist | cifar10
/// data_dir = data/mnist   # mnist and cifar10 only
/// pretrained = out/fp.tern
/// synthetic_seed = 7      # synthetic only, likewise the keys below
/// synthetic_classes = 10
/// synthetic_channels = 1
/// synthetic_size = 12
/// synthetic_train = 8000
/// synthetic_test = 5000
/// synthetic_noise = 1.4
/// synthetic_shift = 1
/// ```
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub arch: Arch,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    pub pretrained: Option<PathBuf>,
    pub train: TrainConfig,
    seed_given: bool,
}

fn config_err(msg: impl Into<String>) -> TernError {
    TernError::Config(msg.into())
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| config_err(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    /// Builds the config from the file, then the flags, then `--set`
    /// overrides.
    pub fn resolve(common: &Common, purpose: Purpose) -> Result<Self> {
        let mut pairs = match &common.config {
            Some(path) => {
                parse_key_values(&fs::read_to_string(path).map_err(|source| TernError::Io {
                    path: path.display().to_string(),
                    source,
                })?)?
            }
            None => Vec::new(),
        };
        let mut flag = |k: &str, v: String| pairs.push((k.to_string(), v));
        if let Some(s) = common.seed {
            flag("seed", s.to_string());
        }
        if let Some(a) = &common.arch {
            flag("arch", a.clone());
        }
        if let Some(m) = &common.mode {
            flag("mode", m.clone());
        }
        if let Some(t) = common.tex {
            flag("tex", t.to_string());
        }
        if let Some(b) = &common.beta {
            let list: Vec<String> = b.iter().map(f64::to_string).collect();
            flag(if b.len() == 1 { "beta" } else { "betas" }, list.join(","));
        }
        if let Some(f) = &common.first_last {
            flag("first_last", f.clone());
        }
        for s in &common.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(format!("--set expects key=value, got {s:?}")))?;
            flag(k.trim(), v.trim().to_string());
        }
        Self::from_pairs(&pairs, purpose)
    }

    pub fn from_pairs(pairs: &[(String, String)], purpose: Purpose) -> Result<Self> {
        let last = |key: &str| {
            pairs
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
        };
        let mode: Mode = match last("mode") {
            Some(m) => m.parse()?,
            None if purpose == Purpose::Pretrain => Mode::Fp,
            None => Mode::TwIcsFt,
        };
        match (purpose, mode) {
            (Purpose::Pretrain, m) if m != Mode::Fp => {
                return Err(config_err(
                    "train runs in fp mode; use ternarize for ternary modes",
                ))
            }
            (Purpose::Ternarize, Mode::Fp) => {
                return Err(config_err("ternarize needs a ternary mode"))
            }
            _ => {}
        }
        let epochs = last("epochs")
            .map(|v| parse("epochs", v))
            .transpose()?
            .unwrap_or(DEFAULT_EPOCHS);
        let train = if mode == Mode::Fp {
            TrainConfig::fp(epochs, 0)
        } else {
            TrainConfig::ternary(mode, epochs, 0)
        };
        let mut cfg = RunConfig {
            arch: Arch::LeNet { width: 16 },
            dataset: "synthetic".into(),
            data_dir: None,
            synthetic: SyntheticSpec::default(),
            pretrained: None,
            train,
            seed_given: false,
        };
        let mut train_pairs = Vec::new();
        let mut lenet_width = None;
        for (k, v) in pairs {
            let s = &mut cfg.synthetic;
            match k.as_str() {
                "arch" => cfg.arch = v.parse()?,
                "lenet_width" => lenet_width = Some(parse::<usize>(k, v)?),
                "dataset" => match v.as_str() {
                    "synthetic" | "mnist" | "cifar10" => cfg.dataset = v.clone(),
                    _ => return Err(config_err(format!("dataset: unknown {v:?}"))),
                },
                "data_dir" => cfg.data_dir = Some(v.into()),
                "pretrained" => cfg.pretrained = Some(v.into()),
                "synthetic_seed" => s.seed = parse(k, v)?,
                "synthetic_classes" => s.classes = parse(k, v)?,
                "synthetic_channels" => s.channels = parse(k, v)?,
                "synthetic_size" => s.size = parse(k, v)?,
                "synthetic_train" => s.train = parse(k, v)?,
                "synthetic_test" => s.test = parse(k, v)?,
                "synthetic_noise" => s.noise = parse(k, v)?,
                "synthetic_shift" => s.shift = parse(k, v)?,
                _ => train_pairs.push((k, v)),
            }
        }
        match (&mut cfg.arch, lenet_width) {
            (Arch::LeNet { width }, Some(w)) if w > 0 => *width = w,
            (Arch::LeNet { .. }, Some(_)) => return Err(config_err("lenet_width must be ≥ 1")),
            (_, Some(_)) => return Err(config_err("lenet_width applies to arch = lenet only")),
            _ => {}
        }
        cfg.train.augment = cfg.source()?.default_augment();
        for (k, v) in train_pairs {
            if !cfg.train.set(k, v)? {
                return Err(config_err(format!("unknown key {k:?}")));
            }
            cfg.seed_given |= k == "seed";
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn source(&self) -> Result<DatasetSource> {
        let dir = || {
            self.data_dir
                .clone()
                .ok_or_else(|| config_err(format!("dataset {} needs data_dir", self.dataset)))
        };
        Ok(match self.dataset.as_str() {
            "mnist" => DatasetSource::Mnist(dir()?),
            "cifar10" => DatasetSource::Cifar10(dir()?),
            _ => DatasetSource::Synthetic(self.synthetic.clone()),
        })
    }

    fn require_seed(&self) -> Result<()> {
        if self.seed_given {
            Ok(())
        } else {
            Err(config_err("a seed is required (--seed or seed = ...)"))
        }
    }

    /// The resolved config in `key = value` form; reading it back
    /// reproduces the run.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("arch", self.arch.to_string());
        if let Arch::LeNet { width } = self.arch {
            kv("lenet_width", width.to_string());
        }
        kv("dataset", self.dataset.clone());
        if let Some(d) = &self.data_dir {
            kv("data_dir", d.display().to_string());
        }
        if self.dataset == "synthetic" {
            let y = &self.synthetic;
            kv("synthetic_seed", y.seed.to_string());
            kv("synthetic_classes", y.classes.to_string());
            kv("synthetic_channels", y.channels.to_string());
            kv("synthetic_size", y.size.to_string());
            kv("synthetic_train", y.train.to_string());
            kv("synthetic_test", y.test.to_string());
            kv("synthetic_noise", y.noise.to_string());
            kv("synthetic_shift", y.shift.to_string());
        }
        if let Some(p) = &self.pretrained {
            kv("pretrained", p.display().to_string());
        }
        kv("mode", t.mode.name().into());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("seed", t.seed.to_string());
        match t.optimizer {
            tern_core::optim::OptimizerKind::Sgd { momentum } => {
                kv("optimizer", "sgd".into());
                kv("momentum", momentum.to_string());
            }
            tern_core::optim::OptimizerKind::Adam { .. } => kv("optimizer", "adam".into()),
        }
        kv("lr", t.lr.to_string());
        kv(
            "milestones",
            t.milestones
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("factors", join(&t.factors));
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta", t.beta.to_string());
        kv("betas", join(&t.betas));
        kv(
            "first_last",
            if t.first_last_fp { "fp" } else { "tern" }.into(),
        );
        kv("bn_update", t.bn_update.to_string());
        kv("augment_pad", t.augment.pad.to_string());
        kv("augment_flip", t.augment.flip.to_string());
        s
    }
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|source| TernError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| TernError::Io {
        path: path.display().to_string(),
        source,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn build(cfg: &RunConfig, data: &Splits<f32>) -> Result<ModelGraph<f32>> {
    cfg.arch.build(
        data.train.sample_shape(),
        data.train.classes(),
        cfg.train.seed,
    )
}

fn report(acc: Accuracy) {
    println!("test top1 {:.6} top5 {:.6}", acc.top1, acc.top5);
}

/// Loads a model file into a freshly built graph; returns the views of its
/// packed layers, if any.
fn load_model(
    cfg: &RunConfig,
    data: &Splits<f32>,
    path: &Path,
) -> Result<(ModelGraph<f32>, Option<QuantViews<f32>>)> {
    let file = TernModelFile::read(path)?;
    let mut graph = build(cfg, data)?;
    if is_ternary_file(&file) {
        adopt_policies(&mut graph, &file)?;
        let views = load_ternary(&mut graph, &file)?;
        Ok((graph, Some(views)))
    } else {
        load_fp(&mut graph, &file)?;
        Ok((graph, None))
    }
}

fn train(common: &Common) -> Result<()> {
    let cfg = RunConfig::resolve(common, Purpose::Pretrain)?;
    cfg.require_seed()?;
    let out = out_dir(common)?;
    let data = load_dataset::<f32>(&cfg.source()?)?;
    let mut graph = build(&cfg, &data)?;
    info!("training {} for {} epochs", cfg.arch, cfg.train.epochs);
    let result = fit(&mut graph, &data.train, &data.test, &cfg.train)?;
    write(&out.join("run.cfg"), cfg.to_text())?;
    write(&out.join("history.csv"), result.history.to_csv())?;
    save_fp(&graph)?.write(out.join("fp.tern"))?;
    report(evaluate(&graph, &data.test, &Quantizer::Fp)?);
    Ok(())
}

fn ternarize(common: &Common, pretrained: Option<&PathBuf>) -> Result<()> {
    let mut cfg = RunConfig::resolve(common, Purpose::Ternarize)?;
    cfg.require_seed()?;
    if let Some(p) = pretrained {
        cfg.pretrained = Some(p.clone());
    }
    let mode = cfg.train.mode;
    match (&cfg.pretrained, mode.fine_tunes()) {
        (None, true) => {
            return Err(config_err(format!(
                "mode {mode} fine-tunes; give --pretrained"
            )))
        }
        (Some(_), false) => {
            return Err(config_err(format!(
                "mode {mode} trains from scratch; drop --pretrained"
            )))
        }
        _ => {}
    }
    let out = out_dir(common)?;
    let data = load_dataset::<f32>(&cfg.source()?)?;
    let mut graph = build(&cfg, &data)?;
    if let Some(p) = &cfg.pretrained {
        load_fp(&mut graph, &TernModelFile::read(p)?)?;
    }
    graph.set_policy(&cfg.train.policy()?, cfg.train.first_last_fp);
    info!(
        "training {} in mode {mode} for {} epochs",
        cfg.arch, cfg.train.epochs
    );
    let result = fit(&mut graph, &data.train, &data.test, &cfg.train)?;
    let views = result
        .quantizer
        .views(&graph)?
        .ok_or_else(|| config_err("ternary mode produced no quantized layers"))?;
    write(&out.join("run.cfg"), cfg.to_text())?;
    write(&out.join("history.csv"), result.history.to_csv())?;
    save_fp(&graph)?.write(out.join("latent.tern"))?;
    save_ternary(&graph, &views)?.write(out.join("ternary.tern"))?;
    report(evaluate_net(
        &InferenceNet::from_graph(&graph, Some(&views))?,
        &data.test,
    )?);
    Ok(())
}

fn eval(common: &Common, model: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(common, Purpose::Inspect)?;
    let data = load_dataset::<f32>(&cfg.source()?)?;
    let (graph, views) = load_model(&cfg, &data, model)?;
    report(evaluate_net(
        &InferenceNet::from_graph(&graph, views.as_ref())?,
        &data.test,
    )?);
    Ok(())
}

fn fpga(common: &Common, args: &[String]) -> Result<()> {
    let mut unit = FpgaModel::default();
    let (mut fp, mut tern) = (0u64, 0u64);
    for a in args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| config_err(format!("--fpga expects key=value, got {a:?}")))?;
        let n: u64 = parse(k, v)?;
        match k {
            "fp_macs" => fp = n,
            "tern_macs" => tern = n,
            "add_lut" => unit.add_lut = n,
            "mul_lut" => unit.mul_lut = n,
            "mul_dsp" => unit.mul_dsp = n,
            _ => return Err(config_err(format!("--fpga: unknown key {k:?}"))),
        }
    }
    let c = fpga_cost(&unit, fp, tern);
    println!("{c}");
    if common.out.is_some() {
        let csv = format!(
            "path,macs,lut,dsp\nfp,{fp},{},{}\nternary,{tern},{},{}\n",
            c.fp_lut, c.fp_dsp, c.tern_lut, c.tern_dsp
        );
        write(&out_dir(common)?.join("fpga.csv"), csv)?;
    }
    Ok(())
}

fn analyze(common: &Common, model: Option<&Path>, fpga_args: Option<&[String]>) -> Result<()> {
    if model.is_none() && fpga_args.is_none() {
        return Err(config_err("analyze needs --model, --fpga or both"));
    }
    if let Some(args) = fpga_args {
        fpga(common, args)?;
    }
    let Some(model) = model else { return Ok(()) };
    let cfg = RunConfig::resolve(common, Purpose::Inspect)?;
    let data = load_dataset::<f32>(&cfg.source()?)?;
    let (graph, views) = load_model(&cfg, &data, model)?;
    let views = views.unwrap_or_default();
    let dens = density(&graph, &views);
    let comp = compression_report(&graph, &views)?;
    let cost = op_counts(&graph, Some(&views))?;
    println!("{dens}\n\n{comp}\n\n{cost}");
    if common.out.is_some() {
        let out = out_dir(common)?;
        write(&out.join("density.csv"), dens.to_csv())?;
        write(&out.join("cost.csv"), cost.to_csv())?;
        write(
            &out.join("compression.csv"),
            format!(
                "fp_bytes,ternary_bytes,rate,theory\n{},{},{:.6},{:.6}\n",
                comp.fp_bytes, comp.ternary_bytes, comp.rate, comp.theory
            ),
        )?;
    }
    Ok(())
}

/// Packed model from either an exported model (re-encoded after
/// validation) or an FP checkpoint (ternarized under the configured policy).
fn export(common: &Common, model: &Path) -> Result<()> {
    let cfg = RunConfig::resolve(common, Purpose::Inspect)?;
    let data = load_dataset::<f32>(&cfg.source()?)?;
    let (mut graph, views) = load_model(&cfg, &data, model)?;
    let views = match views {
        Some(v) => v,
        None => {
            if cfg.train.mode == Mode::Fp {
                return Err(config_err(
                    "exporting an FP checkpoint needs a ternary mode",
                ));
            }
            graph.set_policy(&cfg.train.policy()?, cfg.train.first_last_fp);
            graph.quantize()?
        }
    };
    let path = out_dir(common)?.join("model.tern");
    save_ternary(&graph, &views)?.write(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train => train(c),
        Command::Ternarize { pretrained } => ternarize(c, pretrained.as_ref()),
        Command::Eval { model } => eval(c, model),
        Command::Analyze { model, fpga } => analyze(c, model.as_deref(), fpga.as_deref()),
        Command::Export { model } => export(c, model),
    }
}
