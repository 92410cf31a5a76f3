//! Training configuration and its `key = value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! mode = tw-ics-ft        # fp | tw | tw-ics | tw-ft | tw-ics-ft | tw-ics-ft-rel
//! epochs = 20
//! batch_size = 64
//! seed = 1
//! optimizer = adam        # sgd | adam
//! lr = 0.001
//! momentum = 0.9          # sgd only
//! milestones = 10,15
//! factors = 0.1,0.1
//! weight_decay = 5e-6
//! beta = 0.05             # threshold factor of plain ternary layers
//! betas = 0.05,0.1        # REL threshold factors, strictly increasing
//! tex = 2                 # REL expansion factor; selects the default betas
//! first_last = tern       # fp keeps the first and last layers full precision
//! bn_update = true        # keep updating batch-norm statistics
//! augment_pad = 0
//! augment_flip = false
//! ```

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, TernError};
use crate::io::Augment;
use crate::model::Policy;
use crate::optim::{MilestoneSchedule, OptimizerKind};
use crate::rel::{check_betas, default_betas, BETAS_TEX2};
use crate::ternarize::check_beta;

/// Training mode. `Fp` pretrains the full-precision baseline; the others
/// are the ternary ablation modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Fp,
    /// Ternary from scratch, threshold and scaling factor frozen at init.
    Tw,
    /// Ternary from scratch, recomputed every step.
    TwIcs,
    /// Ternary from a pretrained model, frozen at init.
    TwFt,
    TwIcsFt,
    TwIcsFtRel,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Fp,
        Mode::Tw,
        Mode::TwIcs,
        Mode::TwFt,
        Mode::TwIcsFt,
        Mode::TwIcsFtRel,
    ];

    pub fn is_ternary(self) -> bool {
        self != Mode::Fp
    }

    /// Threshold and scaling factor recomputed at every step.
    pub fn ics(self) -> bool {
        matches!(self, Mode::TwIcs | Mode::TwIcsFt | Mode::TwIcsFtRel)
    }

    /// Starts from a pretrained FP model.
    pub fn fine_tunes(self) -> bool {
        matches!(self, Mode::TwFt | Mode::TwIcsFt | Mode::TwIcsFtRel)
    }

    pub fn rel(self) -> bool {
        self == Mode::TwIcsFtRel
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Fp => "fp",
            Mode::Tw => "tw",
            Mode::TwIcs => "tw-ics",
            Mode::TwFt => "tw-ft",
            Mode::TwIcsFt => "tw-ics-ft",
            Mode::TwIcsFtRel => "tw-ics-ft-rel",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = TernError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TernError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub factors: Vec<f64>,
    pub weight_decay: f64,
    pub beta: f64,
    pub betas: Vec<f64>,
    /// Keep the first and last weight layers full precision.
    pub first_last_fp: bool,
    pub bn_update: bool,
    pub augment: Augment,
}

impl TrainConfig {
    /// Full-precision pretraining: SGD with momentum 0.9, weight decay 1e-4.
    pub fn fp(epochs: usize, seed: u64) -> Self {
        let (milestones, factors) = scaled_schedule(epochs, &[(0.5, 0.1), (0.75, 0.1)]);
        TrainConfig {
            mode: Mode::Fp,
            epochs,
            batch_size: 64,
            seed,
            optimizer: OptimizerKind::sgd(),
            lr: 0.1,
            milestones,
            factors,
            weight_decay: 1e-4,
            beta: 0.05,
            betas: BETAS_TEX2.to_vec(),
            first_last_fp: false,
            bn_update: true,
            augment: Augment::default(),
        }
    }

    /// Defaults for a ternary mode. Fine-tuning keeps SGD at lr 0.1 but
    /// lowers weight decay to 5e-6 and steps by 0.1 at 40%, 60% and 80% of
    /// the run; training from scratch uses the FP recipe.
    pub fn ternary(mode: Mode, epochs: usize, seed: u64) -> Self {
        let base = TrainConfig::fp(epochs, seed);
        if mode.fine_tunes() {
            let (milestones, factors) =
                scaled_schedule(epochs, &[(0.4, 0.1), (0.6, 0.1), (0.8, 0.1)]);
            TrainConfig {
                mode,
                milestones,
                factors,
                weight_decay: 5e-6,
                ..base
            }
        } else {
            TrainConfig { mode, ..base }
        }
    }

    /// Adam fine-tuning: lr 1e-4 scaled by 0.2, 0.2 and 0.5 at 60%, 80% and
    /// 90% of the run, weight decay 5e-6.
    pub fn adam_fine_tune(mut self) -> Self {
        let (milestones, factors) =
            scaled_schedule(self.epochs, &[(0.6, 0.2), (0.8, 0.2), (0.9, 0.5)]);
        self.optimizer = OptimizerKind::adam();
        self.lr = 1e-4;
        self.milestones = milestones;
        self.factors = factors;
        self.weight_decay = 5e-6;
        self
    }

    pub fn schedule(&self) -> Result<MilestoneSchedule> {
        MilestoneSchedule::new(self.lr, self.milestones.clone(), self.factors.clone())
    }

    /// Policy given to the quantized layers under this configuration.
    pub fn policy(&self) -> Result<Policy> {
        Ok(match self.mode {
            Mode::Fp => Policy::Fp,
            Mode::TwIcsFtRel => Policy::rel(self.betas.clone())?,
            _ => Policy::tern(self.beta)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TernError::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TernError::Config(
                "batch_size must be ≥ 2 for batch norm".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(TernError::Config(
                "lr and weight_decay must be finite and ≥ 0".into(),
            ));
        }
        check_beta(self.beta)?;
        check_betas(&self.betas)?;
        self.schedule()?;
        Ok(())
    }

    /// Applies one `key = value` setting. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |what: &str| TernError::Config(format!("{key}: expected {what}, got {value:?}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad("a number"));
        let int = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| bad("a non-negative integer"))
        };
        let boolean = |v: &str| match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let list = |v: &str| -> Result<Vec<f64>> {
            v.split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(s.trim()))
                .collect()
        };
        match key {
            "mode" => self.mode = value.parse()?,
            "epochs" => self.epochs = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned integer"))?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::sgd(),
                    "adam" => OptimizerKind::adam(),
                    _ => return Err(bad("sgd or adam")),
                }
            }
            "momentum" => match &mut self.optimizer {
                OptimizerKind::Sgd { momentum } => *momentum = num(value)?,
                OptimizerKind::Adam { .. } => {
                    return Err(TernError::Config("momentum applies to sgd only".into()))
                }
            },
            "lr" => self.lr = num(value)?,
            "milestones" => {
                self.milestones = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| int(s.trim()))
                    .collect::<Result<_>>()?
            }
            "factors" => self.factors = list(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "beta" => self.beta = num(value)?,
            "betas" => self.betas = list(value)?,
            "tex" => {
                let t = int(value)?;
                self.betas = default_betas(t).ok_or_else(|| {
                    TernError::Config(format!(
                        "no default threshold factors for tex = {t}; set betas"
                    ))
                })?;
            }
            "first_last" => {
                self.first_last_fp = match value {
                    "fp" => true,
                    "tern" => false,
                    _ => return Err(bad("fp or tern")),
                }
            }
            "bn_update" => self.bn_update = boolean(value)?,
            "augment_pad" => self.augment.pad = int(value)?,
            "augment_flip" => self.augment.flip = boolean(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Milestones at fractions of the run, dropping those that fall on epoch 0
/// or coincide with an earlier one.
fn scaled_schedule(epochs: usize, points: &[(f64, f64)]) -> (Vec<usize>, Vec<f64>) {
    let mut milestones: Vec<usize> = Vec::new();
    let mut factors = Vec::new();
    for &(at, factor) in points {
        let m = (at * epochs as f64).round() as usize;
        if m > 0 && m < epochs && milestones.last().is_none_or(|&last| m > last) {
            milestones.push(m);
            factors.push(factor);
        }
    }
    (milestones, factors)
}

/// Splits `key = value` lines, dropping comments and blank lines.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TernError::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
