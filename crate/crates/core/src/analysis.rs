//! Density, compression and operation-count reports, and an FPGA resource
//! model for the multiply/add units a layer needs.

use std::fmt;

use crate::error::{Result, TernError};
use crate::io::format::Entry;
use crate::io::weight_entries;
use crate::model::{Layer, ModelGraph, Policy, QuantViews, Shortcut};
use crate::ops::{conv2d_macs, dense_macs};
use crate::rel::{default_betas, LayerKind};
use crate::scalar::Scalar;
use crate::ternarize::TernaryTensor;

/// Fraction of nonzero codes.
pub fn density_of<T: Scalar>(t: &TernaryTensor<T>) -> f64 {
    t.density()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDensity {
    pub name: String,
    pub params: usize,
    /// One value per ternary branch.
    pub densities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityReport {
    pub layers: Vec<LayerDensity>,
    /// Mean over all codes of all quantized layers and branches.
    pub average: f64,
}

/// Density of every quantized layer.
pub fn density<T: Scalar>(graph: &ModelGraph<T>, views: &QuantViews<T>) -> DensityReport {
    let mut layers = Vec::new();
    let (mut nz, mut total) = (0usize, 0usize);
    for wl in graph.weight_layers() {
        let Some(branches) = views.get(&wl.weight) else {
            continue;
        };
        for b in branches {
            nz += b.nonzeros();
            total += b.len();
        }
        layers.push(LayerDensity {
            name: wl.name.clone(),
            params: branches[0].len(),
            densities: branches.iter().map(|b| b.density()).collect(),
        });
    }
    DensityReport {
        layers,
        average: if total == 0 {
            0.0
        } else {
            nz as f64 / total as f64
        },
    }
}

impl DensityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,branch,density\n");
        for l in &self.layers {
            for (k, d) in l.densities.iter().enumerate() {
                s.push_str(&format!("{},{},{},{:.6}\n", l.name, l.params, k, d));
            }
        }
        s
    }
}

impl fmt::Display for DensityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>10}  density", "layer", "params")?;
        for l in &self.layers {
            let d: Vec<String> = l.densities.iter().map(|d| format!("{:.4}", d)).collect();
            writeln!(f, "{:<28} {:>10}  {}", l.name, l.params, d.join(" "))?;
        }
        write!(
            f,
            "average density {:.4} (sparsity {:.4})",
            self.average,
            1.0 - self.average
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompressionReport {
    /// Serialized bytes of the weight layers stored in full precision.
    pub fp_bytes: usize,
    /// Serialized bytes of the same layers stored per their policy.
    pub ternary_bytes: usize,
    pub rate: f64,
    /// `32 / (2·T_ex)` for the largest expansion factor in the model.
    pub theory: f64,
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "weight bytes fp {} ternary {}: rate {:.3}x (theory {:.1}x)",
            self.fp_bytes, self.ternary_bytes, self.rate, self.theory
        )
    }
}

fn bytes(entries: &[Entry]) -> usize {
    entries.iter().map(Entry::encoded_len).sum()
}

/// Compression of the weight layers as serialized, FP versus per-policy.
/// FP-policy layers count at full size on both sides.
pub fn compression_report<T: Scalar>(
    graph: &ModelGraph<T>,
    views: &QuantViews<T>,
) -> Result<CompressionReport> {
    let fp_bytes = bytes(&weight_entries(graph, None)?);
    let ternary_bytes = bytes(&weight_entries(graph, Some(views))?);
    let t_ex = views.values().map(Vec::len).max().unwrap_or(0);
    Ok(CompressionReport {
        fp_bytes,
        ternary_bytes,
        rate: fp_bytes as f64 / ternary_bytes as f64,
        theory: if t_ex == 0 {
            1.0
        } else {
            32.0 / (2 * t_ex) as f64
        },
    })
}

/// Compression with every weight layer ternarized at expansion `t_ex`,
/// using the default threshold factors.
pub fn compression_rate<T: Scalar>(
    graph: &ModelGraph<T>,
    t_ex: usize,
) -> Result<CompressionReport> {
    let betas = default_betas(t_ex).ok_or_else(|| {
        TernError::Config(format!("no default threshold factors for T_ex = {t_ex}"))
    })?;
    let policy = if t_ex == 1 {
        Policy::Tern(betas[0])
    } else {
        Policy::Rel(betas)
    };
    let mut g = graph.clone();
    g.set_policy(&policy, false);
    compression_report(&g, &g.quantize()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub quantized: bool,
    pub macs: u64,
    pub outputs: u64,
    /// Mean density over branches; 1 for FP layers.
    pub density: f64,
    pub fp_mul: u64,
    pub fp_add: u64,
    pub tern_add_sub: u64,
    pub tern_mul: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    pub fn fp_mul(&self) -> u64 {
        self.layers.iter().map(|l| l.fp_mul).sum()
    }

    pub fn fp_add(&self) -> u64 {
        self.layers.iter().map(|l| l.fp_add).sum()
    }

    /// Add/sub of the deployed model; FP layers contribute their MACs.
    pub fn tern_add_sub(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| {
                if l.quantized {
                    l.tern_add_sub
                } else {
                    l.fp_add
                }
            })
            .sum()
    }

    /// Multiplies of the deployed model; FP layers contribute their MACs.
    pub fn tern_mul(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| if l.quantized { l.tern_mul } else { l.fp_mul })
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,quantized,macs,outputs,density,fp_mul,fp_add,tern_add_sub,tern_mul\n",
        );
        for l in &self.layers {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{},{},{},{}\n",
                l.name,
                l.quantized,
                l.macs,
                l.outputs,
                l.density,
                l.fp_mul,
                l.fp_add,
                l.tern_add_sub,
                l.tern_mul
            ));
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<28} {:>12} {:>8} {:>12} {:>10}",
            "layer", "macs", "density", "tern add/sub", "tern mul"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:>12} {:>8.4} {:>12} {:>10}",
                l.name, l.macs, l.density, l.tern_add_sub, l.tern_mul
            )?;
        }
        write!(
            f,
            "fp: {} mul + {} add; deployed: {} add/sub + {} mul",
            self.fp_mul(),
            self.fp_add(),
            self.tern_add_sub(),
            self.tern_mul()
        )
    }
}

/// Per weight layer: name, weight-parameter id, input shape, output shape.
type Shapes = Vec<(String, usize, LayerKind, Vec<usize>, Vec<usize>)>;

fn propagate<T: Scalar>(
    layers: &[Layer<T>],
    g: &ModelGraph<T>,
    mut s: Vec<usize>,
    out: &mut Shapes,
) -> Result<Vec<usize>> {
    let bad = |what: &str, s: &[usize]| TernError::Shape {
        shape: s.to_vec(),
        reason: format!("{what} does not apply"),
    };
    for l in layers {
        s = match l {
            Layer::Weight(wl) => {
                let w = g.params()[wl.weight].value.shape();
                let next = match wl.kind {
                    LayerKind::Conv(geom) => {
                        let (&[n, _, h, wd], &[o, _, kh, kw]) = (s.as_slice(), w) else {
                            return Err(bad("conv", &s));
                        };
                        let oh = geom.out_dim(h, kh).ok_or_else(|| bad("conv", &s))?;
                        let ow = geom.out_dim(wd, kw).ok_or_else(|| bad("conv", &s))?;
                        vec![n, o, oh, ow]
                    }
                    LayerKind::Dense => vec![s[0], w[1]],
                };
                out.push((wl.name.clone(), wl.weight, wl.kind, s.clone(), next.clone()));
                next
            }
            Layer::BatchNorm(_) | Layer::Relu => s,
            Layer::MaxPool(p) => {
                let (oh, ow) = p.out_dims(s[2], s[3]).ok_or_else(|| bad("pool", &s))?;
                vec![s[0], s[1], oh, ow]
            }
            Layer::GlobalAvgPool => vec![s[0], s[1]],
            Layer::Flatten => vec![s[0], s[1..].iter().product()],
            Layer::Residual(r) => {
                let body = propagate(&r.body, g, s.clone(), out)?;
                if let Shortcut::Projection(p) = &r.shortcut {
                    propagate(p, g, s, out)?;
                }
                body
            }
        };
    }
    Ok(s)
}

/// Operation counts for one input sample. Quantized layers perform
/// `density × MACs` additions/subtractions per branch and one scaling
/// multiply per output element per branch.
pub fn op_counts<T: Scalar>(
    graph: &ModelGraph<T>,
    views: Option<&QuantViews<T>>,
) -> Result<CostReport> {
    let [c, h, w] = graph.input_shape();
    let mut shapes = Shapes::new();
    propagate(graph.layers(), graph, vec![1, c, h, w], &mut shapes)?;
    let mut layers = Vec::new();
    for (name, id, kind, input, output) in shapes {
        let wshape = graph.params()[id].value.shape();
        let macs = match kind {
            LayerKind::Conv(geom) => conv2d_macs(&input, wshape, geom)?,
            LayerKind::Dense => dense_macs(&input, wshape)?,
        };
        let outputs = output.iter().product::<usize>() as u64;
        let branches = views.and_then(|v| v.get(&id));
        let (quantized, density, add_sub, mul) = match branches {
            Some(bs) => {
                let add_sub: u64 = bs
                    .iter()
                    .map(|b| (b.density() * macs as f64).round() as u64)
                    .sum();
                let d = bs.iter().map(|b| b.density()).sum::<f64>() / bs.len() as f64;
                (true, d, add_sub, outputs * bs.len() as u64)
            }
            None => (false, 1.0, macs, macs),
        };
        layers.push(LayerCost {
            name,
            quantized,
            macs,
            outputs,
            density,
            fp_mul: macs,
            fp_add: macs,
            tern_add_sub: add_sub,
            tern_mul: mul,
        });
    }
    Ok(CostReport { layers })
}

/// LUT and DSP cost of floating-point arithmetic units.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FpgaModel {
    pub add_lut: u64,
    pub mul_lut: u64,
    pub mul_dsp: u64,
}

impl Default for FpgaModel {
    /// Kintex-7 single-precision adder and multiplier.
    fn default() -> Self {
        FpgaModel {
            add_lut: 261,
            mul_lut: 235,
            mul_dsp: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FpgaCost {
    pub fp_lut: u64,
    pub fp_dsp: u64,
    pub tern_lut: u64,
    pub tern_dsp: u64,
}

impl fmt::Display for FpgaCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fp:      LUT {} DSP {}", self.fp_lut, self.fp_dsp)?;
        write!(f, "ternary: LUT {} DSP {}", self.tern_lut, self.tern_dsp)
    }
}

/// A full-precision MAC needs an adder and a multiplier; a ternary MAC
/// needs only the adder.
pub fn fpga_cost(model: &FpgaModel, fp_macs: u64, tern_macs: u64) -> FpgaCost {
    FpgaCost {
        fp_lut: fp_macs * (model.add_lut + model.mul_lut),
        fp_dsp: fp_macs * model.mul_dsp,
        tern_lut: tern_macs * model.add_lut,
        tern_dsp: 0,
    }
}
