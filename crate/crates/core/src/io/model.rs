//! Mapping between [`ModelGraph`] state and [`TernModelFile`] entries.
//!
//! Entry names are parameter names (`conv1.weight`, `fc.bias`, `bn1.gamma`,
//! `bn1.beta`) plus `<bn>.running_mean` and `<bn>.running_var`, in forward
//! order. An FP checkpoint stores every weight as FP; an exported ternary
//! model stores quantized weights as packed blocks and everything else as FP.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, TernError};
use crate::exec::packed::{pack_codes, unpack_codes};
use crate::io::format::{Block, Entry, EntryData, TernModelFile};
use crate::model::{ModelGraph, Policy, PolicyTag, QuantViews};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::ternarize::TernaryTensor;

fn fp_entry<T: Scalar>(name: &str, t: &Tensor<T>) -> Entry {
    Entry {
        name: name.into(),
        shape: t.shape().to_vec(),
        data: EntryData::Fp(t.data().iter().map(|v| v.as_f32()).collect()),
    }
}

fn vec_entry<T: Scalar>(name: String, v: &[T]) -> Entry {
    Entry {
        name,
        shape: vec![v.len()],
        data: EntryData::Fp(v.iter().map(|x| x.as_f32()).collect()),
    }
}

fn ternary_entry<T: Scalar>(name: &str, tag: PolicyTag, branches: &[TernaryTensor<T>]) -> Entry {
    Entry {
        name: name.into(),
        shape: branches[0].shape().to_vec(),
        data: EntryData::Ternary {
            tag,
            blocks: branches
                .iter()
                .map(|b| Block {
                    beta: b.beta().as_f32(),
                    alpha: b.alpha().as_f32(),
                    words: pack_codes(b.codes()),
                })
                .collect(),
        },
    }
}

/// Entries of the weight layers alone (weights and biases), with quantized
/// layers packed when `views` is given.
pub fn weight_entries<T: Scalar>(
    graph: &ModelGraph<T>,
    views: Option<&QuantViews<T>>,
) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for wl in graph.weight_layers() {
        let p = &graph.params()[wl.weight];
        match views {
            Some(v) if wl.policy.is_quantized() => {
                let branches = v.get(&wl.weight).ok_or_else(|| TernError::Layer {
                    layer: wl.name.clone(),
                    reason: "quantized layer has no ternary view".into(),
                })?;
                out.push(ternary_entry(&p.name, wl.policy.tag(), branches));
            }
            _ => out.push(fp_entry(&p.name, &p.value)),
        }
        if let Some(b) = wl.bias {
            let b = &graph.params()[b];
            out.push(fp_entry(&b.name, &b.value));
        }
    }
    Ok(out)
}

fn graph_entries<T: Scalar>(
    graph: &ModelGraph<T>,
    views: Option<&QuantViews<T>>,
) -> Result<TernModelFile> {
    let mut entries = weight_entries(graph, views)?;
    for bn in graph.batchnorm_layers() {
        let (g, b) = (&graph.params()[bn.gamma], &graph.params()[bn.beta]);
        entries.push(fp_entry(&g.name, &g.value));
        entries.push(fp_entry(&b.name, &b.value));
        entries.push(vec_entry(
            format!("{}.running_mean", bn.name),
            &bn.stats.mean,
        ));
        entries.push(vec_entry(format!("{}.running_var", bn.name), &bn.stats.var));
    }
    Ok(TernModelFile { entries })
}

/// Full-precision checkpoint.
pub fn save_fp<T: Scalar>(graph: &ModelGraph<T>) -> Result<TernModelFile> {
    graph_entries(graph, None)
}

/// Deployable model: quantized layers packed per their policy.
pub fn save_ternary<T: Scalar>(
    graph: &ModelGraph<T>,
    views: &QuantViews<T>,
) -> Result<TernModelFile> {
    graph_entries(graph, Some(views))
}

fn entries_by_name(file: &TernModelFile) -> Result<BTreeMap<&str, &Entry>> {
    let mut map = BTreeMap::new();
    for e in &file.entries {
        if map.insert(e.name.as_str(), e).is_some() {
            return Err(TernError::Layer {
                layer: e.name.clone(),
                reason: "duplicate entry".into(),
            });
        }
    }
    Ok(map)
}

fn take<'a>(map: &mut BTreeMap<&str, &'a Entry>, name: &str, shape: &[usize]) -> Result<&'a Entry> {
    let e = map.remove(name).ok_or_else(|| TernError::Layer {
        layer: name.into(),
        reason: "missing from model file".into(),
    })?;
    if e.shape != shape {
        return Err(TernError::Layer {
            layer: name.into(),
            reason: format!("shape {:?} in file, {:?} in model", e.shape, shape),
        });
    }
    Ok(e)
}

fn fp_values<T: Scalar>(e: &Entry) -> Result<Vec<T>> {
    match &e.data {
        EntryData::Fp(v) => {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(TernError::NonFinite {
                    context: format!("entry `{}` element {i}", e.name),
                });
            }
            Ok(v.iter().map(|&x| T::of(x as f64)).collect())
        }
        EntryData::Ternary { .. } => Err(TernError::Layer {
            layer: e.name.clone(),
            reason: "expected full-precision data".into(),
        }),
    }
}

/// Loads every non-weight entry plus, for FP-tagged weights, the weight
/// itself. Returns the ternary views of packed weights.
fn load_into<T: Scalar>(
    graph: &mut ModelGraph<T>,
    file: &TernModelFile,
    ternary: bool,
) -> Result<QuantViews<T>> {
    let mut map = entries_by_name(file)?;
    let mut views = QuantViews::new();
    let layers: Vec<_> = graph.weight_layers().into_iter().cloned().collect();
    for wl in &layers {
        let (name, shape) = {
            let p = &graph.params()[wl.weight];
            (p.name.clone(), p.value.shape().to_vec())
        };
        let e = take(&mut map, &name, &shape).map_err(|err| relabel(err, &wl.name))?;
        let expected = if ternary {
            wl.policy.tag()
        } else {
            PolicyTag::Fp
        };
        if e.tag() != expected {
            return Err(TernError::Layer {
                layer: wl.name.clone(),
                reason: format!("policy {:?} in file, {:?} expected", e.tag(), expected),
            });
        }
        match &e.data {
            EntryData::Fp(_) => {
                let v = fp_values(e)?;
                graph.params_mut()[wl.weight].value = Tensor::new(shape.clone(), v)?;
            }
            EntryData::Ternary { blocks, .. } => {
                if blocks.len() != wl.policy.betas().len() {
                    return Err(TernError::Layer {
                        layer: wl.name.clone(),
                        reason: format!(
                            "{} branches in file, {} expected",
                            blocks.len(),
                            wl.policy.betas().len()
                        ),
                    });
                }
                let branches = blocks
                    .iter()
                    .map(|b| {
                        let codes = unpack_codes(&b.words, e.len())?;
                        TernaryTensor::from_parts(
                            codes,
                            T::of(b.alpha as f64),
                            T::of(b.beta as f64),
                            shape.clone(),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                views.insert(wl.weight, branches);
            }
        }
        if let Some(b) = wl.bias {
            let (bname, bshape) = {
                let p = &graph.params()[b];
                (p.name.clone(), p.value.shape().to_vec())
            };
            let v = fp_values(take(&mut map, &bname, &bshape)?)?;
            graph.params_mut()[b].value = Tensor::new(bshape, v)?;
        }
    }
    let bns: Vec<_> = graph
        .batchnorm_layers()
        .into_iter()
        .map(|b| (b.name.clone(), b.gamma, b.beta))
        .collect();
    let mut stats = Vec::new();
    for (name, gamma, beta) in bns {
        for id in [gamma, beta] {
            let (pname, shape) = {
                let p = &graph.params()[id];
                (p.name.clone(), p.value.shape().to_vec())
            };
            let v = fp_values(take(&mut map, &pname, &shape)?)?;
            graph.params_mut()[id].value = Tensor::new(shape, v)?;
        }
        let c = graph.params()[gamma].value.len();
        let mean = fp_values(take(&mut map, &format!("{name}.running_mean"), &[c])?)?;
        let var = fp_values(take(&mut map, &format!("{name}.running_var"), &[c])?)?;
        stats.push((mean, var));
    }
    let mut it = stats.into_iter();
    graph.for_each_batchnorm_mut(|bn| {
        let (m, v) = it.next().expect("one entry per batch norm");
        bn.stats.mean = m;
        bn.stats.var = v;
    });
    if let Some(name) = map.keys().next() {
        return Err(TernError::Layer {
            layer: (*name).into(),
            reason: "entry has no counterpart in the model".into(),
        });
    }
    Ok(views)
}

fn relabel(err: TernError, layer: &str) -> TernError {
    match err {
        TernError::Layer { reason, .. } => TernError::Layer {
            layer: layer.into(),
            reason,
        },
        other => other,
    }
}

/// Restores an FP checkpoint into a graph of the same architecture. The
/// graph is left untouched on error.
pub fn load_fp<T: Scalar>(graph: &mut ModelGraph<T>, file: &TernModelFile) -> Result<()> {
    let mut staged = graph.clone();
    load_into(&mut staged, file, false)?;
    *graph = staged;
    Ok(())
}

/// Restores an exported model; policy tags must match the graph. Returns
/// the ternary views of the packed layers.
pub fn load_ternary<T: Scalar>(
    graph: &mut ModelGraph<T>,
    file: &TernModelFile,
) -> Result<QuantViews<T>> {
    let mut staged = graph.clone();
    let views = load_into(&mut staged, file, true)?;
    *graph = staged;
    Ok(views)
}

/// Sets each weight layer's policy to the one recorded in `file`, so an
/// exported model can be loaded without knowing how it was produced.
pub fn adopt_policies<T: Scalar>(graph: &mut ModelGraph<T>, file: &TernModelFile) -> Result<()> {
    let map = entries_by_name(file)?;
    let mut staged = graph.clone();
    let layers: Vec<(String, String)> = graph
        .weight_layers()
        .into_iter()
        .map(|wl| (wl.name.clone(), graph.params()[wl.weight].name.clone()))
        .collect();
    for (layer, param) in layers {
        let e = map.get(param.as_str()).ok_or_else(|| TernError::Layer {
            layer: layer.clone(),
            reason: "missing from model file".into(),
        })?;
        let policy = match &e.data {
            EntryData::Fp(_) => Policy::Fp,
            EntryData::Ternary { tag, blocks } => {
                let betas: Vec<f64> = blocks.iter().map(|b| b.beta as f64).collect();
                match tag {
                    PolicyTag::Rel => Policy::rel(betas),
                    _ => Policy::tern(betas.first().copied().unwrap_or(0.0)),
                }
                .map_err(|err| TernError::Layer {
                    layer: layer.clone(),
                    reason: err.to_string(),
                })?
            }
        };
        staged.set_layer_policy(&layer, policy)?;
    }
    *graph = staged;
    Ok(())
}

/// True when any weight in the file is stored as packed ternary blocks.
pub fn is_ternary_file(file: &TernModelFile) -> bool {
    file.entries
        .iter()
        .any(|e| matches!(e.data, EntryData::Ternary { .. }))
}

/// Loads pretrained full-precision weights from a checkpoint file.
pub fn init_from_pretrained<T: Scalar>(
    graph: &mut ModelGraph<T>,
    path: impl AsRef<Path>,
) -> Result<()> {
    load_fp(graph, &TernModelFile::read(path)?)
}
