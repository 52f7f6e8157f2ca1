//! Mapping between in-memory weights and [`WeightContainer`] entries.
//!
//! Float containers hold `<layer>.weight` (`in×out`), `<layer>.bias` and
//! optionally `<layer>.bn.{gamma,beta,mean,var,eps}`. Quantized containers hold
//! integer `<layer>.weight` codes, float `<layer>.bias`, and one empty integer
//! `<layer>.act` entry per layer (plus `input.act`) carrying that node's format.

use std::collections::BTreeMap;

use pnacc_core::fixq::{BnParams, FixedFormat, QTensor};
use pnacc_core::matrix::RealMatrix;
use pnacc_core::pointnet::{
    build_network, LayerParams, NetworkGraph, NetworkKind, QuantLayer, QuantizedNetwork, WeightSet,
    DEFAULT_NUM_CLASSES, DEFAULT_NUM_SEG_CLASSES,
};

use crate::container::{Entry, TensorData, WeightContainer};
use crate::error::{CliError, Result};

const BN_FIELDS: [&str; 5] = ["gamma", "beta", "mean", "var", "eps"];

fn mismatch(msg: impl Into<String>) -> CliError {
    CliError::Mismatch(msg.into())
}

/// What a container's weight entries hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Float,
    Quantized { bits: u8 },
}

pub fn container_kind(c: &WeightContainer) -> Result<ContainerKind> {
    let mut kinds = c.entries.iter().filter(|e| e.name.ends_with(".weight")).map(|e| match e.data {
        TensorData::Float32(_) => ContainerKind::Float,
        TensorData::Int8(_) => ContainerKind::Quantized { bits: 8 },
        TensorData::Int16(_) => ContainerKind::Quantized { bits: 16 },
    });
    let first = kinds.next().ok_or_else(|| CliError::Format("container has no weight entries".into()))?;
    if kinds.any(|k| k != first) {
        return Err(CliError::Format("container mixes weight types".into()));
    }
    Ok(first)
}

/// Graph of `kind` over `n` points whose output width matches the container.
pub fn graph_for(kind: NetworkKind, n: usize, c: &WeightContainer) -> Result<NetworkGraph> {
    let probe = build_network(kind, n.clamp(1, pnacc_core::accel::MAX_POINTS), DEFAULT_NUM_CLASSES, DEFAULT_NUM_SEG_CLASSES)?;
    let last = &probe.layers[probe.output_node()].name;
    let entry = c
        .get(&format!("{last}.weight"))
        .ok_or_else(|| mismatch(format!("weights have no `{last}` layer; not a {kind} network")))?;
    let width = *entry.dims.last().unwrap_or(&0) as usize;
    if width == 0 {
        return Err(mismatch(format!("`{last}.weight` has no output width")));
    }
    let (k, m) = if kind.is_segmentation() { (DEFAULT_NUM_CLASSES, width) } else { (width, DEFAULT_NUM_SEG_CLASSES) };
    Ok(build_network(kind, n, k, m)?)
}

fn floats(e: &Entry) -> Result<Vec<f64>> {
    match &e.data {
        TensorData::Float32(v) => Ok(v.iter().map(|&x| x as f64).collect()),
        _ => Err(mismatch(format!("`{}` must be float32", e.name))),
    }
}

fn expect_dims(e: &Entry, dims: &[usize]) -> Result<()> {
    if e.dims.iter().map(|&d| d as usize).ne(dims.iter().copied()) {
        return Err(mismatch(format!("`{}` has dims {:?}, expected {:?}", e.name, e.dims, dims)));
    }
    Ok(())
}

fn u32_dims(dims: &[usize]) -> Vec<u32> {
    dims.iter().map(|&d| d as u32).collect()
}

/// Entries not claimed by any layer of the graph.
fn reject_unknown(c: &WeightContainer, known: &BTreeMap<String, ()>) -> Result<()> {
    match c.entries.iter().find(|e| !known.contains_key(&e.name)) {
        Some(e) => Err(mismatch(format!("entry `{}` does not belong to this network", e.name))),
        None => Ok(()),
    }
}

pub fn float_container(ws: &WeightSet) -> WeightContainer {
    let mut c = WeightContainer::default();
    for (name, p) in &ws.layers {
        c.push(Entry::float(format!("{name}.weight"), u32_dims(&[p.weight.rows(), p.weight.cols()]), p.weight.data().iter().copied()));
        c.push(Entry::float(format!("{name}.bias"), u32_dims(&[p.bias.len()]), p.bias.iter().copied()));
        if let Some(bn) = &p.bn {
            let fields = [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var];
            for (field, v) in BN_FIELDS.iter().zip(fields) {
                c.push(Entry::float(format!("{name}.bn.{field}"), u32_dims(&[v.len()]), v.iter().copied()));
            }
            c.push(Entry::float(format!("{name}.bn.eps"), vec![1], [bn.epsilon]));
        }
    }
    c
}

pub fn weight_set_from(c: &WeightContainer, graph: &NetworkGraph) -> Result<WeightSet> {
    let mut known = BTreeMap::new();
    let mut layers = BTreeMap::new();
    for l in graph.weighted_layers() {
        let get = |suffix: &str| c.get(&format!("{}.{suffix}", l.name));
        let w = get("weight").ok_or_else(|| mismatch(format!("missing `{}.weight`", l.name)))?;
        let b = get("bias").ok_or_else(|| mismatch(format!("missing `{}.bias`", l.name)))?;
        expect_dims(w, &[l.in_dim, l.out_dim])?;
        expect_dims(b, &[l.out_dim])?;
        let bn_entries: Vec<Option<&Entry>> = BN_FIELDS.iter().map(|f| get(&format!("bn.{f}"))).collect();
        let bn = match bn_entries.iter().filter(|e| e.is_some()).count() {
            0 => None,
            5 => {
                let e: Vec<&Entry> = bn_entries.into_iter().flatten().collect();
                for v in &e[..4] {
                    expect_dims(v, &[l.out_dim])?;
                }
                expect_dims(e[4], &[1])?;
                Some(BnParams {
                    gamma: floats(e[0])?,
                    beta: floats(e[1])?,
                    running_mean: floats(e[2])?,
                    running_var: floats(e[3])?,
                    epsilon: floats(e[4])?[0],
                })
            }
            _ => return Err(mismatch(format!("layer `{}` has an incomplete batch-norm set", l.name))),
        };
        for suffix in ["weight", "bias"].iter().map(|s| s.to_string()).chain(BN_FIELDS.iter().map(|f| format!("bn.{f}"))) {
            known.insert(format!("{}.{suffix}", l.name), ());
        }
        let weight = RealMatrix::from_vec(l.in_dim, l.out_dim, floats(w)?)?;
        layers.insert(l.name.clone(), LayerParams { weight, bias: floats(b)?, bn });
    }
    reject_unknown(c, &known)?;
    Ok(WeightSet { layers })
}

fn act_entry(name: String, fmt: FixedFormat) -> Entry {
    let data = if fmt.total_bits() == 8 { TensorData::Int8(vec![]) } else { TensorData::Int16(vec![]) };
    Entry { name, dims: vec![0], frac_bits: fmt.frac_bits() as i8, data }
}

fn format_of(e: &Entry, bits: u8) -> Result<FixedFormat> {
    let width = match e.data {
        TensorData::Int8(_) => 8,
        TensorData::Int16(_) => 16,
        TensorData::Float32(_) => return Err(mismatch(format!("`{}` must be an integer entry", e.name))),
    };
    if width != bits {
        return Err(mismatch(format!("`{}` is {width}-bit, expected {bits}-bit", e.name)));
    }
    let frac = u8::try_from(e.frac_bits).map_err(|_| CliError::Format(format!("`{}` has negative frac bits", e.name)))?;
    FixedFormat::new(bits, frac).map_err(|err| CliError::Format(format!("`{}`: {err}", e.name)))
}

pub fn quantized_container(q: &QuantizedNetwork) -> WeightContainer {
    let mut c = WeightContainer::default();
    c.push(act_entry("input.act".into(), q.input_fmt));
    for (name, l) in &q.layers {
        let codes = l.weight.codes();
        let data = if q.bits == 8 {
            TensorData::Int8(codes.iter().map(|&v| v as i8).collect())
        } else {
            TensorData::Int16(codes.iter().map(|&v| v as i16).collect())
        };
        c.push(Entry { name: format!("{name}.weight"), dims: u32_dims(l.weight.dims()), frac_bits: l.weight.fmt().frac_bits() as i8, data });
        c.push(Entry::float(format!("{name}.bias"), u32_dims(&[l.bias.len()]), l.bias.iter().copied()));
    }
    for (name, &fmt) in &q.activations {
        c.push(act_entry(format!("{name}.act"), fmt));
    }
    c
}

pub fn quantized_from(c: &WeightContainer, graph: &NetworkGraph, bits: u8) -> Result<QuantizedNetwork> {
    let mut known = BTreeMap::new();
    let mut get = |name: String| -> Result<&Entry> {
        let e = c.get(&name).ok_or_else(|| mismatch(format!("missing `{name}`")))?;
        known.insert(name, ());
        Ok(e)
    };
    let input_fmt = format_of(get("input.act".into())?, bits)?;
    let mut layers = BTreeMap::new();
    let mut activations = BTreeMap::new();
    for l in &graph.layers {
        activations.insert(l.name.clone(), format_of(get(format!("{}.act", l.name))?, bits)?);
        if !l.has_weights() {
            continue;
        }
        let w = get(format!("{}.weight", l.name))?;
        expect_dims(w, &[l.in_dim, l.out_dim])?;
        let fmt = format_of(w, bits)?;
        let codes: Vec<i32> = match &w.data {
            TensorData::Int8(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::Int16(v) => v.iter().map(|&x| x as i32).collect(),
            TensorData::Float32(_) => unreachable!("format_of rejects float entries"),
        };
        let weight = QTensor::new(vec![l.in_dim, l.out_dim], codes, fmt)?;
        let b = get(format!("{}.bias", l.name))?;
        expect_dims(b, &[l.out_dim])?;
        layers.insert(l.name.clone(), QuantLayer { weight, bias: floats(b)? });
    }
    reject_unknown(c, &known)?;
    let net = QuantizedNetwork { bits, input_fmt, layers, activations };
    net.check(graph)?;
    Ok(net)
}
