//! Directory model format: `manifest.json` plus one raw little-endian f32 blob per vector.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_graph, Activation, BnParams, LayerKind, LayerSpec, ModelGraph};
use crate::error::{Error, Result};
use crate::format::{ensure_dir, read_f32_blob, read_json, write_f32_blob, write_json};
use crate::tensor::WeightTensor;

pub const MODEL_FORMAT: &str = "gzsq-model/1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    name: String,
    version: String,
    input_shape: [usize; 3],
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    id: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<usize>,
    stride: usize,
    padding: usize,
    activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<WeightRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<VecRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightRef {
    blob: String,
    shape: [usize; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct VecRef {
    blob: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    epsilon: f32,
    gamma: VecRef,
    beta: VecRef,
    running_mean: VecRef,
    running_std: VecRef,
}

fn kind_name(kind: LayerKind) -> (&'static str, Option<usize>) {
    match kind {
        LayerKind::Add(s) => ("add", Some(s)),
        k => (k.name(), None),
    }
}

fn parse_kind(path: &Path, entry: &LayerEntry) -> Result<LayerKind> {
    Ok(match entry.kind.as_str() {
        "conv2d" => LayerKind::Conv2d,
        "depthwise_conv2d" => LayerKind::DepthwiseConv2d,
        "fully_connected" => LayerKind::FullyConnected,
        "global_avg_pool" => LayerKind::GlobalAvgPool,
        "flatten" => LayerKind::Flatten,
        "add" => LayerKind::Add(entry.source.ok_or_else(|| {
            Error::parse(path, 0, format!("layer {}: add without source", entry.id))
        })?),
        other => {
            return Err(Error::parse(
                path,
                0,
                format!("layer {}: unknown layer kind {other:?}", entry.id),
            ))
        }
    })
}

/// Writes `model` into directory `dir` (created if needed).
pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let mut layers = Vec::with_capacity(model.layers.len());
    let put = |name: String, values: &[f32]| -> Result<VecRef> {
        write_f32_blob(&dir.join(&name), values)?;
        Ok(VecRef {
            blob: name,
            len: values.len(),
        })
    };
    for l in &model.layers {
        let (kind, source) = kind_name(l.kind);
        let weights = match &l.weights {
            Some(w) => {
                let blob = format!("layer{}.weight.bin", l.id);
                write_f32_blob(&dir.join(&blob), w.data())?;
                Some(WeightRef {
                    blob,
                    shape: w.shape(),
                })
            }
            None => None,
        };
        let bias = l
            .bias
            .as_ref()
            .map(|b| put(format!("layer{}.bias.bin", l.id), b))
            .transpose()?;
        let bn = match &l.bn {
            Some(bn) => Some(BnEntry {
                epsilon: bn.epsilon,
                gamma: put(format!("layer{}.bn_gamma.bin", l.id), &bn.gamma)?,
                beta: put(format!("layer{}.bn_beta.bin", l.id), &bn.beta)?,
                running_mean: put(format!("layer{}.bn_mean.bin", l.id), &bn.running_mean)?,
                running_std: put(format!("layer{}.bn_std.bin", l.id), &bn.running_std)?,
            }),
            None => None,
        };
        layers.push(LayerEntry {
            id: l.id,
            kind: kind.to_string(),
            source,
            stride: l.stride,
            padding: l.padding,
            activation: l.activation,
            weights,
            bias,
            bn,
        });
    }
    let manifest = Manifest {
        format: MODEL_FORMAT.to_string(),
        name: model.name.clone(),
        version: model.version.clone(),
        input_shape: model.input_shape,
        layers,
    };
    write_json(&dir.join(MANIFEST), &manifest)
}

/// Reads a model directory written by [`save_model`].
pub fn load_model(dir: &Path) -> Result<ModelGraph> {
    let manifest_path = dir.join(MANIFEST);
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format != MODEL_FORMAT {
        return Err(Error::UnsupportedVersion {
            found: manifest.format,
            expected: MODEL_FORMAT.to_string(),
        });
    }
    let vec = |r: &VecRef| read_f32_blob(&dir.join(&r.blob), &[r.len]);
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for e in &manifest.layers {
        let kind = parse_kind(&manifest_path, e)?;
        let weights = match &e.weights {
            Some(w) => Some(WeightTensor::new(
                w.shape,
                read_f32_blob(&dir.join(&w.blob), &w.shape)?,
            )?),
            None => None,
        };
        let bias = e.bias.as_ref().map(vec).transpose()?;
        let bn = match &e.bn {
            Some(b) => Some(BnParams {
                gamma: vec(&b.gamma)?,
                beta: vec(&b.beta)?,
                running_mean: vec(&b.running_mean)?,
                running_std: vec(&b.running_std)?,
                epsilon: b.epsilon,
            }),
            None => None,
        };
        layers.push(LayerSpec {
            id: e.id,
            kind,
            weights,
            bias,
            stride: e.stride,
            padding: e.padding,
            bn,
            activation: e.activation,
        });
    }
    let model = ModelGraph {
        name: manifest.name,
        version: manifest.version,
        input_shape: manifest.input_shape,
        layers,
    };
    if let Some(d) = validate_graph(&model).into_iter().next() {
        return Err(Error::parse(
            &manifest_path,
            0,
            format!("manifest describes an invalid graph: {d}"),
        ));
    }
    Ok(model)
}
