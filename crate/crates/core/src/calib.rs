//! Weight-only estimates of per-layer activation statistics (the substitute set).
//!
//! Statistics start from a unit Gaussian input and are pushed through the network
//! with `μ' = μ_W + μ`, `σ' = √(σ_W² + σ²)`. When consecutive widths differ the running
//! vector is resized by an [`EsaPolicy`] rule first. Clipping activations are ignored.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_json, write_json};
use crate::graph::{validate_graph, LayerKind, ModelGraph};
use crate::tensor::{weight_channel_stats, ChannelStats};

pub const SUBSTITUTES_FORMAT: &str = "gzsq-substitutes/1";

/// Value used to fill a resized statistics vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EsaRule {
    Min,
    MeanMinusMin,
    MeanPlusMin,
    Mean,
    MaxMinusMean,
    MaxPlusMean,
    Max,
    /// Tile the source cyclically from index 0.
    Repeat,
}

impl EsaRule {
    fn resize(self, src: &[f64], target: usize) -> Vec<f64> {
        let n = src.len() as f64;
        let min = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = src.iter().sum::<f64>() / n;
        let scalar = match self {
            EsaRule::Repeat => return (0..target).map(|i| src[i % src.len()]).collect(),
            EsaRule::Min => min,
            EsaRule::MeanMinusMin => mean - min,
            EsaRule::MeanPlusMin => mean + min,
            EsaRule::Mean => mean,
            EsaRule::MaxMinusMean => max - mean,
            EsaRule::MaxPlusMean => max + mean,
            EsaRule::Max => max,
        };
        vec![scalar; target]
    }
}

/// Rules for the mean and std vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePair {
    pub mean: EsaRule,
    pub std: EsaRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsaPolicy {
    pub expansion: RulePair,
    pub contraction: RulePair,
}

impl Default for EsaPolicy {
    fn default() -> Self {
        EsaPolicy {
            expansion: RulePair {
                mean: EsaRule::Repeat,
                std: EsaRule::Repeat,
            },
            contraction: RulePair {
                mean: EsaRule::MeanMinusMin,
                std: EsaRule::MeanMinusMin,
            },
        }
    }
}

/// Default policy plus per-layer overrides keyed by layer id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyMap {
    #[serde(default)]
    pub default: EsaPolicy,
    #[serde(default)]
    pub layers: BTreeMap<usize, EsaPolicy>,
}

impl PolicyMap {
    pub fn for_layer(&self, id: usize) -> &EsaPolicy {
        self.layers.get(&id).unwrap_or(&self.default)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Resizes `stats` to `target_c` channels; std entries are clamped at zero.
pub fn esa_adjust(
    stats: &ChannelStats,
    target_c: usize,
    policy: &EsaPolicy,
) -> Result<ChannelStats> {
    if stats.is_empty() || target_c == 0 {
        return Err(Error::invalid(format!(
            "esa_adjust needs non-empty stats and target >= 1 (got {} -> {target_c})",
            stats.len()
        )));
    }
    if stats.len() == target_c {
        return Ok(stats.clone());
    }
    let rules = if target_c > stats.len() {
        policy.expansion
    } else {
        policy.contraction
    };
    let mean = rules.mean.resize(&stats.mean, target_c);
    let std = rules
        .std
        .resize(&stats.std, target_c)
        .into_iter()
        .map(|s| s.max(0.0))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// One statistics-estimation step; `fold_bias` adds onto the mean.
pub fn se_step(
    prev: &ChannelStats,
    w_stats: &ChannelStats,
    fold_bias: Option<&[f64]>,
) -> Result<ChannelStats> {
    if prev.len() != w_stats.len() {
        return Err(Error::invalid(format!(
            "se_step width mismatch: activations {} vs weights {} (missing adjustment step?)",
            prev.len(),
            w_stats.len()
        )));
    }
    if let Some(b) = fold_bias {
        if b.len() != prev.len() {
            return Err(Error::invalid(format!(
                "fold bias length {} != {} channels",
                b.len(),
                prev.len()
            )));
        }
    }
    let mean = (0..prev.len())
        .map(|k| w_stats.mean[k] + prev.mean[k] + fold_bias.map_or(0.0, |b| b[k]))
        .collect();
    let std = prev
        .std
        .iter()
        .zip(&w_stats.std)
        .map(|(a, w)| (w * w + a * a).sqrt())
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Ordered `(layer id, stats)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstituteSet {
    pub folded_before: bool,
    pub entries: Vec<(usize, ChannelStats)>,
}

impl SubstituteSet {
    pub fn get(&self, layer_id: usize) -> Option<&ChannelStats> {
        self.entries
            .iter()
            .find(|(id, _)| *id == layer_id)
            .map(|(_, s)| s)
    }

    pub fn to_json(&self) -> SubstituteFile {
        SubstituteFile {
            format: SUBSTITUTES_FORMAT.to_string(),
            folded_before: self.folded_before,
            layers: self
                .entries
                .iter()
                .map(|(id, s)| SubstituteEntry {
                    layer: *id,
                    mean: s.mean.clone(),
                    std: s.std.clone(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SubstituteFile = read_json(path)?;
        if file.format != SUBSTITUTES_FORMAT {
            return Err(Error::UnsupportedVersion {
                found: file.format,
                expected: SUBSTITUTES_FORMAT.to_string(),
            });
        }
        let entries = file
            .layers
            .into_iter()
            .map(|e| {
                ChannelStats::new(e.mean, e.std)
                    .map(|s| (e.layer, s))
                    .map_err(|err| Error::parse(path, 0, format!("layer {}: {err}", e.layer)))
            })
            .collect::<Result<_>>()?;
        Ok(SubstituteSet {
            folded_before: file.folded_before,
            entries,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubstituteFile {
    pub format: String,
    pub folded_before: bool,
    pub layers: Vec<SubstituteEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubstituteEntry {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Layers that receive a substitute: conv-like layers and residual sums.
pub fn is_stat_layer(kind: LayerKind) -> bool {
    kind.is_conv_like() || matches!(kind, LayerKind::Add(_))
}

/// Builds the substitute set from weights alone.
///
/// Layers with live batch-norm take `(β, |γ|)` as their substitute. With
/// `folded_before` the model must be BN-free and each layer's bias is added to the
/// mean; otherwise biases are ignored.
pub fn estimate_substitutes(
    model: &ModelGraph,
    policies: &PolicyMap,
    folded_before: bool,
) -> Result<SubstituteSet> {
    if let Some(d) = validate_graph(model).into_iter().next() {
        return Err(Error::InvalidModel(d.to_string()));
    }
    if folded_before && model.has_bn() {
        return Err(Error::InvalidModel(
            "fold-before estimation needs a BN-free (folded) model".into(),
        ));
    }
    let shapes = model.output_shapes()?;
    let ctx = |id: usize| move |e: Error| Error::invalid(format!("layer {id}: {e}"));

    let mut prev = ChannelStats::uniform(model.input_shape[0], 0.0, 1.0);
    let mut per_layer: Vec<ChannelStats> = Vec::with_capacity(model.layers.len());
    let mut entries = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        let next = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                let w = layer.weights.as_ref().expect("validated conv-like layer");
                if let Some(bn) = &layer.bn {
                    ChannelStats {
                        mean: bn.beta.iter().map(|&b| b as f64).collect(),
                        std: bn.gamma.iter().map(|&g| (g as f64).abs()).collect(),
                    }
                } else {
                    let w_stats = weight_channel_stats(w).map_err(ctx(layer.id))?;
                    let adjusted = esa_adjust(&prev, w_stats.len(), policies.for_layer(layer.id))
                        .map_err(ctx(layer.id))?;
                    let bias: Option<Vec<f64>> = if folded_before {
                        layer
                            .bias
                            .as_ref()
                            .map(|b| b.iter().map(|&v| v as f64).collect())
                    } else {
                        None
                    };
                    se_step(&adjusted, &w_stats, bias.as_deref()).map_err(ctx(layer.id))?
                }
            }
            LayerKind::Add(source) => {
                let s = model.layer_index(source).expect("validated residual");
                let other = &per_layer[s];
                if other.len() != prev.len() {
                    return Err(Error::invalid(format!(
                        "layer {}: residual widths {} and {} differ",
                        layer.id,
                        prev.len(),
                        other.len()
                    )));
                }
                ChannelStats {
                    mean: prev
                        .mean
                        .iter()
                        .zip(&other.mean)
                        .map(|(a, b)| a + b)
                        .collect(),
                    std: prev
                        .std
                        .iter()
                        .zip(&other.std)
                        .map(|(a, b)| (a * a + b * b).sqrt())
                        .collect(),
                }
            }
            LayerKind::GlobalAvgPool => prev.clone(),
            LayerKind::Flatten => {
                let plane = if idx == 0 {
                    model.input_shape[1] * model.input_shape[2]
                } else {
                    shapes[idx - 1][1] * shapes[idx - 1][2]
                };
                let width = prev.len() * plane;
                ChannelStats {
                    mean: (0..width).map(|j| prev.mean[j / plane]).collect(),
                    std: (0..width).map(|j| prev.std[j / plane]).collect(),
                }
            }
        };
        if is_stat_layer(layer.kind) {
            entries.push((layer.id, next.clone()));
        }
        per_layer.push(next.clone());
        prev = next;
    }
    Ok(SubstituteSet {
        folded_before,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BnParams, LayerSpec};
    use crate::tensor::WeightTensor;

    fn stats(mean: &[f64], std: &[f64]) -> ChannelStats {
        ChannelStats::new(mean.to_vec(), std.to_vec()).unwrap()
    }

    #[test]
    fn se_examples() {
        let out = se_step(&stats(&[0.0], &[1.0]), &stats(&[0.0], &[0.0]), None).unwrap();
        assert_eq!(out, stats(&[0.0], &[1.0]));

        let out = se_step(&stats(&[0.5], &[0.6]), &stats(&[0.1], &[0.8]), None).unwrap();
        assert!((out.mean[0] - 0.6).abs() < 1e-12);
        assert!((out.std[0] - 1.0).abs() < 1e-12);

        let out = se_step(
            &stats(&[0.0], &[1.0]),
            &stats(&[0.2], &[0.0]),
            Some(&[-0.9]),
        )
        .unwrap();
        assert!((out.mean[0] + 0.7).abs() < 1e-12);
        assert_eq!(out.std[0], 1.0);
    }

    #[test]
    fn se_width_mismatch() {
        let r = se_step(
            &stats(&[0.0, 0.0], &[1.0, 1.0]),
            &stats(&[0.0], &[0.0]),
            None,
        );
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn esa_examples() {
        let p = EsaPolicy::default();
        let out = esa_adjust(&stats(&[1.0, 2.0], &[0.1, 0.2]), 4, &p).unwrap();
        assert_eq!(out.mean, vec![1.0, 2.0, 1.0, 2.0]);

        let out = esa_adjust(&stats(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), 2, &p).unwrap();
        assert_eq!(out.mean, vec![1.0, 1.0]);

        let mobilenet_like = EsaPolicy {
            expansion: RulePair {
                mean: EsaRule::Repeat,
                std: EsaRule::MeanPlusMin,
            },
            ..p
        };
        let out = esa_adjust(&stats(&[0.0, 0.0], &[0.2, 0.4]), 3, &mobilenet_like).unwrap();
        for s in out.std {
            assert!((s - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn esa_clamps_negative_std() {
        let p = EsaPolicy {
            expansion: RulePair {
                mean: EsaRule::Min,
                std: EsaRule::MaxMinusMean,
            },
            contraction: RulePair {
                mean: EsaRule::Min,
                std: EsaRule::MaxMinusMean,
            },
        };
        let out = esa_adjust(&stats(&[-1.0], &[0.5]), 3, &p).unwrap();
        assert_eq!(out.std, vec![0.0; 3]);
    }

    #[test]
    fn constant_weight_single_layer() {
        let w = WeightTensor::new([1, 1, 3, 3], vec![0.25; 9]).unwrap();
        let m = ModelGraph::new("c", [1, 4, 4], vec![LayerSpec::conv(0, w, 1, 1)]);
        let subs = estimate_substitutes(&m, &PolicyMap::default(), false).unwrap();
        assert_eq!(subs.entries.len(), 1);
        assert_eq!(subs.entries[0].1, stats(&[0.25], &[1.0]));
    }

    #[test]
    fn live_bn_uses_shift_and_scale() {
        let w = WeightTensor::new([2, 1, 1, 1], vec![1.0, 2.0]).unwrap();
        let bn = BnParams {
            gamma: vec![0.5, -2.0],
            beta: vec![0.1, 0.2],
            running_mean: vec![3.0, 4.0],
            running_std: vec![1.0, 1.0],
            epsilon: 1e-5,
        };
        let m = ModelGraph::new(
            "b",
            [1, 2, 2],
            vec![LayerSpec::conv(0, w, 1, 0).with_bn(bn)],
        );
        let subs = estimate_substitutes(&m, &PolicyMap::default(), false).unwrap();
        let s = &subs.entries[0].1;
        assert_eq!(s.std, vec![0.5, 2.0]);
        assert!((s.mean[0] - 0.1).abs() < 1e-7 && (s.mean[1] - 0.2).abs() < 1e-7);
        assert!(estimate_substitutes(&m, &PolicyMap::default(), true).is_err());
    }

    #[test]
    fn expansion_shapes() {
        let w1 = WeightTensor::new([2, 1, 1, 1], vec![1.0, -1.0]).unwrap();
        let w2 = WeightTensor::new([4, 2, 1, 1], vec![0.5; 8]).unwrap();
        let m = ModelGraph::new(
            "e",
            [1, 2, 2],
            vec![LayerSpec::conv(0, w1, 1, 0), LayerSpec::conv(1, w2, 1, 0)],
        );
        let subs = estimate_substitutes(&m, &PolicyMap::default(), false).unwrap();
        assert_eq!(subs.entries[0].1.len(), 2);
        assert_eq!(subs.entries[1].1.len(), 4);
    }
}
