//! Batch-norm folding into the preceding conv-like layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{validate_graph, ModelGraph};
use crate::tensor::{gaussian_tensor, SeededRng};

const PROBE_SEED: u64 = 0x5eed_f01d;
const PROBE_BATCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub layer: usize,
    pub folded: bool,
    /// Largest `|folded − original| / (1 + |original|)` over the probe batch.
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub layers: Vec<FoldEntry>,
}

impl FoldReport {
    pub fn folded_count(&self) -> usize {
        self.layers.iter().filter(|e| e.folded).count()
    }

    pub fn max_deviation(&self) -> f64 {
        self.layers
            .iter()
            .map(|e| e.max_deviation)
            .fold(0.0, f64::max)
    }
}

/// Folds every batch-norm into its layer's weights and bias.
///
/// `W'[k] = W[k]·γ_k/√(σ_k² + ε)` and `b'[k] = γ_k·(b_k − μ_k)/√(σ_k² + ε) + β_k`; a
/// missing conv bias counts as zero. Layers that had BN always leave with a bias.
pub fn fold_bn(model: &ModelGraph) -> Result<(ModelGraph, FoldReport)> {
    if let Some(d) = validate_graph(model).into_iter().next() {
        return Err(Error::InvalidModel(d.to_string()));
    }
    let mut folded = model.clone();
    let mut touched = vec![false; model.layers.len()];
    for (idx, layer) in folded.layers.iter_mut().enumerate() {
        let Some(bn) = layer.bn.take() else { continue };
        let weights = layer.weights.as_mut().ok_or_else(|| {
            Error::InvalidModel(format!(
                "layer {}: batch-norm without a conv-like layer",
                layer.id
            ))
        })?;
        let out_c = weights.out_channels();
        let mut bias = layer.bias.take().unwrap_or_else(|| vec![0.0; out_c]);
        for k in 0..out_c {
            let denom = ((bn.running_std[k] as f64).powi(2) + bn.epsilon as f64).sqrt();
            let scale = bn.gamma[k] as f64 / denom;
            for w in weights.filter_mut(k) {
                *w = (*w as f64 * scale) as f32;
            }
            bias[k] =
                (scale * (bias[k] as f64 - bn.running_mean[k] as f64) + bn.beta[k] as f64) as f32;
        }
        layer.bias = Some(bias);
        touched[idx] = true;
    }

    let deviations = if touched.iter().any(|&t| t) {
        probe_deviation(model, &folded)?
    } else {
        vec![0.0; model.layers.len()]
    };
    let layers = model
        .layers
        .iter()
        .zip(touched)
        .zip(deviations)
        .map(|((l, folded), dev)| FoldEntry {
            layer: l.id,
            folded,
            max_deviation: if folded { dev } else { 0.0 },
        })
        .collect();
    Ok((folded, FoldReport { layers }))
}

fn probe_deviation(original: &ModelGraph, folded: &ModelGraph) -> Result<Vec<f64>> {
    let [c, h, w] = original.input_shape;
    let x = gaussian_tensor(
        [PROBE_BATCH, c, h, w],
        0.0,
        1.0,
        &mut SeededRng::new(PROBE_SEED),
    )?;
    let (_, a) = original.forward(&x, true)?;
    let (_, b) = folded.forward(&x, true)?;
    let (a, b) = (a.expect("traced"), b.expect("traced"));
    Ok(a.entries
        .iter()
        .zip(&b.entries)
        .map(|((_, ta), (_, tb))| {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&p, &q)| ((p - q).abs() / (1.0 + p.abs())) as f64)
                .fold(0.0, f64::max)
        })
        .collect())
}
