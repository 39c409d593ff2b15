//! Model description, inference with activation taps, and structural validation.

mod io;

pub use io::{load_model, save_model, MODEL_FORMAT};

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Tensor, WeightTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::Relu6 => x.clamp(0.0, 6.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    DepthwiseConv2d,
    FullyConnected,
    /// Residual sum with the output of the layer carrying this id.
    Add(usize),
    GlobalAvgPool,
    Flatten,
}

impl LayerKind {
    pub fn is_conv_like(self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::DepthwiseConv2d => "depthwise_conv2d",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::Add(_) => "add",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// Inference-time batch normalization. `running_std` is a standard deviation, not a variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_std: Vec<f32>,
    pub epsilon: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_std: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale·x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        ops::bn_affine(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_std,
            self.epsilon,
        )
    }

    fn problems(&self) -> Vec<String> {
        let c = self.gamma.len();
        let mut out = Vec::new();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_std.len() != c {
            out.push("batch-norm vectors differ in length".to_string());
        }
        if self.running_std.iter().any(|s| !(*s >= 0.0)) {
            out.push("batch-norm running_std must be >= 0".to_string());
        }
        if !(self.epsilon >= 0.0) {
            out.push("batch-norm epsilon must be >= 0".to_string());
        }
        out
    }
}

/// One node of the sequential graph.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: usize,
    pub kind: LayerKind,
    pub weights: Option<WeightTensor>,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
    pub bn: Option<BnParams>,
    pub activation: Activation,
}

impl LayerSpec {
    fn bare(id: usize, kind: LayerKind) -> Self {
        LayerSpec {
            id,
            kind,
            weights: None,
            bias: None,
            stride: 1,
            padding: 0,
            bn: None,
            activation: Activation::None,
        }
    }

    pub fn conv(id: usize, weights: WeightTensor, stride: usize, padding: usize) -> Self {
        LayerSpec {
            weights: Some(weights),
            stride,
            padding,
            ..Self::bare(id, LayerKind::Conv2d)
        }
    }

    pub fn depthwise(id: usize, weights: WeightTensor, stride: usize, padding: usize) -> Self {
        LayerSpec {
            weights: Some(weights),
            stride,
            padding,
            ..Self::bare(id, LayerKind::DepthwiseConv2d)
        }
    }

    pub fn fully_connected(id: usize, weights: WeightTensor) -> Self {
        LayerSpec {
            weights: Some(weights),
            ..Self::bare(id, LayerKind::FullyConnected)
        }
    }

    pub fn add(id: usize, source: usize) -> Self {
        Self::bare(id, LayerKind::Add(source))
    }

    pub fn global_avg_pool(id: usize) -> Self {
        Self::bare(id, LayerKind::GlobalAvgPool)
    }

    pub fn flatten(id: usize) -> Self {
        Self::bare(id, LayerKind::Flatten)
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_bn(mut self, bn: BnParams) -> Self {
        self.bn = Some(bn);
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn out_channels(&self) -> Option<usize> {
        self.weights.as_ref().map(WeightTensor::out_channels)
    }

    fn groups(&self) -> usize {
        match (self.kind, &self.weights) {
            (LayerKind::DepthwiseConv2d, Some(w)) => w.out_channels(),
            _ => 1,
        }
    }

    pub(crate) fn geometry(&self, input: [usize; 4]) -> Option<ConvGeom> {
        let w = self.weights.as_ref()?;
        let [o, _, kh, kw] = w.shape();
        Some(ConvGeom {
            batch: input[0],
            in_c: input[1],
            in_h: input[2],
            in_w: input[3],
            out_c: o,
            kh,
            kw,
            stride: self.stride.max(1),
            pad: self.padding,
            groups: self.groups(),
        })
    }
}

/// Human-readable problem found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(id) => write!(f, "layer {id}: {}", self.message),
            None => write!(f, "model: {}", self.message),
        }
    }
}

/// Upper bound on the per-sample size of any tensor a model may produce.
pub const MAX_SAMPLE_ELEMENTS: usize = 1 << 26;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub version: String,
    /// Per-sample input shape `(c, h, w)`.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Post-activation output of every layer, in execution order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub entries: Vec<(usize, Tensor)>,
}

impl ActivationTrace {
    pub fn get(&self, layer_id: usize) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(id, _)| *id == layer_id)
            .map(|(_, t)| t)
    }
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: [usize; 3], layers: Vec<LayerSpec>) -> Self {
        ModelGraph {
            name: name.into(),
            version: "1".into(),
            input_shape,
            layers,
        }
    }

    pub fn layer_index(&self, id: usize) -> Option<usize> {
        self.layers.iter().position(|l| l.id == id)
    }

    pub fn has_bn(&self) -> bool {
        self.layers.iter().any(|l| l.bn.is_some())
    }

    /// The first `k` layers as a model of their own.
    pub fn truncated(&self, k: usize) -> ModelGraph {
        ModelGraph {
            layers: self.layers[..k.min(self.layers.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Per-layer output shapes `(c, h, w)`; fails on the first structural problem.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let (shapes, diags) = self.walk_shapes();
        match diags.into_iter().next() {
            Some(d) => Err(Error::InvalidModel(d.to_string())),
            None => Ok(shapes),
        }
    }

    fn walk_shapes(&self) -> (Vec<[usize; 3]>, Vec<Diagnostic>) {
        let mut diags = Vec::new();
        let mut shapes: Vec<[usize; 3]> = Vec::with_capacity(self.layers.len());
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut cur = self.input_shape;
        if cur.contains(&0) {
            diags.push(Diagnostic {
                layer: None,
                message: format!("input shape {cur:?} has a zero dimension"),
            });
        }
        if cur
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none_or(|n| n > MAX_SAMPLE_ELEMENTS)
        {
            diags.push(Diagnostic {
                layer: None,
                message: format!("input shape {cur:?} exceeds {MAX_SAMPLE_ELEMENTS} elements"),
            });
            cur = [1, 1, 1];
        }
        for (idx, layer) in self.layers.iter().enumerate() {
            let mut report = |message: String| {
                diags.push(Diagnostic {
                    layer: Some(layer.id),
                    message,
                })
            };
            if seen.insert(layer.id, idx).is_some() {
                report(format!("duplicate layer id {}", layer.id));
            }
            if layer.kind.is_conv_like() != layer.weights.is_some() {
                report(format!(
                    "{} layer {} weights",
                    layer.kind.name(),
                    if layer.weights.is_some() {
                        "must not carry"
                    } else {
                        "requires"
                    }
                ));
            }
            if !layer.kind.is_conv_like() && (layer.bias.is_some() || layer.bn.is_some()) {
                report(format!(
                    "{} layer cannot carry bias or batch-norm",
                    layer.kind.name()
                ));
            }
            if layer.stride == 0 {
                report("stride must be >= 1".into());
            }
            let mut next = cur;
            match layer.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                    if let Some(w) = &layer.weights {
                        let [o, i, kh, kw] = w.shape();
                        let ok = match layer.kind {
                            LayerKind::Conv2d => i == cur[0],
                            LayerKind::DepthwiseConv2d => i == 1 && o == cur[0],
                            _ => i == cur[0] && kh == 1 && kw == 1 && cur[1] == 1 && cur[2] == 1,
                        };
                        if !ok {
                            report(format!(
                                "weights {:?} do not fit input {:?}",
                                w.shape(),
                                cur
                            ));
                        }
                        if o == 0 || kh == 0 || kw == 0 {
                            report("weights have a zero dimension".into());
                        }
                        if let Some(b) = &layer.bias {
                            if b.len() != o {
                                report(format!("bias length {} != out channels {o}", b.len()));
                            }
                        }
                        if let Some(bn) = &layer.bn {
                            if bn.channels() != o {
                                report(format!(
                                    "batch-norm width {} != out channels {o}",
                                    bn.channels()
                                ));
                            }
                            for p in bn.problems() {
                                report(p);
                            }
                        }
                        let stride = layer.stride.max(1);
                        let pad = layer.padding.saturating_mul(2);
                        let (ph, pw) = (cur[1].saturating_add(pad), cur[2].saturating_add(pad));
                        if ph < kh || pw < kw {
                            report(format!(
                                "kernel {kh}x{kw} larger than padded input {ph}x{pw}"
                            ));
                            next = [o, 1, 1];
                        } else {
                            next = [o, (ph - kh) / stride + 1, (pw - kw) / stride + 1];
                        }
                    }
                }
                LayerKind::Add(source) => match seen.get(&source) {
                    Some(&s) if s < idx => {
                        if shapes[s] != cur {
                            report(format!(
                                "residual source {source} shape {:?} != input {:?}",
                                shapes[s], cur
                            ));
                        }
                    }
                    _ => report(format!("residual source {source} is not an earlier layer")),
                },
                LayerKind::GlobalAvgPool => next = [cur[0], 1, 1],
                LayerKind::Flatten => {
                    next = [cur[0].saturating_mul(cur[1]).saturating_mul(cur[2]), 1, 1]
                }
            }
            if next
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .is_none_or(|n| n > MAX_SAMPLE_ELEMENTS)
            {
                report(format!(
                    "output shape {next:?} exceeds {MAX_SAMPLE_ELEMENTS} elements per sample"
                ));
                next = [next[0].min(1), 1, 1];
            }
            shapes.push(next);
            cur = next;
        }
        (shapes, diags)
    }

    /// Runs inference; with `trace` set, records every layer's post-activation output.
    pub fn forward(
        &self,
        input: &Tensor,
        trace: bool,
    ) -> Result<(Tensor, Option<ActivationTrace>)> {
        let mut entries = Vec::new();
        let out = self.forward_with(input, |idx, t| {
            if trace {
                entries.push((self.layers[idx].id, t.clone()));
            }
            Ok(())
        })?;
        Ok((out, trace.then_some(ActivationTrace { entries })))
    }

    /// Runs inference calling `hook` on each layer's post-activation output; the hook may
    /// rewrite the tensor in place (used for activation fake-quantization).
    pub fn forward_with<F>(&self, input: &Tensor, mut hook: F) -> Result<Tensor>
    where
        F: FnMut(usize, &mut Tensor) -> Result<()>,
    {
        if input.sample_shape() != self.input_shape {
            return Err(Error::invalid(format!(
                "input sample shape {:?} != model input {:?}",
                input.sample_shape(),
                self.input_shape
            )));
        }
        self.output_shapes()?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for idx in 0..self.layers.len() {
            let prev = outputs.last().unwrap_or(input);
            let mut out = self.apply_layer(idx, prev, &outputs)?;
            if !out.is_finite() {
                return Err(Error::numeric(
                    format!("layer {}", self.layers[idx].id),
                    "non-finite activation",
                ));
            }
            hook(idx, &mut out)?;
            outputs.push(out);
        }
        Ok(outputs.pop().unwrap_or_else(|| input.clone()))
    }

    fn apply_layer(&self, idx: usize, x: &Tensor, outputs: &[Tensor]) -> Result<Tensor> {
        let layer = &self.layers[idx];
        let [n, c, h, w] = x.shape();
        let mut out = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                let g = layer.geometry(x.shape()).ok_or_else(|| {
                    Error::InvalidModel(format!("layer {} has no weights", layer.id))
                })?;
                let weights = layer.weights.as_ref().expect("geometry implies weights");
                let data = ops::conv2d(&g, x.data(), weights.data(), layer.bias.as_deref());
                let mut t = Tensor::new([n, g.out_c, g.out_h(), g.out_w()], data)?;
                if let Some(bn) = &layer.bn {
                    let (scale, shift) = bn.affine();
                    let plane = g.out_h() * g.out_w();
                    ops::channel_affine(t.data_mut(), g.out_c, plane, &scale, &shift);
                }
                t
            }
            LayerKind::Add(source) => {
                let s = self
                    .layer_index(source)
                    .filter(|&s| s < idx)
                    .ok_or_else(|| Error::InvalidModel(format!("bad residual source {source}")))?;
                let other = &outputs[s];
                let data = x
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(a, b)| a + b)
                    .collect();
                Tensor::new(x.shape(), data)?
            }
            LayerKind::GlobalAvgPool => {
                Tensor::new([n, c, 1, 1], ops::global_avg_pool(x.data(), n, c, h * w))?
            }
            LayerKind::Flatten => Tensor::new([n, c * h * w, 1, 1], x.data().to_vec())?,
        };
        if layer.activation != Activation::None {
            let act = layer.activation;
            out.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(out)
    }
}

/// Structural checks; an empty list means the model is well formed.
pub fn validate_graph(model: &ModelGraph) -> Vec<Diagnostic> {
    model.walk_shapes().1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv1x1(id: usize, w: f32) -> LayerSpec {
        LayerSpec::conv(id, WeightTensor::new([1, 1, 1, 1], vec![w]).unwrap(), 1, 0)
    }

    #[test]
    fn one_by_one_conv_scales() {
        let m = ModelGraph::new("t", [1, 2, 2], vec![conv1x1(0, 2.0).with_bias(vec![0.0])]);
        let (y, _) = m
            .forward(&Tensor::filled([1, 1, 2, 2], 3.0), false)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn relu6_clips() {
        let m = ModelGraph::new(
            "t",
            [1, 1, 3],
            vec![conv1x1(0, 1.0).with_activation(Activation::Relu6)],
        );
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 3.0, 9.0]).unwrap();
        assert_eq!(m.forward(&x, false).unwrap().0.data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn bn_matches_scalar_formula() {
        let bn = BnParams {
            gamma: vec![1.5],
            beta: vec![-0.25],
            running_mean: vec![0.5],
            running_std: vec![2.0],
            epsilon: 1e-3,
        };
        let m = ModelGraph::new("t", [1, 1, 4], vec![conv1x1(0, 1.0).with_bn(bn)]);
        let xs = [-2.0f32, 0.0, 0.5, 3.0];
        let x = Tensor::new([1, 1, 1, 4], xs.to_vec()).unwrap();
        let y = m.forward(&x, false).unwrap().0;
        for (xi, yi) in xs.iter().zip(y.data()) {
            let want = 1.5 * (xi - 0.5) / (4.0f32 + 1e-3).sqrt() - 0.25;
            assert!((want - yi).abs() < 1e-6);
        }
    }

    #[test]
    fn diagnostics() {
        let good = ModelGraph::new("g", [1, 2, 2], vec![conv1x1(0, 1.0), LayerSpec::add(1, 0)]);
        assert!(validate_graph(&good).is_empty());

        let later = ModelGraph::new("b", [1, 2, 2], vec![LayerSpec::add(0, 1), conv1x1(1, 1.0)]);
        assert_eq!(validate_graph(&later).len(), 1);

        let bias = ModelGraph::new(
            "b",
            [1, 2, 2],
            vec![conv1x1(0, 1.0).with_bias(vec![0.0, 1.0])],
        );
        let d = validate_graph(&bias);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].layer, Some(0));
    }

    #[test]
    fn wrong_input_shape() {
        let m = ModelGraph::new("t", [1, 2, 2], vec![conv1x1(0, 1.0)]);
        assert!(matches!(
            m.forward(&Tensor::zeros([1, 2, 2, 2]), false),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn overflow_is_numeric_fault() {
        let m = ModelGraph::new("t", [1, 1, 1], vec![conv1x1(7, 1e30), conv1x1(8, 1e30)]);
        match m.forward(&Tensor::filled([1, 1, 1, 1], 1e30), false) {
            Err(Error::NumericFault { location, .. }) => assert_eq!(location, "layer 7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
