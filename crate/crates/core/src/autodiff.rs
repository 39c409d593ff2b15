//! Reverse-mode gradients through a [`ModelGraph`] and a scalar objective.
//!
//! The tape re-runs the forward pass in f64 and keeps every primal needed by the
//! reverse sweep: the model input, each conv-like layer's pre-normalization output,
//! each layer's pre-activation value, and each layer's post-activation output.
//! Objectives see the tape read-only and hand back gradient seeds at any of those
//! tap points; the reverse sweep then propagates them to the input and, on request,
//! to the weights.

use crate::error::{Error, Result};
use crate::graph::{Activation, LayerKind, ModelGraph};
use crate::ops::{self, ConvGeom};
use crate::tensor::{SeededRng, Tensor, WeightTensor};

/// Where in a layer an objective reads a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TapPoint {
    /// Conv-like output (bias included) before batch-norm.
    PreNorm,
    /// Post-activation output `f^n`.
    Output,
}

#[derive(Debug, Clone)]
struct LayerRecord {
    shape: [usize; 4],
    pre_norm: Option<Vec<f64>>,
    pre_act: Vec<f64>,
    output: Vec<f64>,
    /// Per-channel batch-norm `(scale, shift)` when the layer carries live BN.
    bn_affine: Option<(Vec<f64>, Vec<f64>)>,
}

/// Primal values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape<'m> {
    model: &'m ModelGraph,
    input_shape: [usize; 4],
    input: Vec<f64>,
    layers: Vec<LayerRecord>,
}

impl<'m> Tape<'m> {
    pub fn record(model: &'m ModelGraph, input: &Tensor) -> Result<Self> {
        let x: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
        Self::record_f64(model, input.shape(), x)
    }

    pub fn record_f64(model: &'m ModelGraph, shape: [usize; 4], input: Vec<f64>) -> Result<Self> {
        if [shape[1], shape[2], shape[3]] != model.input_shape {
            return Err(Error::invalid(format!(
                "input sample shape {:?} != model input {:?}",
                &shape[1..],
                model.input_shape
            )));
        }
        if input.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid("input data does not match its shape"));
        }
        model.output_shapes()?;
        let mut layers: Vec<LayerRecord> = Vec::with_capacity(model.layers.len());
        for (idx, layer) in model.layers.iter().enumerate() {
            let (x, xs) = match layers.last() {
                Some(r) => (&r.output, r.shape),
                None => (&input, shape),
            };
            let [n, c, h, w] = xs;
            let mut rec = match layer.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                    let g = layer.geometry(xs).expect("validated conv-like layer");
                    let wt = to_f64(layer.weights.as_ref().expect("validated").data());
                    let bias = layer.bias.as_ref().map(|b| to_f64(b));
                    let pre_norm = ops::conv2d(&g, x, &wt, bias.as_deref());
                    let out_shape = [n, g.out_c, g.out_h(), g.out_w()];
                    let (pre_act, bn_affine) = match &layer.bn {
                        Some(bn) => {
                            let aff = ops::bn_affine(
                                &to_f64(&bn.gamma),
                                &to_f64(&bn.beta),
                                &to_f64(&bn.running_mean),
                                &to_f64(&bn.running_std),
                                bn.epsilon as f64,
                            );
                            let mut v = pre_norm.clone();
                            ops::channel_affine(
                                &mut v,
                                g.out_c,
                                g.out_h() * g.out_w(),
                                &aff.0,
                                &aff.1,
                            );
                            (v, Some(aff))
                        }
                        None => (pre_norm.clone(), None),
                    };
                    LayerRecord {
                        shape: out_shape,
                        pre_norm: Some(pre_norm),
                        pre_act,
                        output: Vec::new(),
                        bn_affine,
                    }
                }
                LayerKind::Add(source) => {
                    let s = model.layer_index(source).expect("validated residual");
                    let other = &layers[s].output;
                    LayerRecord {
                        shape: xs,
                        pre_norm: None,
                        pre_act: x.iter().zip(other).map(|(a, b)| a + b).collect(),
                        output: Vec::new(),
                        bn_affine: None,
                    }
                }
                LayerKind::GlobalAvgPool => LayerRecord {
                    shape: [n, c, 1, 1],
                    pre_norm: None,
                    pre_act: ops::global_avg_pool(x, n, c, h * w),
                    output: Vec::new(),
                    bn_affine: None,
                },
                LayerKind::Flatten => LayerRecord {
                    shape: [n, c * h * w, 1, 1],
                    pre_norm: None,
                    pre_act: x.clone(),
                    output: Vec::new(),
                    bn_affine: None,
                },
            };
            rec.output = rec
                .pre_act
                .iter()
                .map(|&v| activate(layer.activation, v))
                .collect();
            if rec.output.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    format!("layer {} (op {idx})", layer.id),
                    "non-finite activation on tape",
                ));
            }
            layers.push(rec);
        }
        Ok(Tape {
            model,
            input_shape: shape,
            input,
            layers,
        })
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.input_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn shape(&self, idx: usize) -> [usize; 4] {
        self.layers[idx].shape
    }

    /// Value at a tap point of layer `idx`; `None` for `PreNorm` on layers without weights.
    pub fn tap(&self, idx: usize, point: TapPoint) -> Option<&[f64]> {
        let r = &self.layers[idx];
        match point {
            TapPoint::PreNorm => r.pre_norm.as_deref(),
            TapPoint::Output => Some(&r.output),
        }
    }

    /// Final model output (the input itself for an empty model).
    pub fn output(&self) -> (&[f64], [usize; 4]) {
        match self.layers.last() {
            Some(r) => (&r.output, r.shape),
            None => (&self.input, self.input_shape),
        }
    }

    /// Re-evaluates `objective` on the recorded primals.
    pub fn replay_loss(&self, objective: &dyn Objective) -> Result<f64> {
        objective.value(self)
    }

    /// Which side of every activation kink each pre-activation sits on.
    fn kink_signature(&self) -> Vec<u8> {
        let mut sig = Vec::new();
        for (layer, rec) in self.model.layers.iter().zip(&self.layers) {
            match layer.activation {
                Activation::None => {}
                Activation::Relu => sig.extend(rec.pre_act.iter().map(|&v| (v > 0.0) as u8)),
                Activation::Relu6 => sig.extend(
                    rec.pre_act
                        .iter()
                        .map(|&v| (v > 0.0) as u8 + (v >= 6.0) as u8),
                ),
            }
        }
        sig
    }
}

#[inline]
fn activate(act: Activation, v: f64) -> f64 {
    match act {
        Activation::None => v,
        Activation::Relu => v.max(0.0),
        Activation::Relu6 => v.clamp(0.0, 6.0),
    }
}

/// Derivative of the activation; 0 at the kinks.
#[inline]
fn activate_grad(act: Activation, v: f64) -> f64 {
    match act {
        Activation::None => 1.0,
        Activation::Relu => (v > 0.0) as u8 as f64,
        Activation::Relu6 => (v > 0.0 && v < 6.0) as u8 as f64,
    }
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Loss value plus gradient seeds at tap points.
#[derive(Debug, Clone, Default)]
pub struct Seeds {
    pub loss: f64,
    /// `(layer index, tap point, dL/d(tap))`.
    pub taps: Vec<(usize, TapPoint, Vec<f64>)>,
    /// Direct dependence of the loss on the model input.
    pub input: Option<Vec<f64>>,
}

impl Seeds {
    pub fn merge(&mut self, other: Seeds) {
        self.loss += other.loss;
        self.taps.extend(other.taps);
        match (&mut self.input, other.input) {
            (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
            (slot @ None, Some(b)) => *slot = Some(b),
            _ => {}
        }
    }
}

/// Scalar objective over a recorded forward pass.
pub trait Objective {
    fn value(&self, tape: &Tape<'_>) -> Result<f64>;

    /// Loss and gradient seeds. Objectives built from unsupported primitives keep
    /// this default.
    fn seeds(&self, _tape: &Tape<'_>) -> Result<Seeds> {
        Err(Error::UnsupportedOp(format!(
            "objective {:?} has no reverse rule",
            self.name()
        )))
    }

    fn name(&self) -> String {
        "objective".into()
    }
}

/// `Σ_i r_i · output_i`; with `r = 1` this is the plain output sum.
#[derive(Debug, Clone)]
pub struct OutputDot {
    pub direction: Vec<f64>,
}

impl OutputDot {
    pub fn ones(len: usize) -> Self {
        OutputDot {
            direction: vec![1.0; len],
        }
    }

    pub fn random(len: usize, rng: &mut SeededRng) -> Self {
        OutputDot {
            direction: (0..len).map(|_| rng.normal()).collect(),
        }
    }
}

impl Objective for OutputDot {
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        let (out, _) = tape.output();
        if out.len() != self.direction.len() {
            return Err(Error::invalid("direction length != output length"));
        }
        Ok(out.iter().zip(&self.direction).map(|(a, b)| a * b).sum())
    }

    fn seeds(&self, tape: &Tape<'_>) -> Result<Seeds> {
        let loss = self.value(tape)?;
        Ok(output_seed(tape, loss, self.direction.clone()))
    }

    fn name(&self) -> String {
        "output-dot".into()
    }
}

/// `0.5 · Σ (output_i − target_i)²`.
#[derive(Debug, Clone)]
pub struct SquaredError {
    pub target: Vec<f64>,
}

impl Objective for SquaredError {
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        let (out, _) = tape.output();
        if out.len() != self.target.len() {
            return Err(Error::invalid("target length != output length"));
        }
        Ok(0.5
            * out
                .iter()
                .zip(&self.target)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>())
    }

    fn seeds(&self, tape: &Tape<'_>) -> Result<Seeds> {
        let loss = self.value(tape)?;
        let (out, _) = tape.output();
        let d = out.iter().zip(&self.target).map(|(a, b)| a - b).collect();
        Ok(output_seed(tape, loss, d))
    }

    fn name(&self) -> String {
        "squared-error".into()
    }
}

/// Mean softmax cross-entropy of the `(n, K, 1, 1)` output against class labels.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub labels: Vec<usize>,
}

impl CrossEntropy {
    fn eval(&self, tape: &Tape<'_>, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let (out, shape) = tape.output();
        let n = shape[0];
        let k = shape[1] * shape[2] * shape[3];
        if self.labels.len() != n {
            return Err(Error::invalid("label count != batch size"));
        }
        let mut loss = 0.0;
        let mut grad = if want_grad {
            vec![0.0; out.len()]
        } else {
            Vec::new()
        };
        for (b, &label) in self.labels.iter().enumerate() {
            if label >= k {
                return Err(Error::invalid(format!("label {label} >= class count {k}")));
            }
            let logits = &out[b * k..(b + 1) * k];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
            loss += sum.ln() + max - logits[label];
            if want_grad {
                for j in 0..k {
                    let p = (logits[j] - max).exp() / sum;
                    grad[b * k + j] = (p - (j == label) as u8 as f64) / n as f64;
                }
            }
        }
        Ok((loss / n as f64, grad))
    }
}

impl Objective for CrossEntropy {
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        Ok(self.eval(tape, false)?.0)
    }

    fn seeds(&self, tape: &Tape<'_>) -> Result<Seeds> {
        let (loss, grad) = self.eval(tape, true)?;
        Ok(output_seed(tape, loss, grad))
    }

    fn name(&self) -> String {
        "cross-entropy".into()
    }
}

/// Sum of objectives.
pub struct SumObjective<'a> {
    pub terms: Vec<&'a dyn Objective>,
}

impl Objective for SumObjective<'_> {
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        self.terms.iter().map(|t| t.value(tape)).sum()
    }

    fn seeds(&self, tape: &Tape<'_>) -> Result<Seeds> {
        let mut acc = Seeds::default();
        for t in &self.terms {
            acc.merge(t.seeds(tape)?);
        }
        Ok(acc)
    }

    fn name(&self) -> String {
        "sum".into()
    }
}

/// Wraps a value-only closure. It can be evaluated and finite-differenced, but
/// `backward` reports it as unsupported.
pub struct OpaqueObjective<F>(pub F);

impl<F> Objective for OpaqueObjective<F>
where
    F: Fn(&Tape<'_>) -> Result<f64>,
{
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        (self.0)(tape)
    }

    fn name(&self) -> String {
        "opaque".into()
    }
}

fn output_seed(tape: &Tape<'_>, loss: f64, grad: Vec<f64>) -> Seeds {
    let taps = if tape.num_layers() == 0 {
        Vec::new()
    } else {
        vec![(tape.num_layers() - 1, TapPoint::Output, grad.clone())]
    };
    Seeds {
        loss,
        input: (tape.num_layers() == 0).then_some(grad),
        taps,
    }
}

/// Parameter gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

/// Gradients in f64, as produced by the reverse sweep.
#[derive(Debug, Clone)]
pub struct RawGradients {
    pub loss: f64,
    pub d_input: Vec<f64>,
    /// One entry per layer, `None` for layers without parameters.
    pub layers: Option<Vec<Option<LayerGrads>>>,
}

/// Gradients with the element type of their primals.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub d_input: Tensor,
    pub d_weights: Option<Vec<Option<WeightTensor>>>,
    pub d_bias: Option<Vec<Option<Vec<f32>>>>,
}

/// Reverse sweep over an already-recorded tape.
pub fn backward_tape(
    tape: &Tape<'_>,
    objective: &dyn Objective,
    want_params: bool,
) -> Result<RawGradients> {
    let model = tape.model;
    let seeds = objective.seeds(tape)?;
    if !seeds.loss.is_finite() {
        return Err(Error::numeric(
            "objective",
            format!("loss is {}", seeds.loss),
        ));
    }
    let n_layers = model.layers.len();
    let mut d_out: Vec<Option<Vec<f64>>> = vec![None; n_layers];
    let mut d_pre_norm: Vec<Option<Vec<f64>>> = vec![None; n_layers];
    for (idx, point, g) in seeds.taps {
        if idx >= n_layers {
            return Err(Error::invalid(format!(
                "seed for unknown layer index {idx}"
            )));
        }
        let slot = match point {
            TapPoint::Output => &mut d_out[idx],
            TapPoint::PreNorm => {
                if tape.layers[idx].pre_norm.is_none() {
                    return Err(Error::UnsupportedOp(format!(
                        "layer {} has no pre-norm tap",
                        model.layers[idx].id
                    )));
                }
                &mut d_pre_norm[idx]
            }
        };
        accumulate(slot, &g);
    }
    let mut d_input = seeds.input.unwrap_or_else(|| vec![0.0; tape.input.len()]);
    let mut params: Vec<Option<LayerGrads>> = vec![None; n_layers];

    for idx in (0..n_layers).rev() {
        let layer = &model.layers[idx];
        let rec = &tape.layers[idx];
        let (x, xs) = if idx == 0 {
            (&tape.input, tape.input_shape)
        } else {
            (&tape.layers[idx - 1].output, tape.layers[idx - 1].shape)
        };
        let Some(dy) = d_out[idx].take() else {
            // Nothing downstream reads this output; only a pre-norm seed can remain.
            match d_pre_norm[idx].take() {
                Some(dpn) => propagate_conv(
                    tape,
                    idx,
                    x,
                    xs,
                    dpn,
                    None,
                    want_params,
                    &mut d_out,
                    &mut d_input,
                    &mut params,
                )?,
                None if want_params && layer.kind.is_conv_like() => {
                    params[idx] = Some(zero_grads(layer, rec))
                }
                None => {}
            }
            continue;
        };
        let d_pre: Vec<f64> = dy
            .iter()
            .zip(&rec.pre_act)
            .map(|(&d, &v)| d * activate_grad(layer.activation, v))
            .collect();
        match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                let plane = rec.shape[2] * rec.shape[3];
                let c = rec.shape[1];
                let (mut dpn, bn_grads) = match &rec.bn_affine {
                    Some((scale, _)) => {
                        let pre_norm = rec.pre_norm.as_ref().expect("conv-like");
                        let bn = layer.bn.as_ref().expect("affine implies bn");
                        let mut dpn = vec![0.0; d_pre.len()];
                        let mut dgamma = vec![0.0; c];
                        let mut dbeta = vec![0.0; c];
                        for (i, chunk) in d_pre.chunks(plane).enumerate() {
                            let k = i % c;
                            let inv = 1.0
                                / ((bn.running_std[k] as f64).powi(2) + bn.epsilon as f64).sqrt();
                            for (j, &d) in chunk.iter().enumerate() {
                                let p = i * plane + j;
                                dpn[p] = d * scale[k];
                                dgamma[k] += d * (pre_norm[p] - bn.running_mean[k] as f64) * inv;
                                dbeta[k] += d;
                            }
                        }
                        (dpn, Some((dgamma, dbeta)))
                    }
                    None => (d_pre, None),
                };
                if let Some(extra) = d_pre_norm[idx].take() {
                    dpn.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
                propagate_conv(
                    tape,
                    idx,
                    x,
                    xs,
                    dpn,
                    bn_grads,
                    want_params,
                    &mut d_out,
                    &mut d_input,
                    &mut params,
                )?;
            }
            LayerKind::Add(source) => {
                let s = model.layer_index(source).expect("validated residual");
                accumulate(&mut d_out[s], &d_pre);
                route_to_input(idx, d_pre, &mut d_out, &mut d_input);
            }
            LayerKind::GlobalAvgPool => {
                let plane = xs[2] * xs[3];
                route_to_input(
                    idx,
                    ops::global_avg_pool_backward(&d_pre, plane),
                    &mut d_out,
                    &mut d_input,
                );
            }
            LayerKind::Flatten => route_to_input(idx, d_pre, &mut d_out, &mut d_input),
        }
    }
    if let Some(bad) = d_input.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(
            "input gradient",
            format!("non-finite entry at {bad}"),
        ));
    }
    Ok(RawGradients {
        loss: seeds.loss,
        d_input,
        layers: want_params.then_some(params),
    })
}

fn zero_grads(layer: &crate::graph::LayerSpec, rec: &LayerRecord) -> LayerGrads {
    let w = layer.weights.as_ref().map_or(0, WeightTensor::len);
    LayerGrads {
        weights: vec![0.0; w],
        bias: vec![0.0; rec.shape[1]],
        gamma: layer.bn.as_ref().map(|b| vec![0.0; b.channels()]),
        beta: layer.bn.as_ref().map(|b| vec![0.0; b.channels()]),
    }
}

#[allow(clippy::too_many_arguments)]
fn propagate_conv(
    tape: &Tape<'_>,
    idx: usize,
    x: &[f64],
    xs: [usize; 4],
    dpn: Vec<f64>,
    bn_grads: Option<(Vec<f64>, Vec<f64>)>,
    want_params: bool,
    d_out: &mut [Option<Vec<f64>>],
    d_input: &mut [f64],
    params: &mut [Option<LayerGrads>],
) -> Result<()> {
    let layer = &tape.model.layers[idx];
    let g: ConvGeom = layer.geometry(xs).expect("validated conv-like layer");
    let w = to_f64(layer.weights.as_ref().expect("validated").data());
    if want_params {
        let (dw, db) = ops::conv2d_backward_params(&g, &dpn, x);
        if dw.iter().chain(&db).any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                format!("layer {} (op {idx})", layer.id),
                "non-finite weight gradient",
            ));
        }
        let (gamma, beta) = match bn_grads {
            Some((a, b)) => (Some(a), Some(b)),
            None => (
                layer.bn.as_ref().map(|b| vec![0.0; b.channels()]),
                layer.bn.as_ref().map(|b| vec![0.0; b.channels()]),
            ),
        };
        params[idx] = Some(LayerGrads {
            weights: dw,
            bias: db,
            gamma,
            beta,
        });
    }
    let dx = ops::conv2d_backward_input(&g, &dpn, &w);
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(
            format!("layer {} (op {idx})", layer.id),
            "non-finite input gradient",
        ));
    }
    route_to_input(idx, dx, d_out, d_input);
    Ok(())
}

fn route_to_input(idx: usize, grad: Vec<f64>, d_out: &mut [Option<Vec<f64>>], d_input: &mut [f64]) {
    if idx == 0 {
        d_input.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
    } else {
        accumulate(&mut d_out[idx - 1], &grad);
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(v) => v.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Gradients of `objective` with respect to `input` and, when `want_weights` is set,
/// every layer's parameters.
pub fn backward(
    model: &ModelGraph,
    input: &Tensor,
    objective: &dyn Objective,
    want_weights: bool,
) -> Result<Gradients> {
    let tape = Tape::record(model, input)?;
    let raw = backward_tape(&tape, objective, want_weights)?;
    let d_input = Tensor::new(
        input.shape(),
        raw.d_input.iter().map(|&v| v as f32).collect(),
    )?;
    let (d_weights, d_bias) = match raw.layers {
        Some(layers) => {
            let mut dw = Vec::with_capacity(layers.len());
            let mut db = Vec::with_capacity(layers.len());
            for (layer, g) in model.layers.iter().zip(layers) {
                match (g, &layer.weights) {
                    (Some(g), Some(w)) => {
                        dw.push(Some(WeightTensor::new(
                            w.shape(),
                            g.weights.iter().map(|&v| v as f32).collect(),
                        )?));
                        db.push(Some(g.bias.iter().map(|&v| v as f32).collect()));
                    }
                    _ => {
                        dw.push(None);
                        db.push(None);
                    }
                }
            }
            (Some(dw), Some(db))
        }
        None => (None, None),
    };
    Ok(Gradients {
        loss: raw.loss,
        d_input,
        d_weights,
        d_bias,
    })
}

/// Gradient of per-channel `(mean, std)` statistics of an NCHW buffer.
///
/// Uses `dσ/dx_i = (x_i − μ) / (M·(σ + guard))`, which stays finite on constant channels.
pub fn channel_stats_backward(
    x: &[f64],
    shape: [usize; 4],
    mean: &[f64],
    std: &[f64],
    d_mean: &[f64],
    d_std: &[f64],
    guard: f64,
) -> Vec<f64> {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = vec![0.0; x.len()];
    for b in 0..n {
        for k in 0..c {
            let start = (b * c + k) * plane;
            let a = d_mean[k] / m;
            let s = d_std[k] / (m * (std[k] + guard));
            for p in start..start + plane {
                dx[p] = a + s * (x[p] - mean[k]);
            }
        }
    }
    dx
}

/// Per-channel mean and population std of an f64 NCHW buffer.
pub fn channel_stats_f64(x: &[f64], shape: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = shape;
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for k in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            let start = (b * c + k) * plane;
            sum += x[start..start + plane].iter().sum::<f64>();
        }
        let mu = sum / m;
        let mut sq = 0.0;
        for b in 0..n {
            let start = (b * c + k) * plane;
            sq += x[start..start + plane]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[k] = mu;
        std[k] = (sq / m).sqrt();
    }
    (mean, std)
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over a seeded sample of
/// at least 64 input coordinates (all of them when the input is smaller).
///
/// Coordinates whose ±epsilon perturbation moves any pre-activation across a ReLU/ReLU6
/// kink are redrawn, since the one-sided derivatives differ there.
pub fn finite_diff_check(
    model: &ModelGraph,
    input: &Tensor,
    objective: &dyn Objective,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "epsilon must be > 0, got {epsilon}"
        )));
    }
    let tape = Tape::record(model, input)?;
    let analytic = backward_tape(&tape, objective, false)?.d_input;
    let base_sig = tape.kink_signature();
    let len = analytic.len();
    let wanted = len.min(64);
    let mut order: Vec<usize> = (0..len).collect();
    SeededRng::new(seed).shuffle(&mut order);

    let eval = |i: usize, delta: f64| -> Result<(f64, Vec<u8>)> {
        let mut x = tape.input.clone();
        x[i] += delta;
        let t = Tape::record_f64(model, tape.input_shape, x)?;
        Ok((objective.value(&t)?, t.kink_signature()))
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    for &i in &order {
        if checked == wanted {
            break;
        }
        let (plus, sig_p) = eval(i, epsilon)?;
        let (minus, sig_m) = eval(i, -epsilon)?;
        if sig_p != base_sig || sig_m != base_sig {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
        checked += 1;
    }
    if checked == 0 {
        return Err(Error::numeric(
            "finite-difference check",
            "every sampled coordinate straddles an activation kink",
        ));
    }
    Ok(worst)
}
