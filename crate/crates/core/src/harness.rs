//! Desk-scale experiments: synthetic datasets, a tiny trainer, model fixtures and
//! calibration comparison reports.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward_tape, finite_diff_check, CrossEntropy, Objective, OutputDot, Tape};
use crate::calib::{estimate_substitutes, PolicyMap};
use crate::distill::{distill, distill_with, DistillConfig, DistillObjective, LossKind};
use crate::error::{Error, Result};
use crate::folding::fold_bn;
use crate::format::{ensure_dir, read_f32_blob, read_json, read_text, write_f32_blob, write_json};
use crate::graph::{Activation, BnParams, LayerKind, LayerSpec, ModelGraph};
use crate::quant::{
    calibrate_activations, quantize_model, quantized_forward, ActivationParams, Granularity,
    ObserverKind, QuantizedModel, Symmetry,
};
use crate::tensor::{activation_channel_stats, gaussian_tensor, SeededRng, Tensor, WeightTensor};

pub const DATASET_FORMAT: &str = "gzsq-dataset/1";
pub const REPORT_FORMAT: &str = "gzsq-report/1";
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// One Gaussian blob per class around a smooth class prototype.
    GaussianBlobs,
    /// Oriented sinusoidal stripes with random phase; the class is the orientation.
    StripedPatterns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub n_per_class: usize,
    pub shape: [usize; 3],
    /// Distance of each class prototype from the origin, in units of the pixel noise std.
    pub separation: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianBlobs,
            classes: 4,
            n_per_class: 100,
            shape: [3, 8, 8],
            separation: 3.0,
            seed: 0,
        }
    }
}

/// Class prototypes shared by both splits: per channel an offset plus a linear ramp in
/// each spatial direction. When the classes fit in that span the prototypes form a
/// regular simplex centred at the origin; otherwise they are independent draws. Either
/// way each lies at distance `separation` from the origin.
fn blob_prototypes(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let [c, h, w] = spec.shape;
    let mut rng = SeededRng::stream(spec.seed, 0);
    let mut protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let coef: Vec<[f64; 3]> = (0..c)
                .map(|_| [rng.normal(), rng.normal(), rng.normal()])
                .collect();
            let mut p = Vec::with_capacity(c * h * w);
            for k in coef.iter() {
                for y in 0..h {
                    for x in 0..w {
                        let ry = (y as f64 + 0.5) / h as f64 - 0.5;
                        let rx = (x as f64 + 0.5) / w as f64 - 0.5;
                        p.push(k[0] + 2.0 * k[1] * ry + 2.0 * k[2] * rx);
                    }
                }
            }
            p
        })
        .collect();
    if let Some(basis) = orthonormalize(&protos) {
        let k = spec.classes as f64;
        let centre: Vec<f64> = (0..basis[0].len())
            .map(|i| basis.iter().map(|e| e[i]).sum::<f64>() / k)
            .collect();
        protos = basis
            .iter()
            .map(|e| e.iter().zip(&centre).map(|(a, m)| a - m).collect())
            .collect();
    }
    protos
        .into_iter()
        .map(|p| {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            p.iter().map(|v| v * spec.separation / norm).collect()
        })
        .collect()
}

/// Gram-Schmidt; `None` when the vectors are (numerically) dependent.
fn orthonormalize(vs: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for v in vs {
        let mut u = v.clone();
        for e in &basis {
            let d: f64 = u.iter().zip(e).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(e).for_each(|(a, b)| *a -= d * b);
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 1e-6 * scale) {
            return None;
        }
        basis.push(u.iter().map(|x| x / norm).collect());
    }
    Some(basis)
}

/// Generates one split; train and test share class prototypes but not samples.
pub fn gen_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    let [c, h, w] = spec.shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "invalid sample shape {:?}",
            spec.shape
        )));
    }
    if spec.classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if spec.n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    if !(spec.separation >= 0.0) || !spec.separation.is_finite() {
        return Err(Error::invalid("separation must be finite and >= 0"));
    }
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = SeededRng::stream(spec.seed, stream);
    let per = c * h * w;
    let n = spec.classes * spec.n_per_class;
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * per);
    match spec.kind {
        DatasetKind::GaussianBlobs => {
            let protos = blob_prototypes(spec);
            for &label in &labels {
                data.extend(protos[label].iter().map(|&m| (m + rng.normal()) as f32));
            }
        }
        DatasetKind::StripedPatterns => {
            let amplitude = spec.separation * std::f64::consts::SQRT_2 / (per as f64).sqrt();
            let freq = 2.0;
            for &label in &labels {
                let theta = PI * label as f64 / spec.classes as f64;
                let (dy, dx) = (theta.sin(), theta.cos());
                let phase = 2.0 * PI * rng.uniform();
                for _ in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let u = (dy * y as f64 / h as f64 + dx * x as f64 / w as f64) * freq;
                            let v = amplitude
                                * (2.0 * PI * u + phase).sin()
                                * (per as f64 / (h * w * c) as f64).sqrt();
                            data.push((v + rng.normal()) as f32);
                        }
                    }
                }
            }
        }
    }
    Ok(Dataset {
        samples: Tensor::new([n, c, h, w], data)?,
        labels,
        classes: spec.classes,
        split,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if samples.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} samples but {} labels",
                samples.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Writes `data.bin`, `labels.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_f32_blob(&dir.join("data.bin"), self.samples.data())?;
        let mut csv = String::new();
        for l in &self.labels {
            let _ = writeln!(csv, "{l}");
        }
        let labels_path = dir.join("labels.csv");
        std::fs::write(&labels_path, csv).map_err(|e| Error::io(&labels_path, e))?;
        let [n, c, h, w] = self.samples.shape();
        write_json(
            &dir.join("meta.json"),
            &DatasetMeta {
                format: DATASET_FORMAT.to_string(),
                n,
                c,
                h,
                w,
                classes: self.classes,
                split: self.split,
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = read_json(&meta_path)?;
        if meta.format != DATASET_FORMAT {
            return Err(Error::UnsupportedVersion {
                found: meta.format,
                expected: DATASET_FORMAT.to_string(),
            });
        }
        let shape = [meta.n, meta.c, meta.h, meta.w];
        let data = read_f32_blob(&dir.join("data.bin"), &shape)?;
        let labels_path = dir.join("labels.csv");
        let text = read_text(&labels_path)?;
        let mut labels = Vec::with_capacity(meta.n.min(text.len()));
        let mut offset = 0u64;
        for line in text.lines() {
            let trimmed = line.trim();
            if !trimmed.is_empty() {
                let l: usize = trimmed.parse().map_err(|_| {
                    Error::parse(&labels_path, offset, format!("bad label {trimmed:?}"))
                })?;
                if l >= meta.classes {
                    return Err(Error::parse(
                        &labels_path,
                        offset,
                        format!("label {l} >= {}", meta.classes),
                    ));
                }
                labels.push(l);
            }
            offset += line.len() as u64 + 1;
        }
        if labels.len() != meta.n {
            return Err(Error::parse(
                &labels_path,
                offset,
                format!("{} labels, meta declares {}", labels.len(), meta.n),
            ));
        }
        Dataset::new(Tensor::new(shape, data)?, labels, meta.classes, meta.split)
    }
}

/// Anything that maps an input batch to `(n, K, 1, 1)` logits.
pub trait Classifier: Sync {
    fn logits(&self, input: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelGraph {
    fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.0)
    }
}

impl Classifier for QuantizedModel {
    fn logits(&self, input: &Tensor) -> Result<Tensor> {
        quantized_forward(self, input)
    }
}

/// Index of the largest logit per sample; ties go to the lowest class id.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let n = logits.batch();
    let k = logits.len() / n.max(1);
    logits
        .data()
        .chunks(k.max(1))
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy.
pub fn eval_accuracy(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = model.logits(&data.samples.slice_batch(start, end)?)?;
        if logits.len() != (end - start) * data.classes {
            return Err(Error::invalid(format!(
                "model emits {} logits per sample, dataset has {} classes",
                logits.len() / (end - start),
                data.classes
            )));
        }
        correct += argmax_rows(&logits)
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            learning_rate: 0.05,
            momentum: 0.9,
            batch: 32,
            seed: 0,
        }
    }
}

/// Schedule used for the reference fixture: long enough to converge on [`reference_spec`].
pub fn reference_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        learning_rate: 0.02,
        ..TrainConfig::default()
    }
}

/// Minibatch SGD with momentum on softmax cross-entropy.
///
/// Trains weights, biases and batch-norm affine parameters (running statistics stay
/// fixed). Layers without a bias get one.
pub fn train_tiny(model: &ModelGraph, data: &Dataset, config: &TrainConfig) -> Result<ModelGraph> {
    if config.batch == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("batch must be >= 1 and learning rate > 0"));
    }
    let out = *model
        .output_shapes()?
        .last()
        .ok_or_else(|| Error::InvalidModel("empty model".into()))?;
    if out[0] * out[1] * out[2] != data.classes {
        return Err(Error::invalid(format!(
            "model output width {} != class count {}",
            out[0] * out[1] * out[2],
            data.classes
        )));
    }
    let mut trained = model.clone();
    if config.epochs == 0 {
        return Ok(trained);
    }
    for l in trained.layers.iter_mut() {
        if let (Some(w), None) = (&l.weights, &l.bias) {
            l.bias = Some(vec![0.0; w.out_channels()]);
        }
    }
    let mut velocity: Vec<Option<LayerVelocity>> = trained
        .layers
        .iter()
        .map(LayerVelocity::for_layer)
        .collect();
    let mut rng = SeededRng::stream(config.seed, 0x7a11);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch) {
            let x = data.samples.gather_batch(chunk)?;
            let objective = CrossEntropy {
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
            };
            let tape = Tape::record(&trained, &x)?;
            let grads = backward_tape(&tape, &objective, true)?;
            if !grads.loss.is_finite() {
                return Err(Error::numeric(
                    format!("epoch {epoch}"),
                    "training loss diverged",
                ));
            }
            let layers = grads.layers.expect("parameter gradients requested");
            for ((layer, g), v) in trained
                .layers
                .iter_mut()
                .zip(layers)
                .zip(velocity.iter_mut())
            {
                let (Some(g), Some(v)) = (g, v.as_mut()) else {
                    continue;
                };
                let (lr, mu) = (config.learning_rate, config.momentum);
                sgd(
                    layer.weights.as_mut().unwrap().data_mut(),
                    &g.weights,
                    &mut v.weights,
                    lr,
                    mu,
                );
                sgd(layer.bias.as_mut().unwrap(), &g.bias, &mut v.bias, lr, mu);
                if let (Some(bn), Some(dg), Some(db)) = (layer.bn.as_mut(), &g.gamma, &g.beta) {
                    sgd(&mut bn.gamma, dg, &mut v.gamma, lr, mu);
                    sgd(&mut bn.beta, db, &mut v.beta, lr, mu);
                }
            }
        }
        let probe = trained.forward(&data.samples.slice_batch(0, data.len().min(8))?, false);
        if let Err(Error::NumericFault { detail, .. }) = probe {
            return Err(Error::numeric(format!("epoch {epoch}"), detail));
        }
    }
    Ok(trained)
}

struct LayerVelocity {
    weights: Vec<f64>,
    bias: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

impl LayerVelocity {
    fn for_layer(l: &LayerSpec) -> Option<Self> {
        let w = l.weights.as_ref()?;
        let c = l.bn.as_ref().map_or(0, |b| b.channels());
        Some(LayerVelocity {
            weights: vec![0.0; w.len()],
            bias: vec![0.0; w.out_channels()],
            gamma: vec![0.0; c],
            beta: vec![0.0; c],
        })
    }
}

fn sgd(params: &mut [f32], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p = (*p as f64 - lr * *v) as f32;
    }
}

fn he_weights(shape: [usize; 4], rng: &mut SeededRng) -> WeightTensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| (rng.normal() * std) as f32)
        .collect();
    WeightTensor::new(shape, data).expect("shape and length agree")
}

/// The reference CNN: `3×8×8 → conv 8 (k3) → conv 16 (k3, s2) → GAP → FC K`, ReLU
/// after both convolutions, He-initialized.
pub fn reference_cnn(classes: usize, seed: u64) -> ModelGraph {
    let mut rng = SeededRng::stream(seed, 0xc0de);
    ModelGraph::new(
        "reference-cnn",
        [3, 8, 8],
        vec![
            LayerSpec::conv(0, he_weights([8, 3, 3, 3], &mut rng), 1, 1)
                .with_bias(vec![0.0; 8])
                .with_activation(Activation::Relu),
            LayerSpec::conv(1, he_weights([16, 8, 3, 3], &mut rng), 2, 1)
                .with_bias(vec![0.0; 16])
                .with_activation(Activation::Relu),
            LayerSpec::global_avg_pool(2),
            LayerSpec::fully_connected(3, he_weights([classes, 16, 1, 1], &mut rng))
                .with_bias(vec![0.0; classes]),
        ],
    )
}

/// A flatten + fully-connected linear classifier.
pub fn linear_probe(input_shape: [usize; 3], classes: usize) -> ModelGraph {
    let f = input_shape.iter().product();
    ModelGraph::new(
        "linear-probe",
        input_shape,
        vec![
            LayerSpec::flatten(0),
            LayerSpec::fully_connected(1, WeightTensor::zeros([classes, f, 1, 1]))
                .with_bias(vec![0.0; classes]),
        ],
    )
}

/// Re-parameterization used to give a trained BN-free model live batch-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnVariant {
    /// Multiplier `a` applied to each conv's weights and bias.
    pub scale: f64,
    /// Offset added to the conv output, in units of `a·σ` of that channel.
    pub shift: f64,
}

impl Default for BnVariant {
    fn default() -> Self {
        BnVariant {
            scale: 0.5,
            shift: -2.0,
        }
    }
}

/// Inserts batch-norm after every activated conv-like layer without changing the
/// function: with pre-activation statistics `(μ, σ)` measured on `data`, the conv
/// becomes `a·z + a·shift·σ` and BN gets running statistics `(a·μ + a·shift·σ, a·σ)`,
/// `γ = σ`, `β = μ`, `ε = 0`.
pub fn bn_variant(model: &ModelGraph, data: &Tensor, variant: BnVariant) -> Result<ModelGraph> {
    if model.has_bn() {
        return Err(Error::InvalidModel(
            "model already carries batch-norm".into(),
        ));
    }
    if !(variant.scale > 0.0) || !variant.shift.is_finite() {
        return Err(Error::invalid(
            "bn variant scale must be > 0 and shift finite",
        ));
    }
    let mut out = model.clone();
    for idx in 0..model.layers.len() {
        let layer = &model.layers[idx];
        if !layer.kind.is_conv_like() || layer.activation == Activation::None {
            continue;
        }
        let mut probe = model.truncated(idx + 1);
        probe.layers[idx].activation = Activation::None;
        let (pre, _) = probe.forward(data, false)?;
        let stats = activation_channel_stats(&pre)?;
        let a = variant.scale;
        let l = &mut out.layers[idx];
        let c = stats.len();
        let shift: Vec<f64> = stats
            .std
            .iter()
            .map(|s| a * variant.shift * s.max(1e-3))
            .collect();
        for w in l.weights.as_mut().unwrap().data_mut() {
            *w = (*w as f64 * a) as f32;
        }
        let bias = l.bias.get_or_insert_with(|| vec![0.0; c]);
        for (b, sh) in bias.iter_mut().zip(&shift) {
            *b = (*b as f64 * a + sh) as f32;
        }
        l.bn = Some(BnParams {
            gamma: stats.std.iter().map(|&s| s.max(1e-3) as f32).collect(),
            beta: stats.mean.iter().map(|&m| m as f32).collect(),
            running_mean: stats
                .mean
                .iter()
                .zip(&shift)
                .map(|(m, sh)| (a * m + sh) as f32)
                .collect(),
            running_std: stats
                .std
                .iter()
                .map(|&s| (a * s.max(1e-3)) as f32)
                .collect(),
            epsilon: 0.0,
        });
    }
    out.name = format!("{}-bn", model.name);
    Ok(out)
}

/// Options for [`random_model`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomModelOptions {
    pub max_layers: usize,
    pub allow_bn: bool,
    pub allow_residual: bool,
}

impl Default for RandomModelOptions {
    fn default() -> Self {
        RandomModelOptions {
            max_layers: 5,
            allow_bn: true,
            allow_residual: true,
        }
    }
}

fn random_activation(rng: &mut SeededRng) -> Activation {
    match rng.below(3) {
        0 => Activation::None,
        1 => Activation::Relu,
        _ => Activation::Relu6,
    }
}

fn random_bn(c: usize, rng: &mut SeededRng) -> BnParams {
    BnParams {
        gamma: (0..c)
            .map(|_| (0.5 + rng.uniform()) as f32 * if rng.below(5) == 0 { -1.0 } else { 1.0 })
            .collect(),
        beta: (0..c).map(|_| (rng.normal() * 0.5) as f32).collect(),
        running_mean: (0..c).map(|_| (rng.normal() * 0.5) as f32).collect(),
        running_std: (0..c).map(|_| (0.3 + rng.uniform() * 1.5) as f32).collect(),
        epsilon: 1e-5,
    }
}

/// A small random model of 1 to `max_layers` layers mixing conv, depthwise, residual
/// and pooling layers with ReLU/ReLU6/linear activations and optional batch-norm.
pub fn random_model(seed: u64, opts: RandomModelOptions) -> ModelGraph {
    let mut rng = SeededRng::stream(seed, 0x6a9d);
    let c0 = 1 + rng.below(3);
    let hw = 3 + rng.below(4);
    let n_layers = 1 + rng.below(opts.max_layers.max(1));
    let mut layers: Vec<LayerSpec> = Vec::new();
    let mut shapes: Vec<[usize; 3]> = Vec::new();
    let mut cur = [c0, hw, hw];
    for id in 0..n_layers {
        let remaining = n_layers - id;
        let candidates: Vec<usize> = shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == cur)
            .map(|(i, _)| i)
            .collect();
        let roll = rng.below(10);
        let layer = if opts.allow_residual && roll < 2 && !candidates.is_empty() {
            let src = candidates[rng.below(candidates.len())];
            LayerSpec::add(id, layers[src].id).with_activation(random_activation(&mut rng))
        } else if roll < 4 && cur[1] >= 1 {
            let k = if rng.below(2) == 0 { 3 } else { 1 };
            let w = he_weights([cur[0], 1, k, k], &mut rng);
            let mut l =
                LayerSpec::depthwise(id, w, 1, k / 2).with_activation(random_activation(&mut rng));
            if rng.below(2) == 0 {
                l = l.with_bias((0..cur[0]).map(|_| (rng.normal() * 0.2) as f32).collect());
            }
            if opts.allow_bn && rng.below(2) == 0 {
                l = l.with_bn(random_bn(cur[0], &mut rng));
            }
            l
        } else if remaining == 1 && cur[1] > 1 && rng.below(3) == 0 {
            LayerSpec::global_avg_pool(id)
        } else {
            let k = if rng.below(3) == 0 { 1 } else { 3 };
            let stride = if cur[1] >= 4 && rng.below(3) == 0 {
                2
            } else {
                1
            };
            let out_c = 1 + rng.below(6);
            let w = he_weights([out_c, cur[0], k, k], &mut rng);
            let mut l =
                LayerSpec::conv(id, w, stride, k / 2).with_activation(random_activation(&mut rng));
            if rng.below(2) == 0 {
                l = l.with_bias((0..out_c).map(|_| (rng.normal() * 0.2) as f32).collect());
            }
            if opts.allow_bn && rng.below(2) == 0 {
                l = l.with_bn(random_bn(out_c, &mut rng));
            }
            l
        };
        cur = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                let k = layer.weights.as_ref().unwrap().shape()[2];
                let o = (cur[1] + 2 * layer.padding - k) / layer.stride + 1;
                [layer.weights.as_ref().unwrap().out_channels(), o, o]
            }
            LayerKind::GlobalAvgPool => [cur[0], 1, 1],
            _ => cur,
        };
        shapes.push(cur);
        layers.push(layer);
    }
    ModelGraph::new(format!("random-{seed}"), [c0, hw, hw], layers)
}

/// Weight std of [`distill_fixture`].
pub const DISTILL_FIXTURE_STD: f64 = 1e-3;

/// The 4-layer distillation fixture: linear `3→8→8→8→8` 3×3 convolutions on a
/// `3×16×16` input with `N(0, 0.001²)` weights and no bias.
pub fn distill_fixture(seed: u64) -> ModelGraph {
    let mut rng = SeededRng::stream(seed, 0xd157);
    let widths = [3, 8, 8, 8, 8];
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(id, io)| {
            let shape = [io[1], io[0], 3, 3];
            let data = (0..shape.iter().product::<usize>())
                .map(|_| (rng.normal() * DISTILL_FIXTURE_STD) as f32)
                .collect();
            LayerSpec::conv(
                id,
                WeightTensor::new(shape, data).expect("fixture shape"),
                1,
                1,
            )
        })
        .collect();
    ModelGraph::new("distill-fixture", [3, 16, 16], layers)
}

/// Dataset used for the reference experiments: 4-class blobs, 1000 samples per class.
pub fn reference_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_per_class: 1000,
        seed,
        ..DatasetSpec::default()
    }
}

/// Relative-error bound used by [`grad_audit`].
pub const GRAD_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub objective: String,
    pub max_rel_error: f64,
}

/// Central-difference audit of input gradients for a random projection of the output
/// and for the z-score distillation objective.
pub fn grad_audit(model: &ModelGraph, seed: u64) -> Result<Vec<GradCheck>> {
    let [c, h, w] = model.input_shape;
    let mut rng = SeededRng::stream(seed, 0x9ad);
    let x = gaussian_tensor([2, c, h, w], 0.0, 1.0, &mut rng)?;
    let out_len = model.forward(&x, false)?.0.len();
    let mut checks = Vec::new();
    let dot = OutputDot::random(out_len, &mut rng);
    checks.push(GradCheck {
        objective: dot.name(),
        max_rel_error: finite_diff_check(model, &x, &dot, 1e-5, seed)?,
    });
    let subs = estimate_substitutes(model, &PolicyMap::default(), false)?;
    let objective = DistillObjective::substitutes(model, &subs, LossKind::Zscore, 1e-6)?;
    checks.push(GradCheck {
        objective: "distill-zscore".into(),
        max_rel_error: finite_diff_check(model, &x, &objective, 1e-5, seed)?,
    });
    Ok(checks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibMethod {
    UnitGaussian,
    GzsqDistilled,
    ZeroqBnBaseline,
    RealTrainSubset,
}

impl CalibMethod {
    pub const ALL: [CalibMethod; 4] = [
        CalibMethod::UnitGaussian,
        CalibMethod::GzsqDistilled,
        CalibMethod::ZeroqBnBaseline,
        CalibMethod::RealTrainSubset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CalibMethod::UnitGaussian => "unit-gaussian",
            CalibMethod::GzsqDistilled => "gzsq-distilled",
            CalibMethod::ZeroqBnBaseline => "zeroq-bn-baseline",
            CalibMethod::RealTrainSubset => "real-train-subset",
        }
    }

    fn distills(self) -> bool {
        matches!(
            self,
            CalibMethod::GzsqDistilled | CalibMethod::ZeroqBnBaseline
        )
    }
}

/// When batch-norm is folded relative to distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldTiming {
    Before,
    After,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub weight_bits: u8,
    pub weight_granularity: Granularity,
    pub weight_symmetry: Symmetry,
    pub act_bits: u8,
    pub act_symmetry: Symmetry,
    pub observer: ObserverKind,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig::w_a(8, 8)
    }
}

impl QuantConfig {
    /// Per-channel symmetric weights, per-tensor affine min-max activations.
    pub fn w_a(weight_bits: u8, act_bits: u8) -> Self {
        QuantConfig {
            weight_bits,
            weight_granularity: Granularity::PerChannel,
            weight_symmetry: Symmetry::Symmetric,
            act_bits,
            act_symmetry: Symmetry::Affine,
            observer: ObserverKind::MinMax,
        }
    }

    pub fn label(&self) -> String {
        format!("W{}A{}", self.weight_bits, self.act_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub methods: Vec<CalibMethod>,
    pub configs: Vec<QuantConfig>,
    pub runs: usize,
    pub seed: u64,
    /// Calibration batch size for every method.
    pub calib_batch: usize,
    pub distill: DistillConfig,
    #[serde(default)]
    pub policy: PolicyMap,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            methods: CalibMethod::ALL.to_vec(),
            configs: vec![QuantConfig::w_a(8, 8)],
            runs: 10,
            seed: 0,
            calib_batch: 8,
            distill: DistillConfig {
                iterations: 200,
                learning_rate: 0.05,
                ..DistillConfig::default()
            },
            policy: PolicyMap::default(),
        }
    }
}

/// Activation range of one tensor implied by its quantization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub layer: Option<usize>,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: CalibMethod,
    pub fold: Option<FoldTiming>,
    pub config: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Activation ranges of the first run.
    pub ranges: Vec<LayerRange>,
    /// Initial and final distillation loss of the first run.
    pub distill_loss: Option<(f64, f64)>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub format: String,
    pub model: String,
    pub fp32_accuracy: f64,
    pub seed: u64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub cells: Vec<Cell>,
}

impl ComparisonReport {
    pub fn cell(
        &self,
        method: CalibMethod,
        fold: Option<FoldTiming>,
        config: &str,
    ) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.fold == fold && c.config == config)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "model {}  runs {}  seed {}",
            self.model, self.runs, self.seed
        );
        let _ = writeln!(
            out,
            "{:<20} {:<7} {:<7} {:>9} {:>8}",
            "method", "fold", "config", "mean", "std"
        );
        let _ = writeln!(
            out,
            "{:<20} {:<7} {:<7} {:>9.4} {:>8.4}",
            "fp32", "-", "-", self.fp32_accuracy, 0.0
        );
        for c in &self.cells {
            let fold = match c.fold {
                Some(FoldTiming::Before) => "before",
                Some(FoldTiming::After) => "after",
                None => "-",
            };
            match &c.skipped {
                Some(reason) => {
                    let _ = writeln!(
                        out,
                        "{:<20} {:<7} {:<7} skipped: {reason}",
                        c.method.name(),
                        fold,
                        c.config
                    );
                }
                None => {
                    let _ = writeln!(
                        out,
                        "{:<20} {:<7} {:<7} {:>9.4} {:>8.4}",
                        c.method.name(),
                        fold,
                        c.config,
                        c.mean,
                        c.std
                    );
                }
            }
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn ranges_of(act: &ActivationParams) -> Vec<LayerRange> {
    let to_range = |layer: Option<usize>, p: &crate::quant::QuantParams| {
        let (lo, hi) = p.q_range();
        LayerRange {
            layer,
            min: (lo - p.zero_point[0]) / p.scale[0],
            max: (hi - p.zero_point[0]) / p.scale[0],
        }
    };
    let mut out = Vec::new();
    if let Some(p) = &act.input {
        out.push(to_range(None, p));
    }
    for (id, p) in &act.layers {
        if let Some(p) = p {
            out.push(to_range(Some(*id), p));
        }
    }
    out
}

/// One calibration batch for `(method, fold, run)`; `Err` carries a skip reason.
struct CalibJob {
    method: CalibMethod,
    fold: Option<FoldTiming>,
    run: usize,
}

struct CalibOutcome {
    data: std::result::Result<(Tensor, Option<(f64, f64)>), String>,
}

fn run_seed(seed: u64, run: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(run as u64)
}

fn calibration_batch(
    job: &CalibJob,
    model: &ModelGraph,
    folded: &ModelGraph,
    train: Option<&Dataset>,
    cfg: &CompareConfig,
) -> Result<CalibOutcome> {
    let seed = run_seed(cfg.seed, job.run);
    let [c, h, w] = model.input_shape;
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = seed;
    dcfg.batch = cfg.calib_batch;
    let skip = |reason: &str| {
        Ok(CalibOutcome {
            data: Err(reason.to_string()),
        })
    };
    let distilled = |d: crate::distill::DistilledData| {
        let losses = (d.initial_loss(), d.final_loss());
        Ok(CalibOutcome {
            data: Ok((d.data, Some(losses))),
        })
    };
    match job.method {
        CalibMethod::UnitGaussian => {
            let t = gaussian_tensor(
                [cfg.calib_batch, c, h, w],
                0.0,
                1.0,
                &mut SeededRng::stream(seed, 1),
            )?;
            Ok(CalibOutcome {
                data: Ok((t, None)),
            })
        }
        CalibMethod::RealTrainSubset => {
            let Some(train) = train else {
                return skip("real-train-subset needs the train split");
            };
            let mut idx: Vec<usize> = (0..train.len()).collect();
            SeededRng::stream(seed, 2).shuffle(&mut idx);
            idx.truncate(cfg.calib_batch.min(train.len()));
            Ok(CalibOutcome {
                data: Ok((train.samples.gather_batch(&idx)?, None)),
            })
        }
        CalibMethod::GzsqDistilled => {
            let (target, folded_before) = match job.fold {
                Some(FoldTiming::After) => (model, false),
                _ => (folded, true),
            };
            let subs = estimate_substitutes(target, &cfg.policy, folded_before)?;
            distilled(distill(target, &subs, &dcfg)?)
        }
        CalibMethod::ZeroqBnBaseline => {
            if !model.has_bn() {
                return skip("zeroq-bn-baseline needs live batch-norm");
            }
            let target = match job.fold {
                Some(FoldTiming::Before) => folded,
                _ => model,
            };
            let objective = DistillObjective::bn_statistics(target, model, dcfg.guard)?;
            dcfg.loss = LossKind::L2;
            distilled(distill_with(target, &objective, &dcfg)?)
        }
    }
}

/// Evaluates every `(method, fold timing, quant config)` cell over `runs` seeds.
///
/// Distilling methods get a before/after fold axis on BN-bearing models. Calibration
/// batches are produced in parallel; assembly order follows the configured lists.
pub fn compare_calibrations(
    model: &ModelGraph,
    train: Option<&Dataset>,
    test: &Dataset,
    cfg: &CompareConfig,
) -> Result<ComparisonReport> {
    if cfg.runs == 0 || cfg.calib_batch == 0 {
        return Err(Error::invalid("runs and calib_batch must be >= 1"));
    }
    if cfg.configs.is_empty() || cfg.methods.is_empty() {
        return Err(Error::invalid(
            "comparison needs at least one method and one config",
        ));
    }
    let fp32_accuracy = eval_accuracy(model, test)?;
    let folded = fold_bn(model)?.0;
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        let folds: Vec<Option<FoldTiming>> = if method.distills() && model.has_bn() {
            vec![Some(FoldTiming::Before), Some(FoldTiming::After)]
        } else {
            vec![None]
        };
        for fold in folds {
            for run in 0..cfg.runs {
                jobs.push(CalibJob { method, fold, run });
            }
        }
    }

    type JobResult = (
        Vec<std::result::Result<f64, String>>,
        Vec<LayerRange>,
        Option<(f64, f64)>,
    );
    let results: Vec<Result<JobResult>> = jobs
        .par_iter()
        .map(|job| -> Result<JobResult> {
            let outcome = calibration_batch(job, model, &folded, train, cfg)?;
            let (batch, losses) = match outcome.data {
                Ok(v) => v,
                Err(reason) => return Ok((vec![Err(reason); cfg.configs.len()], Vec::new(), None)),
            };
            let mut accs = Vec::with_capacity(cfg.configs.len());
            let mut ranges = Vec::new();
            for (k, qc) in cfg.configs.iter().enumerate() {
                let act = calibrate_activations(
                    &folded,
                    std::slice::from_ref(&batch),
                    qc.observer,
                    qc.act_bits,
                    qc.act_symmetry,
                )?;
                if k == 0 {
                    ranges = ranges_of(&act);
                }
                let qm = quantize_model(
                    &folded,
                    &act,
                    qc.weight_bits,
                    qc.weight_granularity,
                    qc.weight_symmetry,
                )?;
                accs.push(Ok(eval_accuracy(&qm, test)?));
            }
            Ok((accs, ranges, losses))
        })
        .collect();
    let results: Vec<JobResult> = results.into_iter().collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut i = 0;
    while i < jobs.len() {
        let (method, fold) = (jobs[i].method, jobs[i].fold);
        let group = &results[i..i + cfg.runs];
        for (k, qc) in cfg.configs.iter().enumerate() {
            let skipped = group[0].0[k].clone().err();
            let accuracies: Vec<f64> = group.iter().filter_map(|r| r.0[k].clone().ok()).collect();
            let (mean, std) = mean_std(&accuracies);
            cells.push(Cell {
                method,
                fold,
                config: qc.label(),
                accuracies,
                mean,
                std,
                ranges: group[0].1.clone(),
                distill_loss: group[0].2,
                skipped,
            });
        }
        i += cfg.runs;
    }
    Ok(ComparisonReport {
        format: REPORT_FORMAT.to_string(),
        model: model.name.clone(),
        fp32_accuracy,
        seed: cfg.seed,
        runs: cfg.runs,
        seeds: (0..cfg.runs).map(|r| run_seed(cfg.seed, r)).collect(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let spec = DatasetSpec {
            classes: 2,
            ..DatasetSpec::default()
        };
        let a = gen_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 100);
        assert_eq!(a, gen_dataset(&spec, Split::Train).unwrap());
        assert_ne!(a.samples, gen_dataset(&spec, Split::Test).unwrap().samples);
    }

    #[test]
    fn rejects_bad_specs() {
        let one = DatasetSpec {
            classes: 1,
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&one, Split::Train).is_err());
        let flat = DatasetSpec {
            shape: [3, 0, 8],
            ..DatasetSpec::default()
        };
        assert!(gen_dataset(&flat, Split::Train).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = Tensor::new([2, 3, 1, 1], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let spec = DatasetSpec {
            n_per_class: 4,
            ..DatasetSpec::default()
        };
        let d = gen_dataset(&spec, Split::Train).unwrap();
        let m = reference_cnn(4, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert_eq!(train_tiny(&m, &d, &cfg).unwrap(), m);
    }

    #[test]
    fn random_models_validate() {
        for seed in 0..200 {
            let m = random_model(seed, RandomModelOptions::default());
            m.output_shapes()
                .unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }
}
