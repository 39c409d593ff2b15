//! Fixed-point quantization parameters, range observers and fake-quantized inference.
//!
//! The scale is multiplicative: `q = clamp(round(x·Δ + z), q_min, q_max)` and
//! `x̂ = (q − z)/Δ`. Affine parameters map `[min, max]` onto `[0, 2^b − 1]` with
//! `Δ = (2^b − 1)/(max − min)` and `z = round(−Δ·min)`. Symmetric parameters use
//! `[−(2^(b−1) − 1), 2^(b−1) − 1]` with `z = 0`. Rounding is half away from zero.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::folding::fold_bn;
use crate::format::{ensure_dir, read_byte_blob, read_json, write_i8_blob, write_json};
use crate::graph::{load_model, save_model, ModelGraph};
use crate::tensor::{Tensor, WeightTensor};

pub const QPARAMS_FORMAT: &str = "gzsq-qparams/1";
pub const ACT_QPARAMS_FORMAT: &str = "gzsq-act-qparams/1";
pub const ROUNDING: &str = "half-away-from-zero";
/// Bit width meaning "leave in floating point".
pub const FLOAT_BITS: u8 = 32;
pub const DEFAULT_HISTOGRAM_BINS: usize = 2048;
/// Candidate range endpoints per side considered by the histogram observer.
const HISTOGRAM_CANDIDATES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One parameter pair per output channel.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetry {
    Symmetric,
    Affine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f64>,
    pub zero_point: Vec<f64>,
    pub bits: u8,
    pub granularity: Granularity,
    pub symmetry: Symmetry,
}

fn check_bits(bits: u8) -> Result<()> {
    if (2..=8).contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid(format!("bit width {bits} outside 2..=8")))
    }
}

/// `(Δ, z)` for one range.
fn scale_zero(min: f64, max: f64, bits: u8, symmetry: Symmetry) -> Result<(f64, f64)> {
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::invalid(format!("non-finite range [{min}, {max}]")));
    }
    if max < min {
        return Err(Error::invalid(format!("range max {max} < min {min}")));
    }
    let (min, max) = if max == min {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    };
    Ok(match symmetry {
        Symmetry::Affine => {
            let n = ((1u32 << bits) - 1) as f64;
            let scale = n / (max - min);
            (scale, (-scale * min).round())
        }
        Symmetry::Symmetric => {
            let half = ((1u32 << (bits - 1)) - 1) as f64;
            let mut mag = min.abs().max(max.abs());
            if mag == 0.0 {
                mag = 0.5;
            }
            (half / mag, 0.0)
        }
    })
}

/// Parameters for a single `[range_min, range_max]`.
pub fn compute_qparams(
    range_min: f64,
    range_max: f64,
    bits: u8,
    granularity: Granularity,
    symmetry: Symmetry,
) -> Result<QuantParams> {
    check_bits(bits)?;
    let (s, z) = scale_zero(range_min, range_max, bits, symmetry)?;
    Ok(QuantParams {
        scale: vec![s],
        zero_point: vec![z],
        bits,
        granularity,
        symmetry,
    })
}

impl QuantParams {
    /// One parameter pair per `(min, max)` range.
    pub fn per_channel(ranges: &[(f64, f64)], bits: u8, symmetry: Symmetry) -> Result<Self> {
        check_bits(bits)?;
        let mut scale = Vec::with_capacity(ranges.len());
        let mut zero_point = Vec::with_capacity(ranges.len());
        for &(lo, hi) in ranges {
            let (s, z) = scale_zero(lo, hi, bits, symmetry)?;
            scale.push(s);
            zero_point.push(z);
        }
        Ok(QuantParams {
            scale,
            zero_point,
            bits,
            granularity: Granularity::PerChannel,
            symmetry,
        })
    }

    pub fn q_range(&self) -> (f64, f64) {
        match self.symmetry {
            Symmetry::Affine => (0.0, ((1u32 << self.bits) - 1) as f64),
            Symmetry::Symmetric => {
                let h = ((1u32 << (self.bits - 1)) - 1) as f64;
                (-h, h)
            }
        }
    }

    /// Quantization step of channel `k` in real units.
    pub fn step(&self, k: usize) -> f64 {
        1.0 / self.scale[self.slot(k)]
    }

    #[inline]
    fn slot(&self, channel: usize) -> usize {
        match self.granularity {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => channel,
        }
    }

    #[inline]
    fn quantize_one(&self, x: f32, channel: usize) -> i32 {
        let k = self.slot(channel);
        let (lo, hi) = self.q_range();
        (x as f64 * self.scale[k] + self.zero_point[k])
            .round()
            .clamp(lo, hi) as i32
    }

    #[inline]
    fn dequantize_one(&self, q: i32, channel: usize) -> f32 {
        let k = self.slot(channel);
        ((q as f64 - self.zero_point[k]) / self.scale[k]) as f32
    }

    /// Checks everything except the channel count, which is only known at use.
    fn validate_any_width(&self) -> Result<()> {
        match self.granularity {
            Granularity::PerTensor => self.validate(1),
            Granularity::PerChannel => self.validate(self.scale.len()),
        }
    }

    fn validate(&self, channels: usize) -> Result<()> {
        check_bits(self.bits)?;
        let want = match self.granularity {
            Granularity::PerTensor => 1,
            Granularity::PerChannel => channels,
        };
        if self.scale.len() != want || self.zero_point.len() != want {
            return Err(Error::invalid(format!(
                "quant params carry {} scales for {want} slots",
                self.scale.len()
            )));
        }
        if self.scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("quant scale must be positive and finite"));
        }
        if self.symmetry == Symmetry::Symmetric && self.zero_point.iter().any(|&z| z != 0.0) {
            return Err(Error::invalid("symmetric params need zero_point 0"));
        }
        Ok(())
    }
}

fn channel_of_activation(t: &Tensor) -> impl Fn(usize) -> usize {
    let [_, c, h, w] = t.shape();
    let plane = h * w;
    move |i| (i / plane) % c
}

/// Integer codes of an activation tensor; per-channel params index axis 1.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<Vec<i32>> {
    p.validate(x.channels())?;
    let ch = channel_of_activation(x);
    Ok(x.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.quantize_one(v, ch(i)))
        .collect())
}

pub fn dequantize(q: &[i32], shape: [usize; 4], p: &QuantParams) -> Result<Tensor> {
    p.validate(shape[1])?;
    let plane = shape[2] * shape[3];
    let c = shape[1];
    let data = q
        .iter()
        .enumerate()
        .map(|(i, &v)| p.dequantize_one(v, (i / plane) % c))
        .collect();
    Tensor::new(shape, data)
}

pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let q = quantize(x, p)?;
    dequantize(&q, x.shape(), p)
}

/// Integer codes of weights; per-channel params index the output channel.
pub fn quantize_weights(w: &WeightTensor, p: &QuantParams) -> Result<Vec<i32>> {
    p.validate(w.out_channels())?;
    let f = w.fan_in();
    Ok(w.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| p.quantize_one(v, i / f))
        .collect())
}

pub fn dequantize_weights(q: &[i32], shape: [usize; 4], p: &QuantParams) -> Result<WeightTensor> {
    p.validate(shape[0])?;
    let f = shape[1] * shape[2] * shape[3];
    WeightTensor::new(
        shape,
        q.iter()
            .enumerate()
            .map(|(i, &v)| p.dequantize_one(v, i / f))
            .collect(),
    )
}

pub fn fake_quantize_weights(w: &WeightTensor, p: &QuantParams) -> Result<WeightTensor> {
    dequantize_weights(&quantize_weights(w, p)?, w.shape(), p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverKind {
    MinMax,
    PerChannelMinMax,
    Histogram { bins: usize },
}

impl ObserverKind {
    pub fn histogram() -> Self {
        ObserverKind::Histogram {
            bins: DEFAULT_HISTOGRAM_BINS,
        }
    }
}

/// Fixed-bin histogram over a range that grows with the data.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        Histogram {
            lo: 0.0,
            hi: 0.0,
            counts: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + self.width() * i as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + self.width() * (i as f64 + 0.5)
    }

    fn bin_of(&self, x: f64) -> usize {
        if self.hi == self.lo {
            return 0;
        }
        let b = ((x - self.lo) / self.width()).floor();
        (b.max(0.0) as usize).min(self.bins() - 1)
    }

    fn observe(&mut self, values: &[f32]) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in values {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        if values.is_empty() {
            return;
        }
        if self.total() == 0 {
            self.lo = lo;
            self.hi = hi;
        } else if lo < self.lo || hi > self.hi {
            // Re-bin existing mass by bin centre into the widened range.
            let old = std::mem::replace(self, Histogram::new(self.bins()));
            self.lo = lo.min(old.lo);
            self.hi = hi.max(old.hi);
            for (i, &c) in old.counts.iter().enumerate() {
                if c > 0 {
                    let b = self.bin_of(old.center(i));
                    self.counts[b] += c;
                }
            }
        }
        for &v in values {
            let b = self.bin_of(v as f64);
            self.counts[b] += 1;
        }
    }

    /// Candidate endpoint bin indices: every `stride`-th edge plus the last one.
    pub fn candidate_edges(&self) -> Vec<usize> {
        let b = self.bins();
        let stride = (b / HISTOGRAM_CANDIDATES).max(1);
        let mut out: Vec<usize> = (0..=b).step_by(stride).collect();
        if *out.last().unwrap() != b {
            out.push(b);
        }
        out
    }

    /// Expected squared error of quantizing the histogram mass onto `levels` steps over
    /// `[edge(i), edge(j)]`. Mass outside is clipped to the nearest endpoint (bin centre
    /// as representative); mass inside pays the uniform rounding error `step²/12`.
    pub fn range_error(&self, i: usize, j: usize, levels: f64) -> f64 {
        let (a, b) = (self.edge(i), self.edge(j));
        let step = (b - a) / levels;
        let mut err = 0.0;
        for (k, &c) in self.counts.iter().enumerate() {
            let c = c as f64;
            if k < i {
                err += c * (self.center(k) - a).powi(2);
            } else if k >= j {
                err += c * (self.center(k) - b).powi(2);
            } else {
                err += c * step * step / 12.0;
            }
        }
        err
    }

    /// Range minimizing [`Histogram::range_error`] over candidate edges (prefix sums;
    /// first minimum in scan order wins).
    pub fn best_range(&self, levels: f64) -> (f64, f64) {
        if self.hi == self.lo {
            return (self.lo, self.hi);
        }
        let n = self.bins();
        let mut c0 = vec![0.0; n + 1];
        let mut c1 = vec![0.0; n + 1];
        let mut c2 = vec![0.0; n + 1];
        for k in 0..n {
            let c = self.counts[k] as f64;
            let x = self.center(k);
            c0[k + 1] = c0[k] + c;
            c1[k + 1] = c1[k] + c * x;
            c2[k + 1] = c2[k] + c * x * x;
        }
        // Σ_{k in [p, q)} c_k (x_k − e)²
        let sq = |p: usize, q: usize, e: f64| {
            (c2[q] - c2[p]) - 2.0 * e * (c1[q] - c1[p]) + e * e * (c0[q] - c0[p])
        };
        let cands = self.candidate_edges();
        let mut best = (f64::INFINITY, 0, n);
        for (ai, &i) in cands.iter().enumerate() {
            for &j in &cands[ai + 1..] {
                let (a, b) = (self.edge(i), self.edge(j));
                let step = (b - a) / levels;
                let err = sq(0, i, a) + sq(j, n, b) + (c0[j] - c0[i]) * step * step / 12.0;
                if err < best.0 {
                    best = (err, i, j);
                }
            }
        }
        (self.edge(best.1), self.edge(best.2))
    }
}

/// Streaming range accumulator.
#[derive(Debug, Clone, PartialEq)]
pub enum Observer {
    MinMax {
        min: f64,
        max: f64,
        seen: u64,
    },
    PerChannelMinMax {
        mins: Vec<f64>,
        maxs: Vec<f64>,
        seen: u64,
    },
    Histogram(Histogram),
}

impl Observer {
    pub fn new(kind: ObserverKind) -> Self {
        match kind {
            ObserverKind::MinMax => Observer::MinMax {
                min: f64::INFINITY,
                max: f64::NEG_INFINITY,
                seen: 0,
            },
            ObserverKind::PerChannelMinMax => Observer::PerChannelMinMax {
                mins: Vec::new(),
                maxs: Vec::new(),
                seen: 0,
            },
            ObserverKind::Histogram { bins } => Observer::Histogram(Histogram::new(bins.max(1))),
        }
    }

    pub fn observations(&self) -> u64 {
        match self {
            Observer::MinMax { seen, .. } | Observer::PerChannelMinMax { seen, .. } => *seen,
            Observer::Histogram(h) => h.total(),
        }
    }

    /// Folds `values` in; `channel_of(i)` names the channel of element `i` for the
    /// per-channel observer.
    fn observe_values(
        &mut self,
        values: &[f32],
        channels: usize,
        channel_of: impl Fn(usize) -> usize,
    ) {
        match self {
            Observer::MinMax { min, max, seen } => {
                for &v in values {
                    *min = min.min(v as f64);
                    *max = max.max(v as f64);
                }
                *seen += values.len() as u64;
            }
            Observer::PerChannelMinMax { mins, maxs, seen } => {
                if mins.is_empty() {
                    *mins = vec![f64::INFINITY; channels];
                    *maxs = vec![f64::NEG_INFINITY; channels];
                }
                for (i, &v) in values.iter().enumerate() {
                    let k = channel_of(i);
                    mins[k] = mins[k].min(v as f64);
                    maxs[k] = maxs[k].max(v as f64);
                }
                *seen += values.len() as u64;
            }
            Observer::Histogram(h) => h.observe(values),
        }
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        self.check_width(t.channels())?;
        let ch = channel_of_activation(t);
        self.observe_values(t.data(), t.channels(), ch);
        Ok(())
    }

    pub fn observe_weights(&mut self, w: &WeightTensor) -> Result<()> {
        self.check_width(w.out_channels())?;
        let f = w.fan_in();
        self.observe_values(w.data(), w.out_channels(), |i| i / f);
        Ok(())
    }

    fn check_width(&self, channels: usize) -> Result<()> {
        match self {
            Observer::PerChannelMinMax { mins, .. }
                if !mins.is_empty() && mins.len() != channels =>
            {
                Err(Error::invalid(format!(
                    "observer tracks {} channels, tensor has {channels}",
                    mins.len()
                )))
            }
            _ => Ok(()),
        }
    }

    /// Observed `(min, max)` per tracked unit.
    pub fn ranges(&self) -> Result<Vec<(f64, f64)>> {
        if self.observations() == 0 {
            return Err(Error::EmptyObserver);
        }
        Ok(match self {
            Observer::MinMax { min, max, .. } => vec![(*min, *max)],
            Observer::PerChannelMinMax { mins, maxs, .. } => {
                mins.iter().cloned().zip(maxs.iter().cloned()).collect()
            }
            Observer::Histogram(h) => vec![(h.lo, h.hi)],
        })
    }

    pub fn finalize(&self, bits: u8, symmetry: Symmetry) -> Result<QuantParams> {
        check_bits(bits)?;
        match self {
            Observer::MinMax { .. } => {
                let (lo, hi) = self.ranges()?[0];
                compute_qparams(lo, hi, bits, Granularity::PerTensor, symmetry)
            }
            Observer::PerChannelMinMax { .. } => {
                QuantParams::per_channel(&self.ranges()?, bits, symmetry)
            }
            Observer::Histogram(h) => {
                if h.total() == 0 {
                    return Err(Error::EmptyObserver);
                }
                let levels = ((1u32 << bits) - 1) as f64;
                let (lo, hi) = h.best_range(levels);
                compute_qparams(lo, hi, bits, Granularity::PerTensor, symmetry)
            }
        }
    }
}

/// Activation parameters for the model input and every layer output; `None` means
/// the tensor stays in floating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationParams {
    pub input: Option<QuantParams>,
    pub layers: Vec<(usize, Option<QuantParams>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ActivationFile {
    format: String,
    rounding: String,
    #[serde(flatten)]
    params: ActivationParams,
}

impl ActivationParams {
    /// Floating-point pass-through for every tensor.
    pub fn float(model: &ModelGraph) -> Self {
        ActivationParams {
            input: None,
            layers: model.layers.iter().map(|l| (l.id, None)).collect(),
        }
    }

    pub fn get(&self, id: usize) -> Option<&Option<QuantParams>> {
        self.layers.iter().find(|(l, _)| *l == id).map(|(_, p)| p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &ActivationFile {
                format: ACT_QPARAMS_FORMAT.to_string(),
                rounding: ROUNDING.to_string(),
                params: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ActivationFile = read_json(path)?;
        if f.format != ACT_QPARAMS_FORMAT {
            return Err(Error::UnsupportedVersion {
                found: f.format,
                expected: ACT_QPARAMS_FORMAT.to_string(),
            });
        }
        if f.rounding != ROUNDING {
            return Err(Error::parse(
                path,
                0,
                format!("unknown rounding mode {:?}", f.rounding),
            ));
        }
        let checked = f
            .params
            .input
            .iter()
            .chain(f.params.layers.iter().filter_map(|(_, p)| p.as_ref()));
        for p in checked {
            p.validate_any_width()
                .map_err(|err| Error::parse(path, 0, err.to_string()))?;
        }
        Ok(f.params)
    }
}

/// Runs the calibration batches through the model and finalizes one observer per tensor.
pub fn calibrate_activations(
    model: &ModelGraph,
    calib: &[Tensor],
    kind: ObserverKind,
    bits: u8,
    symmetry: Symmetry,
) -> Result<ActivationParams> {
    if bits == FLOAT_BITS {
        return Ok(ActivationParams::float(model));
    }
    check_bits(bits)?;
    if kind == ObserverKind::PerChannelMinMax {
        return Err(Error::invalid(
            "per-channel activation quantization is not supported",
        ));
    }
    if calib.is_empty() {
        return Err(Error::EmptyObserver);
    }
    let mut input_obs = Observer::new(kind);
    let mut layer_obs: Vec<Observer> = model.layers.iter().map(|_| Observer::new(kind)).collect();
    for batch in calib {
        input_obs.observe(batch)?;
        model.forward_with(batch, |idx, t| layer_obs[idx].observe(t))?;
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, obs) in model.layers.iter().zip(&layer_obs) {
        layers.push((l.id, Some(obs.finalize(bits, symmetry)?)));
    }
    Ok(ActivationParams {
        input: Some(input_obs.finalize(bits, symmetry)?),
        layers,
    })
}

/// Integer weight payload of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub params: QuantParams,
    pub codes: Vec<i32>,
}

/// A BN-free model with integer weights and activation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    /// Floating-point (folded) model the codes were derived from.
    pub model: ModelGraph,
    pub weights: Vec<Option<QuantizedWeights>>,
    pub activations: ActivationParams,
    /// `model` with every weight replaced by its dequantized value.
    simulated: ModelGraph,
}

impl QuantizedModel {
    fn assemble(
        model: ModelGraph,
        weights: Vec<Option<QuantizedWeights>>,
        activations: ActivationParams,
    ) -> Result<Self> {
        for l in &model.layers {
            if activations.get(l.id).is_none() {
                return Err(Error::invalid(format!(
                    "no activation params for layer {}",
                    l.id
                )));
            }
        }
        let mut simulated = model.clone();
        for (layer, q) in simulated.layers.iter_mut().zip(&weights) {
            if let (Some(q), Some(w)) = (q, layer.weights.as_mut()) {
                *w = dequantize_weights(&q.codes, w.shape(), &q.params)?;
            }
        }
        Ok(QuantizedModel {
            model,
            weights,
            activations,
            simulated,
        })
    }

    /// The model with dequantized weights.
    pub fn simulated_model(&self) -> &ModelGraph {
        &self.simulated
    }
}

/// Quantizes weights (folding any batch-norm first) and attaches activation params.
/// `weight_bits == 32` keeps weights in floating point.
pub fn quantize_model(
    model: &ModelGraph,
    act: &ActivationParams,
    weight_bits: u8,
    granularity: Granularity,
    symmetry: Symmetry,
) -> Result<QuantizedModel> {
    let folded = if model.has_bn() {
        fold_bn(model)?.0
    } else {
        model.clone()
    };
    let mut weights = Vec::with_capacity(folded.layers.len());
    for l in &folded.layers {
        let q = match (&l.weights, weight_bits) {
            (Some(w), b) if b != FLOAT_BITS => {
                let kind = match granularity {
                    Granularity::PerTensor => ObserverKind::MinMax,
                    Granularity::PerChannel => ObserverKind::PerChannelMinMax,
                };
                let mut obs = Observer::new(kind);
                obs.observe_weights(w)?;
                let params = obs.finalize(b, symmetry)?;
                let codes = quantize_weights(w, &params)?;
                Some(QuantizedWeights { params, codes })
            }
            _ => None,
        };
        weights.push(q);
    }
    QuantizedModel::assemble(folded, weights, act.clone())
}

/// Simulated integer inference: dequantized weights, fake-quantized input and layer outputs.
pub fn quantized_forward(qm: &QuantizedModel, input: &Tensor) -> Result<Tensor> {
    let x = match &qm.activations.input {
        Some(p) => fake_quantize(input, p)?,
        None => input.clone(),
    };
    let model = &qm.simulated;
    model.forward_with(&x, |idx, t| {
        let id = model.layers[idx].id;
        if let Some(Some(p)) = qm.activations.get(id) {
            *t = fake_quantize(t, p)?;
        }
        Ok(())
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct QModelFile {
    format: String,
    rounding: String,
    input: Option<QuantParams>,
    layers: Vec<QLayerEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QLayerEntry {
    layer: usize,
    activation: Option<QuantParams>,
    weight: Option<QWeightEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QWeightEntry {
    #[serde(flatten)]
    params: QuantParams,
    blob: String,
}

/// Writes the graph format (folded float model) plus `qparams.json` and 8-bit code blobs.
pub fn save_quantized(qm: &QuantizedModel, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    save_model(&qm.model, dir)?;
    let mut layers = Vec::new();
    for (l, q) in qm.model.layers.iter().zip(&qm.weights) {
        let weight = match q {
            Some(q) => {
                let blob = format!("layer{}.qweight.bin", l.id);
                let bytes: Vec<i8> = q.codes.iter().map(|&c| c as u8 as i8).collect();
                write_i8_blob(&dir.join(&blob), &bytes)?;
                Some(QWeightEntry {
                    params: q.params.clone(),
                    blob,
                })
            }
            None => None,
        };
        layers.push(QLayerEntry {
            layer: l.id,
            activation: qm.activations.get(l.id).cloned().flatten(),
            weight,
        });
    }
    write_json(
        &dir.join("qparams.json"),
        &QModelFile {
            format: QPARAMS_FORMAT.to_string(),
            rounding: ROUNDING.to_string(),
            input: qm.activations.input.clone(),
            layers,
        },
    )
}

pub fn load_quantized(dir: &Path) -> Result<QuantizedModel> {
    let model = load_model(dir)?;
    let qpath = dir.join("qparams.json");
    let file: QModelFile = read_json(&qpath)?;
    if file.format != QPARAMS_FORMAT {
        return Err(Error::UnsupportedVersion {
            found: file.format,
            expected: QPARAMS_FORMAT.to_string(),
        });
    }
    if file.rounding != ROUNDING {
        return Err(Error::parse(
            &qpath,
            0,
            format!("unknown rounding mode {:?}", file.rounding),
        ));
    }
    if file.layers.len() != model.layers.len() {
        return Err(Error::parse(&qpath, 0, "layer count differs from manifest"));
    }
    let mut weights = Vec::new();
    let mut act_layers = Vec::new();
    for (l, e) in model.layers.iter().zip(file.layers) {
        if e.layer != l.id {
            return Err(Error::parse(
                &qpath,
                0,
                format!("layer {} out of order", e.layer),
            ));
        }
        let q = match (e.weight, &l.weights) {
            (Some(we), Some(w)) => {
                let bytes = read_byte_blob(&dir.join(&we.blob), w.len())?;
                let codes: Vec<i32> = match we.params.symmetry {
                    Symmetry::Symmetric => bytes.iter().map(|&b| b as i8 as i32).collect(),
                    Symmetry::Affine => bytes.iter().map(|&b| b as i32).collect(),
                };
                we.params
                    .validate(w.out_channels())
                    .map_err(|err| Error::parse(&qpath, 0, format!("layer {}: {err}", l.id)))?;
                let (qmin, qmax) = we.params.q_range();
                if let Some(pos) = codes
                    .iter()
                    .position(|&c| (c as f64) < qmin || (c as f64) > qmax)
                {
                    return Err(Error::parse(
                        dir.join(&we.blob),
                        pos as u64,
                        format!("code {} outside [{qmin}, {qmax}]", codes[pos]),
                    ));
                }
                Some(QuantizedWeights {
                    params: we.params,
                    codes,
                })
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::parse(
                    &qpath,
                    0,
                    format!("layer {} has no weights to quantize", l.id),
                ))
            }
        };
        weights.push(q);
        if let Some(p) = &e.activation {
            p.validate_any_width().map_err(|err| {
                Error::parse(&qpath, 0, format!("layer {} activation: {err}", l.id))
            })?;
        }
        act_layers.push((l.id, e.activation));
    }
    if let Some(p) = &file.input {
        p.validate_any_width()
            .map_err(|err| Error::parse(&qpath, 0, format!("input activation: {err}")))?;
    }
    QuantizedModel::assemble(
        model,
        weights,
        ActivationParams {
            input: file.input,
            layers: act_layers,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_unit_range() {
        let p = compute_qparams(0.0, 1.0, 8, Granularity::PerTensor, Symmetry::Affine).unwrap();
        assert_eq!((p.scale[0], p.zero_point[0]), (255.0, 0.0));
    }

    #[test]
    fn symmetric_unit_range() {
        let p = compute_qparams(-1.0, 1.0, 8, Granularity::PerTensor, Symmetry::Symmetric).unwrap();
        assert_eq!((p.scale[0], p.zero_point[0]), (127.0, 0.0));
    }

    #[test]
    fn affine_offset_range() {
        let p = compute_qparams(-0.5, 1.5, 8, Granularity::PerTensor, Symmetry::Affine).unwrap();
        assert_eq!((p.scale[0], p.zero_point[0]), (127.5, 64.0));
        let x = Tensor::new([1, 1, 1, 2], vec![-0.5, 1.5]).unwrap();
        assert_eq!(quantize(&x, &p).unwrap(), vec![0, 255]);
    }

    #[test]
    fn half_maps_to_128() {
        let p = compute_qparams(0.0, 1.0, 8, Granularity::PerTensor, Symmetry::Affine).unwrap();
        let x = Tensor::new([1, 1, 1, 3], vec![0.5, 0.0, 40.0]).unwrap();
        let q = quantize(&x, &p).unwrap();
        assert_eq!(q, vec![128, 0, 255]);
        let d = dequantize(&q, x.shape(), &p).unwrap();
        assert!((d.data()[0] - 128.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn bad_ranges() {
        assert!(compute_qparams(1.0, 0.0, 8, Granularity::PerTensor, Symmetry::Affine).is_err());
        assert!(compute_qparams(0.0, 1.0, 9, Granularity::PerTensor, Symmetry::Affine).is_err());
        let p = compute_qparams(2.0, 2.0, 8, Granularity::PerTensor, Symmetry::Affine).unwrap();
        assert!((p.scale[0] - 255.0).abs() < 1e-12);
    }

    #[test]
    fn minmax_observer() {
        let mut o = Observer::new(ObserverKind::MinMax);
        assert!(matches!(
            o.finalize(8, Symmetry::Affine),
            Err(Error::EmptyObserver)
        ));
        o.observe(&Tensor::new([1, 1, 1, 2], vec![-2.0, 1.0]).unwrap())
            .unwrap();
        o.observe(&Tensor::new([1, 1, 1, 2], vec![0.0, 3.0]).unwrap())
            .unwrap();
        assert_eq!(o.ranges().unwrap(), vec![(-2.0, 3.0)]);
    }

    #[test]
    fn per_channel_lengths() {
        let w = WeightTensor::new([3, 1, 1, 2], vec![1.0, -1.0, 2.0, 0.5, 0.0, 0.25]).unwrap();
        let mut o = Observer::new(ObserverKind::PerChannelMinMax);
        o.observe_weights(&w).unwrap();
        assert_eq!(
            o.ranges().unwrap(),
            vec![(-1.0, 1.0), (0.5, 2.0), (0.0, 0.25)]
        );
        assert_eq!(o.finalize(8, Symmetry::Symmetric).unwrap().scale.len(), 3);
    }

    #[test]
    fn histogram_counts_survive_rebinning() {
        let mut o = Observer::new(ObserverKind::Histogram { bins: 64 });
        o.observe(&Tensor::new([1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap())
            .unwrap();
        o.observe(&Tensor::new([1, 1, 1, 2], vec![-4.0, 9.0]).unwrap())
            .unwrap();
        let Observer::Histogram(h) = &o else {
            unreachable!()
        };
        assert_eq!(h.total(), 5);
        assert_eq!((h.lo, h.hi), (-4.0, 9.0));
    }
}
