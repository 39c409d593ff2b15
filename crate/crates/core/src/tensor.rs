//! Dense NCHW tensors, OIHW weights, seeded sampling and channel statistics.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Batch tensor in NCHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    /// Per-sample shape `(c, h, w)`.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `start..end` along the batch axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.shape[0] {
            return Err(Error::invalid(format!(
                "batch slice {start}..{end} out of range for batch {}",
                self.shape[0]
            )));
        }
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Ok(Tensor {
            shape: [end - start, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Gathers the listed samples into a new batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Ok(Tensor {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat_batch(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let sample = first.sample_shape();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.sample_shape() != sample {
                return Err(Error::invalid(
                    "concat of tensors with different sample shapes",
                ));
            }
            n += p.batch();
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, sample[0], sample[1], sample[2]],
            data,
        })
    }
}

/// Convolution / fully-connected weights in OIHW layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::invalid(format!(
                "weight shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(WeightTensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        WeightTensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    pub fn in_channels(&self) -> usize {
        self.shape[1]
    }

    /// Number of weights feeding one output channel (`i·kh·kw`).
    pub fn fan_in(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Weights of output channel `o`.
    pub fn filter(&self, o: usize) -> &[f32] {
        let f = self.fan_in();
        &self.data[o * f..(o + 1) * f]
    }

    pub fn filter_mut(&mut self, o: usize) -> &mut [f32] {
        let f = self.fan_in();
        &mut self.data[o * f..(o + 1) * f]
    }
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::invalid(format!(
                "stats length mismatch: mean {} vs std {}",
                mean.len(),
                std.len()
            )));
        }
        if let Some(s) = std.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::invalid(format!("negative or NaN std {s}")));
        }
        Ok(ChannelStats { mean, std })
    }

    /// The same `(mean, std)` pair repeated over `channels`.
    pub fn uniform(channels: usize, mean: f64, std: f64) -> Self {
        ChannelStats {
            mean: vec![mean; channels],
            std: vec![std; channels],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Seeded ChaCha8 generator. The stream for a given seed is fixed across platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Tensor of i.i.d. `N(mean, std²)` samples.
pub fn gaussian_tensor(
    shape: [usize; 4],
    mean: f32,
    std: f32,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian_tensor needs finite mean and std >= 0, got mean {mean} std {std}"
        )));
    }
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z = rng.normal();
            (mean as f64 + std as f64 * z) as f32
        })
        .collect();
    Ok(Tensor { shape, data })
}

/// Welford accumulator; merged in a fixed order so results are deterministic.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    fn std(&self) -> f64 {
        (self.m2 / self.count).max(0.0).sqrt()
    }
}

/// Per-channel mean and population std over `(n, h, w)`.
pub fn activation_channel_stats(t: &Tensor) -> Result<ChannelStats> {
    if t.is_empty() {
        return Err(Error::invalid("channel stats of an empty tensor"));
    }
    let [n, c, h, w] = t.shape();
    let plane = h * w;
    let mut acc = vec![Moments::default(); c];
    for b in 0..n {
        for (k, m) in acc.iter_mut().enumerate() {
            let start = (b * c + k) * plane;
            for &v in &t.data()[start..start + plane] {
                m.push(v as f64);
            }
        }
    }
    Ok(ChannelStats {
        mean: acc.iter().map(|m| m.mean).collect(),
        std: acc.iter().map(Moments::std).collect(),
    })
}

/// Per-output-channel mean and population std over `(i, kh, kw)`.
pub fn weight_channel_stats(w: &WeightTensor) -> Result<ChannelStats> {
    if w.is_empty() {
        return Err(Error::invalid("channel stats of empty weights"));
    }
    let mut mean = Vec::with_capacity(w.out_channels());
    let mut std = Vec::with_capacity(w.out_channels());
    for o in 0..w.out_channels() {
        let mut m = Moments::default();
        for &v in w.filter(o) {
            m.push(v as f64);
        }
        mean.push(m.mean);
        std.push(m.std());
    }
    Ok(ChannelStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_gives_constant() {
        let mut rng = SeededRng::new(3);
        let t = gaussian_tensor([1, 1, 2, 2], 0.0, 0.0, &mut rng).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn negative_std_rejected() {
        let mut rng = SeededRng::new(3);
        assert!(matches!(
            gaussian_tensor([1, 1, 2, 2], 0.0, -1.0, &mut rng),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gaussian_sample_moments() {
        let mut rng = SeededRng::new(7);
        let t = gaussian_tensor([1, 4, 8, 8], 0.0, 1.0, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.2, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.2, "std {}", var.sqrt());
    }

    #[test]
    fn gaussian_is_deterministic() {
        let a = gaussian_tensor([2, 3, 4, 4], 0.0, 1.0, &mut SeededRng::new(11)).unwrap();
        let b = gaussian_tensor([2, 3, 4, 4], 0.0, 1.0, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn hand_stats() {
        let t = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, 5.0, 5.0]).unwrap();
        let s = activation_channel_stats(&t).unwrap();
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);

        let c = Tensor::filled([2, 3, 2, 2], 4.0);
        let s = activation_channel_stats(&c).unwrap();
        assert!(s.mean.iter().all(|&m| m == 4.0));
        assert!(s.std.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_inputs_rejected() {
        assert!(activation_channel_stats(&Tensor::zeros([0, 2, 2, 2])).is_err());
        assert!(weight_channel_stats(&WeightTensor::zeros([0, 1, 1, 1])).is_err());
    }

    #[test]
    fn weight_stats_hand() {
        let w = WeightTensor::new([1, 4, 1, 1], vec![1.0, 1.0, 1.0, 3.0]).unwrap();
        let s = weight_channel_stats(&w).unwrap();
        assert_eq!(s.mean, vec![1.5]);
        assert!((s.std[0] - 0.75f64.sqrt()).abs() < 1e-12);

        let z = weight_channel_stats(&WeightTensor::zeros([3, 2, 3, 3])).unwrap();
        assert_eq!(z.mean, vec![0.0; 3]);
        assert_eq!(z.std, vec![0.0; 3]);
    }
}
