//! Independent reference implementations used as test oracles.
//!
//! Written as plain loops over the documented semantics; they share no code with the
//! library beyond the data structures.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use zsquant::calib::{EsaPolicy, EsaRule};
use zsquant::{Activation, Error, LayerKind, ModelGraph, Result, SeededRng, Tensor};

/// Forward pass by direct summation in f64.
pub fn naive_forward(model: &ModelGraph, input: &Tensor) -> (Vec<f64>, [usize; 4]) {
    let [n, c0, h0, w0] = input.shape();
    let mut outputs: Vec<(Vec<f64>, [usize; 4])> = Vec::new();
    let mut cur: (Vec<f64>, [usize; 4]) = (
        input.data().iter().map(|&v| v as f64).collect(),
        [n, c0, h0, w0],
    );
    for layer in &model.layers {
        let (x, [n, c, h, w]) = cur.clone();
        let (mut y, shape) = match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                let wt = layer.weights.as_ref().unwrap();
                let [o, i, kh, kw] = wt.shape();
                let depthwise = layer.kind == LayerKind::DepthwiseConv2d;
                let (s, p) = (layer.stride, layer.padding);
                let oh = (h + 2 * p - kh) / s + 1;
                let ow = (w + 2 * p - kw) / s + 1;
                let mut y = vec![0.0; n * o * oh * ow];
                for b in 0..n {
                    for oc in 0..o {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let mut acc = 0.0;
                                for ic in 0..i {
                                    let src_c = if depthwise { oc } else { ic };
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let iy = (yy * s + ky) as isize - p as isize;
                                            let ix = (xx * s + kx) as isize - p as isize;
                                            if iy < 0
                                                || ix < 0
                                                || iy >= h as isize
                                                || ix >= w as isize
                                            {
                                                continue;
                                            }
                                            let xv = x[((b * c + src_c) * h + iy as usize) * w
                                                + ix as usize];
                                            let wv = wt.data()[((oc * i + ic) * kh + ky) * kw + kx]
                                                as f64;
                                            acc += xv * wv;
                                        }
                                    }
                                }
                                if let Some(bias) = &layer.bias {
                                    acc += bias[oc] as f64;
                                }
                                if let Some(bn) = &layer.bn {
                                    let denom = ((bn.running_std[oc] as f64).powi(2)
                                        + bn.epsilon as f64)
                                        .sqrt();
                                    acc = (acc - bn.running_mean[oc] as f64) / denom
                                        * bn.gamma[oc] as f64
                                        + bn.beta[oc] as f64;
                                }
                                y[((b * o + oc) * oh + yy) * ow + xx] = acc;
                            }
                        }
                    }
                }
                (y, [n, o, oh, ow])
            }
            LayerKind::Add(src) => {
                let idx = model.layer_index(src).unwrap();
                let other = &outputs[idx].0;
                (
                    x.iter().zip(other).map(|(a, b)| a + b).collect(),
                    [n, c, h, w],
                )
            }
            LayerKind::GlobalAvgPool => {
                let mut y = vec![0.0; n * c];
                for b in 0..n {
                    for k in 0..c {
                        let start = (b * c + k) * h * w;
                        y[b * c + k] = x[start..start + h * w].iter().sum::<f64>() / (h * w) as f64;
                    }
                }
                (y, [n, c, 1, 1])
            }
            LayerKind::Flatten => (x, [n, c * h * w, 1, 1]),
        };
        for v in y.iter_mut() {
            *v = match layer.activation {
                Activation::None => *v,
                Activation::Relu => v.max(0.0),
                Activation::Relu6 => v.clamp(0.0, 6.0),
            };
        }
        cur = (y, shape);
        outputs.push(cur.clone());
    }
    cur
}

/// Two-pass per-channel mean and population std of an NCHW buffer.
pub fn two_pass_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = t.shape();
    let mut means = vec![0.0; c];
    let mut stds = vec![0.0; c];
    for k in 0..c {
        let mut vals = Vec::new();
        for b in 0..n {
            for j in 0..h * w {
                vals.push(t.data()[(b * c + k) * h * w + j] as f64);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        means[k] = m;
        stds[k] = v.sqrt();
    }
    (means, stds)
}

fn fill(rule: EsaRule, src: &[f64], target: usize) -> Vec<f64> {
    let mut lo = src[0];
    let mut hi = src[0];
    let mut total = 0.0;
    for &v in src {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
        total += v;
    }
    let mean = total / src.len() as f64;
    let value = match rule {
        EsaRule::Repeat => {
            let mut out = Vec::new();
            for i in 0..target {
                out.push(src[i % src.len()]);
            }
            return out;
        }
        EsaRule::Min => lo,
        EsaRule::MeanMinusMin => mean - lo,
        EsaRule::MeanPlusMin => mean + lo,
        EsaRule::Mean => mean,
        EsaRule::MaxMinusMean => hi - mean,
        EsaRule::MaxPlusMean => hi + mean,
        EsaRule::Max => hi,
    };
    vec![value; target]
}

/// Straight-line recomputation of the substitute chain with one policy for every layer.
/// Weight statistics come from `weight_stats` so the check isolates the chain arithmetic.
pub fn substitute_chain(
    model: &ModelGraph,
    policy: &EsaPolicy,
    folded_before: bool,
    weight_stats: impl Fn(usize) -> (Vec<f64>, Vec<f64>),
) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let mut mean = vec![0.0; model.input_shape[0]];
    let mut std = vec![1.0; model.input_shape[0]];
    let mut h = model.input_shape[1];
    let mut w = model.input_shape[2];
    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut out = Vec::new();
    for (idx, layer) in model.layers.iter().enumerate() {
        match layer.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d | LayerKind::FullyConnected => {
                let wt = layer.weights.as_ref().unwrap();
                let [o, _, kh, kw] = wt.shape();
                h = (h + 2 * layer.padding - kh) / layer.stride + 1;
                w = (w + 2 * layer.padding - kw) / layer.stride + 1;
                if let Some(bn) = &layer.bn {
                    mean = bn.beta.iter().map(|&b| b as f64).collect();
                    std = bn.gamma.iter().map(|&g| (g as f64).abs()).collect();
                } else {
                    let (wm, ws) = weight_stats(idx);
                    if mean.len() != o {
                        let rules = if o > mean.len() {
                            policy.expansion
                        } else {
                            policy.contraction
                        };
                        mean = fill(rules.mean, &mean, o);
                        std = fill(rules.std, &std, o);
                        for s in std.iter_mut() {
                            if *s < 0.0 {
                                *s = 0.0;
                            }
                        }
                    }
                    let mut nm = Vec::with_capacity(o);
                    let mut ns = Vec::with_capacity(o);
                    for k in 0..o {
                        let mut m = wm[k] + mean[k];
                        if let (true, Some(b)) = (folded_before, &layer.bias) {
                            m += b[k] as f64;
                        }
                        nm.push(m);
                        ns.push((ws[k] * ws[k] + std[k] * std[k]).sqrt());
                    }
                    mean = nm;
                    std = ns;
                }
                out.push((layer.id, mean.clone(), std.clone()));
            }
            LayerKind::Add(src) => {
                let (om, os) = &history[model.layer_index(src).unwrap()];
                let mut nm = Vec::new();
                let mut ns = Vec::new();
                for k in 0..mean.len() {
                    nm.push(mean[k] + om[k]);
                    ns.push((std[k] * std[k] + os[k] * os[k]).sqrt());
                }
                mean = nm;
                std = ns;
                out.push((layer.id, mean.clone(), std.clone()));
            }
            LayerKind::GlobalAvgPool => {
                h = 1;
                w = 1;
            }
            LayerKind::Flatten => {
                let mut nm = Vec::new();
                let mut ns = Vec::new();
                for k in 0..mean.len() {
                    for _ in 0..h * w {
                        nm.push(mean[k]);
                        ns.push(std[k]);
                    }
                }
                mean = nm;
                std = ns;
                h = 1;
                w = 1;
            }
        }
        history.push((mean.clone(), std.clone()));
    }
    out
}

/// Correct predictions counted one sample at a time.
pub fn count_correct(logits: &[f32], classes: usize, labels: &[usize]) -> usize {
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let mut best = 0;
        for j in 1..classes {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

/// Exhaustive range search over every candidate edge pair, recomputing the error bin
/// by bin. Returns `(error, start, end)` of the best pair.
pub fn brute_force_range(
    lo: f64,
    hi: f64,
    counts: &[u64],
    edges: &[usize],
    levels: f64,
) -> (f64, f64, f64) {
    let bins = counts.len();
    let width = (hi - lo) / bins as f64;
    let edge = |i: usize| lo + width * i as f64;
    let center = |i: usize| lo + width * (i as f64 + 0.5);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for a in 0..edges.len() {
        for b in a + 1..edges.len() {
            let (ea, eb) = (edge(edges[a]), edge(edges[b]));
            let step = (eb - ea) / levels;
            let mut err = 0.0;
            for (k, &cnt) in counts.iter().enumerate() {
                let x = center(k);
                let cnt = cnt as f64;
                err += if k < edges[a] {
                    cnt * (x - ea) * (x - ea)
                } else if k >= edges[b] {
                    cnt * (x - eb) * (x - eb)
                } else {
                    cnt * step * step / 12.0
                };
            }
            if err < best.0 {
                best = (err, ea, eb);
            }
        }
    }
    best
}

/// Error of the range `[edges a, edges b]` under the same model as [`brute_force_range`].
pub fn range_error(lo: f64, hi: f64, counts: &[u64], a: f64, b: f64, levels: f64) -> f64 {
    let bins = counts.len();
    let width = (hi - lo) / bins as f64;
    let step = (b - a) / levels;
    let mut err = 0.0;
    for (k, &cnt) in counts.iter().enumerate() {
        let x = lo + width * (k as f64 + 0.5);
        let cnt = cnt as f64;
        err += if x < a {
            cnt * (x - a) * (x - a)
        } else if x > b {
            cnt * (x - b) * (x - b)
        } else {
            cnt * step * step / 12.0
        };
    }
    err
}

pub fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    out.sort();
    out
}

pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    files(dir)
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

pub fn copy_dir(src: &Path) -> tempfile::TempDir {
    let dst = tempfile::tempdir().unwrap();
    for p in files(src) {
        fs::copy(&p, dst.path().join(p.file_name().unwrap())).unwrap();
    }
    dst
}

pub fn kind_of<T>(r: &Result<T>) -> &'static str {
    match r {
        Ok(_) => "ok",
        Err(e) => e.kind(),
    }
}

/// Applies every corruption class to every file of a saved artifact. Truncation and
/// deletion must yield a parse error, a changed format tag an unsupported-version
/// error, and byte flips must never panic; whatever loads is handed to `probe`.
pub fn corruption_suite<T>(
    dir: &Path,
    format_tag: &str,
    load: impl Fn(&Path) -> Result<T>,
    probe: impl Fn(&T),
) {
    for file in files(dir) {
        let name = file.file_name().unwrap().to_owned();
        let len = fs::metadata(&file).unwrap().len();
        for cut in [0, len / 2] {
            let copy = copy_dir(dir);
            let f = fs::OpenOptions::new()
                .write(true)
                .open(copy.path().join(&name))
                .unwrap();
            f.set_len(cut).unwrap();
            let r = load(copy.path());
            assert_eq!(kind_of(&r), "parse-error", "{name:?} cut to {cut}");
        }

        let copy = copy_dir(dir);
        fs::remove_file(copy.path().join(&name)).unwrap();
        let r = load(copy.path());
        assert_eq!(kind_of(&r), "parse-error", "{name:?} deleted");
        if let Err(Error::Parse { file, .. }) = &r {
            assert_eq!(
                file.file_name(),
                Some(name.as_os_str()),
                "error names the missing file"
            );
        }

        let mut rng = SeededRng::new(len);
        for _ in 0..24 {
            let copy = copy_dir(dir);
            let path = copy.path().join(&name);
            let mut bytes = fs::read(&path).unwrap();
            for _ in 0..1 + rng.below(4) {
                let i = rng.below(bytes.len());
                bytes[i] ^= 1 << rng.below(8);
            }
            fs::write(&path, bytes).unwrap();
            if let Ok(v) = load(copy.path()) {
                probe(&v);
            }
        }
    }

    let json = files(dir)
        .into_iter()
        .find(|p| fs::read_to_string(p).is_ok_and(|t| t.contains(format_tag)))
        .expect("format tag present");
    let copy = copy_dir(dir);
    let path = copy.path().join(json.file_name().unwrap());
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace(format_tag, "gzsq-unknown/9");
    fs::write(&path, text).unwrap();
    assert_eq!(kind_of(&load(copy.path())), "unsupported-version");
}
