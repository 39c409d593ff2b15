//! Browser demo: each export takes plain numbers and returns a JSON string.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use zsquant::calib::{estimate_substitutes, PolicyMap};
use zsquant::distill::{distill, pair_loss, DistillConfig, LossKind};
use zsquant::harness::distill_fixture;
use zsquant::quant::{compute_qparams, fake_quantize, Granularity, Symmetry};
use zsquant::{ChannelStats, Tensor};

#[derive(Debug, Serialize)]
pub struct Curve {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub step: f64,
    pub levels: usize,
}

/// Fake-quantization transfer curve sampled over a quarter-range margin on each side.
pub fn curve(bits: u8, symmetric: bool, lo: f64, hi: f64, points: usize) -> zsquant::Result<Curve> {
    if points < 2 {
        return Err(zsquant::Error::InvalidArgument(
            "need at least two points".into(),
        ));
    }
    let sym = if symmetric {
        Symmetry::Symmetric
    } else {
        Symmetry::Affine
    };
    let p = compute_qparams(lo, hi, bits, Granularity::PerTensor, sym)?;
    let margin = 0.25 * (hi - lo).max(1e-6);
    let (a, b) = (lo - margin, hi + margin);
    let x: Vec<f64> = (0..points)
        .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
        .collect();
    let input = Tensor::new([1, 1, 1, points], x.iter().map(|&v| v as f32).collect())?;
    let y = fake_quantize(&input, &p)?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    let (qmin, qmax) = p.q_range();
    Ok(Curve {
        x,
        y,
        step: p.step(0),
        levels: (qmax - qmin) as usize + 1,
    })
}

/// Every loss between two statistics vectors, keyed by loss name.
pub fn losses(
    mean_u: &[f64],
    std_u: &[f64],
    mean_v: &[f64],
    std_v: &[f64],
    guard: f64,
) -> zsquant::Result<Vec<(&'static str, f64)>> {
    let u = ChannelStats::new(mean_u.to_vec(), std_u.to_vec())?;
    let v = ChannelStats::new(mean_v.to_vec(), std_v.to_vec())?;
    LossKind::ALL
        .into_iter()
        .map(|k| Ok((k.cli_name(), pair_loss(k, &u, &v, guard)?)))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct DistillRun {
    pub history: Vec<f64>,
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub best_iteration: usize,
    pub pixels: Vec<f32>,
    pub shape: [usize; 4],
}

/// Distills one batch against the weight-derived statistics of the small linear fixture.
pub fn distill_run(loss: &str, iters: usize, lr: f64, seed: u64) -> zsquant::Result<DistillRun> {
    let loss = LossKind::from_cli(loss)
        .ok_or_else(|| zsquant::Error::InvalidArgument(format!("unknown loss {loss:?}")))?;
    let model = distill_fixture(seed);
    let subs = estimate_substitutes(&model, &PolicyMap::default(), true)?;
    let cfg = DistillConfig {
        iterations: iters,
        learning_rate: lr,
        batch: 1,
        seed,
        loss,
        ..DistillConfig::default()
    };
    let d = distill(&model, &subs, &cfg)?;
    Ok(DistillRun {
        initial: d.initial_loss(),
        last: d.final_loss(),
        best_iteration: d.best_iteration,
        pixels: d.data.data().to_vec(),
        shape: d.data.shape(),
        history: d.loss_history,
    })
}

fn to_js<T: Serialize>(r: zsquant::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn quantize_curve(
    bits: u8,
    symmetric: bool,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<String, JsError> {
    to_js(curve(bits, symmetric, lo, hi, points))
}

#[wasm_bindgen]
pub fn compare_losses(
    mean_u: Vec<f64>,
    std_u: Vec<f64>,
    mean_v: Vec<f64>,
    std_v: Vec<f64>,
    guard: f64,
) -> Result<String, JsError> {
    to_js(
        losses(&mean_u, &std_u, &mean_v, &std_v, guard)
            .map(|l| l.into_iter().collect::<BTreeMap<_, _>>()),
    )
}

#[wasm_bindgen]
pub fn distill_demo(loss: &str, iters: usize, lr: f64, seed: u64) -> Result<String, JsError> {
    to_js(distill_run(loss, iters, lr, seed))
}
