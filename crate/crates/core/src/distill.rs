//! Calibration-data distillation against per-layer target statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    backward_tape, channel_stats_backward, channel_stats_f64, Objective, Seeds, TapPoint, Tape,
};
use crate::calib::{is_stat_layer, SubstituteSet};
use crate::error::{Error, Result};
use crate::format::{ensure_dir, read_f32_blob, read_json, write_f32_blob, write_json};
use crate::graph::ModelGraph;
use crate::tensor::{gaussian_tensor, ChannelStats, SeededRng, Tensor};

pub const DISTILLED_FORMAT: &str = "gzsq-distilled/1";

/// Distance between two channel-statistics vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Zscore,
    L1,
    L1MeanOnly,
    L1StdOnly,
    L2,
    L2MeanOnly,
    L2StdOnly,
    KlStdOnly,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Zscore,
        LossKind::L1,
        LossKind::L1MeanOnly,
        LossKind::L1StdOnly,
        LossKind::L2,
        LossKind::L2MeanOnly,
        LossKind::L2StdOnly,
        LossKind::KlStdOnly,
    ];

    pub fn cli_name(self) -> &'static str {
        match self {
            LossKind::Zscore => "zscore",
            LossKind::L1 => "l1",
            LossKind::L1MeanOnly => "l1mu",
            LossKind::L1StdOnly => "l1sigma",
            LossKind::L2 => "l2",
            LossKind::L2MeanOnly => "l2mu",
            LossKind::L2StdOnly => "l2sigma",
            LossKind::KlStdOnly => "kl",
        }
    }

    pub fn from_cli(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.cli_name() == name)
    }
}

/// Loss between `u = (um, us)` and `v = (vm, vs)` and its gradient with respect to `u`.
///
/// Per-channel terms are averaged over channels; the KL variant compares the std
/// vectors as distributions over channels.
fn pair_loss_grad(
    kind: LossKind,
    um: &[f64],
    us: &[f64],
    vm: &[f64],
    vs: &[f64],
    s: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let c = um.len();
    let inv_c = 1.0 / c as f64;
    let mut dm = vec![0.0; c];
    let mut ds = vec![0.0; c];
    let sign = |x: f64| {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let mut loss = 0.0;
    match kind {
        LossKind::KlStdOnly => {
            let a: Vec<f64> = us.iter().map(|x| x + s).collect();
            let b: Vec<f64> = vs.iter().map(|x| x + s).collect();
            let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
            let kl: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x / sa) * ((x / sa) / (y / sb)).ln())
                .sum();
            for k in 0..c {
                let p = a[k] / sa;
                let q = b[k] / sb;
                ds[k] = -0.5 * ((p / q).ln() - kl) / sa;
            }
            return (1.0 - 0.5 * kl, dm, ds);
        }
        _ => {
            for k in 0..c {
                let d_mu = um[k] - vm[k];
                let d_sd = us[k] - vs[k];
                let (l, gm, gs) = match kind {
                    LossKind::Zscore => {
                        let (a, b) = (us[k] + s, vs[k] + s);
                        let den = (a * a + b * b).sqrt();
                        let l = d_mu.abs() / den;
                        (l, sign(d_mu) / den, -l * a / (den * den))
                    }
                    LossKind::L1 => (d_mu.abs() + d_sd.abs(), sign(d_mu), sign(d_sd)),
                    LossKind::L1MeanOnly => (d_mu.abs(), sign(d_mu), 0.0),
                    LossKind::L1StdOnly => (d_sd.abs(), 0.0, sign(d_sd)),
                    LossKind::L2 => (d_mu * d_mu + d_sd * d_sd, 2.0 * d_mu, 2.0 * d_sd),
                    LossKind::L2MeanOnly => (d_mu * d_mu, 2.0 * d_mu, 0.0),
                    LossKind::L2StdOnly => (d_sd * d_sd, 0.0, 2.0 * d_sd),
                    LossKind::KlStdOnly => unreachable!(),
                };
                loss += l * inv_c;
                dm[k] = gm * inv_c;
                ds[k] = gs * inv_c;
            }
        }
    }
    (loss, dm, ds)
}

fn check_pair(u: &ChannelStats, v: &ChannelStats, s: f64) -> Result<()> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::invalid(format!(
            "stat loss needs equal non-empty widths, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    if !(s > 0.0) {
        return Err(Error::invalid(format!("guard s must be > 0, got {s}")));
    }
    Ok(())
}

/// Channel-averaged `|μ_u − μ_v| / √((σ_u + s)² + (σ_v + s)²)`.
pub fn zscore_loss(u: &ChannelStats, v: &ChannelStats, s: f64) -> Result<f64> {
    pair_loss(LossKind::Zscore, u, v, s)
}

pub fn pair_loss(kind: LossKind, u: &ChannelStats, v: &ChannelStats, s: f64) -> Result<f64> {
    check_pair(u, v, s)?;
    Ok(pair_loss_grad(kind, &u.mean, &u.std, &v.mean, &v.std, s).0)
}

/// One statistics target on the tape.
#[derive(Debug, Clone)]
pub struct StatTarget {
    pub layer_index: usize,
    pub layer_id: usize,
    pub point: TapPoint,
    pub target: ChannelStats,
}

/// Sum of per-layer statistic losses plus an optional unit-Gaussian prior on the input.
#[derive(Debug, Clone)]
pub struct DistillObjective {
    pub kind: LossKind,
    pub guard: f64,
    pub targets: Vec<StatTarget>,
    pub input_prior: bool,
}

impl DistillObjective {
    /// Matches every statistic-bearing layer's output against the substitute set and
    /// the input against `N(0, 1)`.
    pub fn substitutes(
        model: &ModelGraph,
        subs: &SubstituteSet,
        kind: LossKind,
        guard: f64,
    ) -> Result<Self> {
        let shapes = model.output_shapes()?;
        let mut targets = Vec::new();
        for (idx, layer) in model.layers.iter().enumerate() {
            if !is_stat_layer(layer.kind) {
                continue;
            }
            let target = subs.get(layer.id).ok_or_else(|| {
                Error::invalid(format!("no substitute statistics for layer {}", layer.id))
            })?;
            if target.len() != shapes[idx][0] {
                return Err(Error::invalid(format!(
                    "substitute for layer {} has {} channels, layer has {}",
                    layer.id,
                    target.len(),
                    shapes[idx][0]
                )));
            }
            targets.push(StatTarget {
                layer_index: idx,
                layer_id: layer.id,
                point: TapPoint::Output,
                target: target.clone(),
            });
        }
        Ok(DistillObjective {
            kind,
            guard,
            targets,
            input_prior: true,
        })
    }

    /// Batch-norm-statistics matching: each conv-like output before normalization is
    /// pulled toward the running `(μ^B, σ^B)` stored in `bn_source` (matched by layer id),
    /// with a squared-distance loss.
    ///
    /// `model` may be `bn_source` itself or a folded copy of it; in the folded case the
    /// tapped tensor already includes the folded shift, which the stored statistics do
    /// not account for.
    pub fn bn_statistics(model: &ModelGraph, bn_source: &ModelGraph, guard: f64) -> Result<Self> {
        model.output_shapes()?;
        let mut targets = Vec::new();
        for src in &bn_source.layers {
            let Some(bn) = &src.bn else { continue };
            let idx = model
                .layer_index(src.id)
                .ok_or_else(|| Error::invalid(format!("layer {} missing from model", src.id)))?;
            if !model.layers[idx].kind.is_conv_like() {
                return Err(Error::invalid(format!("layer {} is not conv-like", src.id)));
            }
            targets.push(StatTarget {
                layer_index: idx,
                layer_id: src.id,
                point: TapPoint::PreNorm,
                target: ChannelStats {
                    mean: bn.running_mean.iter().map(|&v| v as f64).collect(),
                    std: bn.running_std.iter().map(|&v| v as f64).collect(),
                },
            });
        }
        if targets.is_empty() {
            return Err(Error::invalid(
                "batch-norm statistics matching needs live batch-norm",
            ));
        }
        Ok(DistillObjective {
            kind: LossKind::L2,
            guard,
            targets,
            input_prior: false,
        })
    }

    fn evaluate(&self, tape: &Tape<'_>, want_grad: bool) -> Result<(Seeds, Vec<(usize, f64)>)> {
        let mut seeds = Seeds::default();
        let mut per_layer = Vec::with_capacity(self.targets.len());
        for t in &self.targets {
            let x = tape.tap(t.layer_index, t.point).ok_or_else(|| {
                Error::UnsupportedOp(format!("no {:?} tap on layer {}", t.point, t.layer_id))
            })?;
            let shape = tape.shape(t.layer_index);
            let (mean, std) = channel_stats_f64(x, shape);
            if mean.len() != t.target.len() {
                return Err(Error::invalid(format!(
                    "layer {}: {} channels vs target {}",
                    t.layer_id,
                    mean.len(),
                    t.target.len()
                )));
            }
            let (l, dm, ds) = pair_loss_grad(
                self.kind,
                &mean,
                &std,
                &t.target.mean,
                &t.target.std,
                self.guard,
            );
            seeds.loss += l;
            per_layer.push((t.layer_id, l));
            if want_grad {
                let g = channel_stats_backward(x, shape, &mean, &std, &dm, &ds, self.guard);
                seeds.taps.push((t.layer_index, t.point, g));
            }
        }
        if self.input_prior {
            let x = tape.input();
            let shape = tape.input_shape();
            let (mean, std) = channel_stats_f64(x, shape);
            let c = mean.len();
            let (l, dm, ds) = pair_loss_grad(
                self.kind,
                &mean,
                &std,
                &vec![0.0; c],
                &vec![1.0; c],
                self.guard,
            );
            seeds.loss += l;
            if want_grad {
                seeds.input = Some(channel_stats_backward(
                    x, shape, &mean, &std, &dm, &ds, self.guard,
                ));
            }
        }
        Ok((seeds, per_layer))
    }

    /// Per-target losses, in target order.
    pub fn layer_losses(&self, tape: &Tape<'_>) -> Result<Vec<(usize, f64)>> {
        Ok(self.evaluate(tape, false)?.1)
    }
}

impl Objective for DistillObjective {
    fn value(&self, tape: &Tape<'_>) -> Result<f64> {
        Ok(self.evaluate(tape, false)?.0.loss)
    }

    fn seeds(&self, tape: &Tape<'_>) -> Result<Seeds> {
        Ok(self.evaluate(tape, true)?.0)
    }

    fn name(&self) -> String {
        format!("distill-{}", self.kind.cli_name())
    }
}

/// Total distillation loss of batch `y` against the substitute set.
pub fn distill_loss(
    model: &ModelGraph,
    y: &Tensor,
    subs: &SubstituteSet,
    kind: LossKind,
    s: f64,
) -> Result<f64> {
    let objective = DistillObjective::substitutes(model, subs, kind, s)?;
    let tape = Tape::record(model, y)?;
    objective.value(&tape)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub seed: u64,
    pub guard: f64,
    pub loss: LossKind,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 500,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 8,
            seed: 0,
            guard: 1e-6,
            loss: LossKind::Zscore,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be > 0"));
        }
        if !(self.guard > 0.0) {
            return Err(Error::invalid("guard s must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        Ok(())
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistilledData {
    pub data: Tensor,
    /// Total loss at each iteration, measured before that iteration's update.
    pub loss_history: Vec<f64>,
    /// Per-layer losses of the returned batch.
    pub layer_losses: Vec<(usize, f64)>,
    pub best_iteration: usize,
    pub config: DistillConfig,
}

impl DistilledData {
    pub fn initial_loss(&self) -> f64 {
        self.loss_history[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.loss_history[self.best_iteration]
    }
}

/// Distills a calibration batch against the substitute set.
pub fn distill(
    model: &ModelGraph,
    subs: &SubstituteSet,
    config: &DistillConfig,
) -> Result<DistilledData> {
    config.validate()?;
    let objective = DistillObjective::substitutes(model, subs, config.loss, config.guard)?;
    distill_with(model, &objective, config)
}

/// Runs the optimizer on any distillation objective, starting from `N(0, 1)`.
pub fn distill_with(
    model: &ModelGraph,
    objective: &DistillObjective,
    config: &DistillConfig,
) -> Result<DistilledData> {
    config.validate()?;
    let [c, h, w] = model.input_shape;
    let shape = [config.batch, c, h, w];
    let init = gaussian_tensor(shape, 0.0, 1.0, &mut SeededRng::new(config.seed))?;
    let mut y: Vec<f64> = init.data().iter().map(|&v| v as f64).collect();
    let mut adam = Adam::new(
        y.len(),
        config.learning_rate,
        config.beta1,
        config.beta2,
        config.adam_eps,
    );
    let mut history = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, 0, y.clone());
    for it in 0..config.iterations {
        let tape = Tape::record_f64(model, shape, y.clone()).map_err(|e| at_iteration(e, it))?;
        let grads = backward_tape(&tape, objective, false).map_err(|e| at_iteration(e, it))?;
        if !grads.loss.is_finite() {
            return Err(Error::numeric(
                format!("iteration {it}"),
                "non-finite distillation loss",
            ));
        }
        history.push(grads.loss);
        if grads.loss < best.0 {
            best = (grads.loss, it, y.clone());
        }
        adam.step(&mut y, &grads.d_input);
    }
    let (_, best_iteration, best_y) = best;
    let tape = Tape::record_f64(model, shape, best_y.clone())?;
    let layer_losses = objective.layer_losses(&tape)?;
    Ok(DistilledData {
        data: Tensor::new(shape, best_y.iter().map(|&v| v as f32).collect())?,
        loss_history: history,
        layer_losses,
        best_iteration,
        config: config.clone(),
    })
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NumericFault { location, detail } => Error::NumericFault {
            location: format!("iteration {it}, {location}"),
            detail,
        },
        other => other,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DistilledMeta {
    format: String,
    shape: [usize; 4],
    seed: u64,
    config: DistillConfig,
    best_iteration: usize,
    loss_history: Vec<f64>,
    layer_losses: Vec<(usize, f64)>,
}

impl DistilledData {
    /// Writes `data.bin` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_f32_blob(&dir.join("data.bin"), self.data.data())?;
        write_json(
            &dir.join("meta.json"),
            &DistilledMeta {
                format: DISTILLED_FORMAT.to_string(),
                shape: self.data.shape(),
                seed: self.config.seed,
                config: self.config.clone(),
                best_iteration: self.best_iteration,
                loss_history: self.loss_history.clone(),
                layer_losses: self.layer_losses.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DistilledMeta = read_json(&meta_path)?;
        if meta.format != DISTILLED_FORMAT {
            return Err(Error::UnsupportedVersion {
                found: meta.format,
                expected: DISTILLED_FORMAT.to_string(),
            });
        }
        meta.config
            .validate()
            .map_err(|e| Error::parse(&meta_path, 0, format!("config: {e}")))?;
        if meta.loss_history.len() != meta.config.iterations {
            return Err(Error::parse(
                &meta_path,
                0,
                "loss history length differs from iterations",
            ));
        }
        if meta.loss_history.iter().any(|l| !l.is_finite()) {
            return Err(Error::parse(&meta_path, 0, "non-finite loss in history"));
        }
        if meta.best_iteration >= meta.loss_history.len() {
            return Err(Error::parse(
                &meta_path,
                0,
                "best_iteration outside loss history",
            ));
        }
        if meta.shape[0] != meta.config.batch {
            return Err(Error::parse(
                &meta_path,
                0,
                "data batch differs from config batch",
            ));
        }
        let data = read_f32_blob(&dir.join("data.bin"), &meta.shape)?;
        Ok(DistilledData {
            data: Tensor::new(meta.shape, data)?,
            loss_history: meta.loss_history,
            layer_losses: meta.layer_losses,
            best_iteration: meta.best_iteration,
            config: meta.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(m: &[f64], s: &[f64]) -> ChannelStats {
        ChannelStats::new(m.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn zscore_examples() {
        let u = st(&[0.3, -1.0], &[0.5, 2.0]);
        assert_eq!(zscore_loss(&u, &u, 1e-6).unwrap(), 0.0);

        let l = zscore_loss(&st(&[1.0], &[1.0]), &st(&[0.0], &[1.0]), 1e-12).unwrap();
        assert!((l - 1.0 / 2f64.sqrt()).abs() < 1e-6);

        let l = zscore_loss(&st(&[1.0], &[0.0]), &st(&[0.0], &[0.0]), 1e-6).unwrap();
        assert!((l - 1.0 / (2e-12f64).sqrt()).abs() / l < 1e-6);
        assert!((l - 7.0711e5).abs() / 7.0711e5 < 1e-5);
    }

    #[test]
    fn width_mismatch_rejected() {
        assert!(zscore_loss(&st(&[0.0], &[1.0]), &st(&[0.0, 0.0], &[1.0, 1.0]), 1e-6).is_err());
    }

    #[test]
    fn kl_equal_is_one() {
        let u = st(&[0.0, 0.0], &[0.5, 2.0]);
        let l = pair_loss(LossKind::KlStdOnly, &u, &u, 1e-6).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stat_gradients_match_differences() {
        let um = [0.3, -0.2, 1.1];
        let us = [0.7, 1.3, 0.4];
        let vm = [0.0, 0.5, 1.0];
        let vs = [1.0, 0.9, 0.2];
        let h = 1e-6;
        for kind in LossKind::ALL {
            let (_, dm, ds) = pair_loss_grad(kind, &um, &us, &vm, &vs, 1e-6);
            for k in 0..3 {
                let f = |m: &[f64], s: &[f64]| pair_loss_grad(kind, m, s, &vm, &vs, 1e-6).0;
                let mut a = um;
                let mut b = um;
                a[k] += h;
                b[k] -= h;
                let num = (f(&a, &us) - f(&b, &us)) / (2.0 * h);
                assert!(
                    (num - dm[k]).abs() < 1e-6,
                    "{kind:?} mean {k}: {num} vs {}",
                    dm[k]
                );
                let mut a = us;
                let mut b = us;
                a[k] += h;
                b[k] -= h;
                let num = (f(&um, &a) - f(&um, &b)) / (2.0 * h);
                assert!(
                    (num - ds[k]).abs() < 1e-6,
                    "{kind:?} std {k}: {num} vs {}",
                    ds[k]
                );
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(2, 0.1, 0.9, 0.999, 1e-8);
        adam.step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn loss_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(LossKind::from_cli(k.cli_name()), Some(k));
        }
    }
}
