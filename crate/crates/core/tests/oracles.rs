mod common;

use zsquant::autodiff::{backward, OutputDot};
use zsquant::calib::{estimate_substitutes, EsaPolicy, EsaRule, PolicyMap, RulePair};
use zsquant::distill::{distill_loss, zscore_loss, LossKind};
use zsquant::harness::{eval_accuracy, random_model, Dataset, RandomModelOptions, Split};
use zsquant::quant::{calibrate_activations, Observer, ObserverKind, Symmetry};
use zsquant::tensor::{activation_channel_stats, gaussian_tensor, weight_channel_stats};
use zsquant::{ChannelStats, LayerSpec, ModelGraph, SeededRng, Tensor, WeightTensor};

fn input_for(model: &ModelGraph, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = model.input_shape;
    gaussian_tensor([n, c, h, w], 0.0, 1.0, &mut SeededRng::new(seed)).unwrap()
}

#[test]
fn forward_matches_direct_summation() {
    for seed in 0..60 {
        let model = random_model(seed, RandomModelOptions::default());
        let x = input_for(&model, 2, seed + 1000);
        let (y, _) = model.forward(&x, false).unwrap();
        let (want, shape) = common::naive_forward(&model, &x);
        assert_eq!(y.shape(), shape, "seed {seed}");
        for (a, b) in y.data().iter().zip(&want) {
            assert!(
                (*a as f64 - b).abs() <= 1e-4 * (1.0 + b.abs()),
                "seed {seed}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn activation_stats_match_two_pass() {
    let mut rng = SeededRng::new(4);
    for shape in [[1, 1, 1, 1], [2, 3, 4, 5], [8, 2, 7, 3]] {
        let t = gaussian_tensor(shape, 1.5, 3.0, &mut rng).unwrap();
        let s = activation_channel_stats(&t).unwrap();
        let (m, sd) = common::two_pass_stats(&t);
        for k in 0..shape[1] {
            assert!((s.mean[k] - m[k]).abs() < 1e-12);
            assert!((s.std[k] - sd[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn weight_stats_match_two_pass() {
    let mut rng = SeededRng::new(9);
    let data: Vec<f32> = (0..4 * 3 * 3 * 3).map(|_| rng.normal() as f32).collect();
    let w = WeightTensor::new([4, 3, 3, 3], data.clone()).unwrap();
    let s = weight_channel_stats(&w).unwrap();
    // An OIHW filter block is laid out like one NCHW sample per output channel.
    let as_act = Tensor::new([1, 4, 27, 1], data).unwrap();
    let (m, sd) = common::two_pass_stats(&as_act);
    for k in 0..4 {
        assert!((s.mean[k] - m[k]).abs() < 1e-12);
        assert!((s.std[k] - sd[k]).abs() < 1e-12);
    }
}

fn check_chain(model: &ModelGraph, policy: EsaPolicy, folded_before: bool) {
    let map = PolicyMap {
        default: policy,
        ..PolicyMap::default()
    };
    let got = estimate_substitutes(model, &map, folded_before).unwrap();
    let want = common::substitute_chain(model, &policy, folded_before, |idx| {
        let s = weight_channel_stats(model.layers[idx].weights.as_ref().unwrap()).unwrap();
        (s.mean, s.std)
    });
    assert_eq!(got.entries.len(), want.len(), "{}", model.name);
    for ((id, s), (wid, m, sd)) in got.entries.iter().zip(&want) {
        assert_eq!(id, wid);
        assert_eq!(&s.mean, m, "{} layer {id} mean", model.name);
        assert_eq!(&s.std, sd, "{} layer {id} std", model.name);
    }
}

#[test]
fn substitutes_match_straight_line_chain() {
    let rules = [
        EsaRule::Min,
        EsaRule::MeanMinusMin,
        EsaRule::MeanPlusMin,
        EsaRule::Mean,
        EsaRule::MaxMinusMean,
        EsaRule::MaxPlusMean,
        EsaRule::Max,
        EsaRule::Repeat,
    ];
    for seed in 0..80 {
        let model = random_model(seed, RandomModelOptions::default());
        let r = |k: usize| rules[(seed as usize + k) % rules.len()];
        let policy = EsaPolicy {
            expansion: RulePair {
                mean: r(0),
                std: r(3),
            },
            contraction: RulePair {
                mean: r(5),
                std: r(6),
            },
        };
        check_chain(&model, policy, false);
        check_chain(&model, EsaPolicy::default(), false);
        if !model.has_bn() {
            check_chain(&model, policy, true);
        }
    }
}

#[test]
fn single_constant_conv_substitute() {
    let w = WeightTensor::new([1, 2, 3, 3], vec![0.25; 18]).unwrap();
    let m = ModelGraph::new("c", [2, 4, 4], vec![LayerSpec::conv(0, w, 1, 1)]);
    let subs = estimate_substitutes(&m, &PolicyMap::default(), false).unwrap();
    let s = subs.get(0).unwrap();
    // Contraction 2 -> 1 under mean-min gives (0, 0); the weight step then adds (0.25, 0).
    assert_eq!(s.mean, vec![0.25]);
    assert_eq!(s.std, vec![0.0]);
    let w = WeightTensor::new([2, 2, 1, 1], vec![0.25; 4]).unwrap();
    let m = ModelGraph::new("c", [2, 4, 4], vec![LayerSpec::conv(0, w, 1, 0)]);
    let s = estimate_substitutes(&m, &PolicyMap::default(), false).unwrap();
    assert_eq!(
        s.get(0).unwrap(),
        &ChannelStats::new(vec![0.25; 2], vec![1.0; 2]).unwrap()
    );
}

#[test]
fn distill_loss_is_sum_of_pair_losses() {
    for seed in 0..30 {
        let model = random_model(seed, RandomModelOptions::default());
        let subs = estimate_substitutes(&model, &PolicyMap::default(), false).unwrap();
        let y = input_for(&model, 3, seed);
        let got = distill_loss(&model, &y, &subs, LossKind::Zscore, 1e-6).unwrap();
        let (_, trace) = model.forward(&y, true).unwrap();
        let trace = trace.unwrap();
        let prior = ChannelStats::uniform(model.input_shape[0], 0.0, 1.0);
        let mut want = zscore_loss(&activation_channel_stats(&y).unwrap(), &prior, 1e-6).unwrap();
        for (id, target) in &subs.entries {
            let stats = activation_channel_stats(trace.get(*id).unwrap()).unwrap();
            want += zscore_loss(&stats, target, 1e-6).unwrap();
        }
        assert!(
            (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
            "seed {seed}: {got} vs {want}"
        );
    }
}

#[test]
fn weight_gradients_match_central_differences() {
    for seed in 0..12 {
        // Linear activations keep the objective smooth in every weight.
        let mut model = random_model(seed, RandomModelOptions::default());
        for l in model.layers.iter_mut() {
            l.activation = zsquant::Activation::None;
        }
        let x = input_for(&model, 2, seed + 7);
        let out_len = model.forward(&x, false).unwrap().0.len();
        let obj = OutputDot::random(out_len, &mut SeededRng::new(seed));
        let g = backward(&model, &x, &obj, true).unwrap();
        let dws = g.d_weights.unwrap();
        let value = |m: &ModelGraph| -> f64 {
            let (y, _) = common::naive_forward(m, &x);
            y.iter().zip(&obj.direction).map(|(a, b)| a * b).sum()
        };
        for (idx, dw) in dws.iter().enumerate() {
            let Some(dw) = dw else { continue };
            for j in (0..dw.len()).step_by(7) {
                let eps = 1e-2f32;
                let mut plus = model.clone();
                plus.layers[idx].weights.as_mut().unwrap().data_mut()[j] += eps;
                let mut minus = model.clone();
                minus.layers[idx].weights.as_mut().unwrap().data_mut()[j] -= eps;
                let fd = (value(&plus) - value(&minus)) / (2.0 * eps as f64);
                let a = dw.data()[j] as f64;
                assert!(
                    (a - fd).abs() <= 1e-3 * (1.0 + a.abs()),
                    "seed {seed} layer {idx} coord {j}: {a} vs {fd}"
                );
            }
        }
    }
}

#[test]
fn accuracy_matches_counting_loop() {
    for seed in 0..10 {
        let model = random_model(seed, RandomModelOptions::default());
        let [c, h, w] = model.input_shape;
        let x = gaussian_tensor([37, c, h, w], 0.0, 1.0, &mut SeededRng::new(seed)).unwrap();
        let (y, _) = model.forward(&x, false).unwrap();
        let k = y.len() / 37;
        if k < 2 {
            continue;
        }
        let mut rng = SeededRng::new(seed + 3);
        let labels: Vec<usize> = (0..37).map(|_| rng.below(k)).collect();
        let d = Dataset::new(x, labels.clone(), k, Split::Test).unwrap();
        let flat = ModelGraph {
            layers: {
                let mut l = model.layers.clone();
                if y.shape()[2] * y.shape()[3] > 1 {
                    l.push(LayerSpec::flatten(99));
                }
                l
            },
            ..model.clone()
        };
        let acc = eval_accuracy(&flat, &d).unwrap();
        let want = common::count_correct(y.data(), k, &labels) as f64 / 37.0;
        assert_eq!(acc, want, "seed {seed}");
    }
}

#[test]
fn histogram_finalize_matches_brute_force() {
    let mut rng = SeededRng::new(11);
    for case in 0..25 {
        let bins = [8, 16, 33, 64][case % 4];
        let mut obs = Observer::new(ObserverKind::Histogram { bins });
        for _ in 0..3 {
            let scale = 0.5 + rng.uniform() * 3.0;
            let t =
                gaussian_tensor([1, 1, 7, 9], rng.normal() as f32, scale as f32, &mut rng).unwrap();
            obs.observe(&t).unwrap();
        }
        let Observer::Histogram(h) = &obs else {
            unreachable!()
        };
        for bits in [2u8, 4, 8] {
            let levels = ((1u32 << bits) - 1) as f64;
            let (a, b) = h.best_range(levels);
            let (best, _, _) =
                common::brute_force_range(h.lo, h.hi, &h.counts, &h.candidate_edges(), levels);
            let chosen = common::range_error(h.lo, h.hi, &h.counts, a, b, levels);
            assert!(
                (chosen - best).abs() <= 1e-9 * best.max(1e-12),
                "case {case} bits {bits}: chosen {chosen} vs best {best}"
            );
            let p = obs.finalize(bits, Symmetry::Affine).unwrap();
            let lo = -p.zero_point[0] / p.scale[0];
            assert!((lo - a).abs() <= 1.0 / p.scale[0]);
        }
    }
}

#[test]
fn histogram_on_uniform_data_keeps_full_support() {
    let mut rng = SeededRng::new(5);
    let data: Vec<f32> = (0..20000)
        .map(|_| (rng.uniform() * 4.0 - 1.0) as f32)
        .collect();
    let t = Tensor::new([1, 1, 1, 20000], data).unwrap();
    let mut obs = Observer::new(ObserverKind::histogram());
    obs.observe(&t).unwrap();
    let Observer::Histogram(h) = &obs else {
        unreachable!()
    };
    let (a, b) = h.best_range(255.0);
    let width = h.width();
    assert!((a - h.lo).abs() <= width + 1e-12, "start {a} vs {}", h.lo);
    assert!((b - h.hi).abs() <= width + 1e-12, "end {b} vs {}", h.hi);
    let (_, ba, bb) = common::brute_force_range(h.lo, h.hi, &h.counts, &h.candidate_edges(), 255.0);
    assert!((ba - h.lo).abs() <= width + 1e-12 && (bb - h.hi).abs() <= width + 1e-12);
}

#[test]
fn calibration_ranges_are_trace_extrema() {
    let model = random_model(3, RandomModelOptions::default());
    let a = input_for(&model, 2, 1);
    let b = input_for(&model, 3, 2).map(|v| v * 3.0);
    let extrema = |batches: &[&Tensor]| -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); model.layers.len()];
        for x in batches {
            let (_, trace) = model.forward(x, true).unwrap();
            for (i, (_, t)) in trace.unwrap().entries.iter().enumerate() {
                for &v in t.data() {
                    out[i].0 = out[i].0.min(v as f64);
                    out[i].1 = out[i].1.max(v as f64);
                }
            }
        }
        out
    };
    for (batches, want) in [
        (vec![a.clone()], extrema(&[&a])),
        (vec![a.clone(), b.clone()], extrema(&[&a, &b])),
    ] {
        let act =
            calibrate_activations(&model, &batches, ObserverKind::MinMax, 8, Symmetry::Affine)
                .unwrap();
        for ((_, p), (lo, hi)) in act.layers.iter().zip(want) {
            let p = p.as_ref().unwrap();
            let (lo, hi) = if lo == hi {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            };
            let expect = 255.0 / (hi - lo);
            assert!((p.scale[0] - expect).abs() <= 1e-9 * expect);
            assert_eq!(p.zero_point[0], (-expect * lo).round());
        }
    }
}
