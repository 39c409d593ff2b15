use zsquant_web::{curve, distill_run, losses};

#[test]
fn symmetric_curve_is_a_clamped_staircase() {
    let c = curve(8, true, -1.0, 1.0, 401).unwrap();
    assert_eq!(c.levels, 255);
    assert!((c.step - 1.0 / 127.0).abs() < 1e-12);
    assert_eq!(c.x.len(), 401);
    assert_eq!((c.x[0], c.x[400]), (-1.5, 1.5));
    for (x, y) in c.x.iter().zip(&c.y) {
        let want = (x * 127.0).round().clamp(-127.0, 127.0) / 127.0;
        assert!((y - want).abs() < 1e-6, "x {x}: {y} vs {want}");
    }
    assert!(c.y.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn two_bit_affine_curve_has_four_levels() {
    let c = curve(2, false, 0.0, 3.0, 61).unwrap();
    assert_eq!(c.levels, 4);
    let mut seen: Vec<f64> = c.y.clone();
    seen.dedup();
    assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0]);
}

#[test]
fn curve_rejects_bad_input() {
    assert!(curve(8, true, -1.0, 1.0, 1).is_err());
    assert!(curve(9, true, -1.0, 1.0, 10).is_err());
    assert!(curve(8, false, 1.0, -1.0, 10).is_err());
}

#[test]
fn losses_match_hand_values() {
    let s = 1e-6;
    let l: std::collections::HashMap<_, _> =
        losses(&[1.0, -2.0], &[3.0, 1.0], &[0.0, 0.0], &[4.0, 1.0], s)
            .unwrap()
            .into_iter()
            .collect();
    assert_eq!(l.len(), 8);
    let close = |k: &str, want: f64| assert!((l[k] - want).abs() < 1e-9, "{k}: {} vs {want}", l[k]);
    close("l1mu", 1.5);
    close("l1sigma", 0.5);
    close("l1", 2.0);
    close("l2mu", 2.5);
    close("l2sigma", 0.5);
    close("l2", 3.0);
    let z0 = 1.0 / ((3.0 + s).powi(2) + (4.0 + s).powi(2)).sqrt();
    let z1 = 2.0 / (2.0 * (1.0 + s).powi(2)).sqrt();
    close("zscore", 0.5 * (z0 + z1));
}

#[test]
fn identical_stats_have_zero_distance() {
    for (name, v) in losses(&[0.5, 1.0], &[1.0, 2.0], &[0.5, 1.0], &[1.0, 2.0], 1e-6).unwrap() {
        let want = if name == "kl" { 1.0 } else { 0.0 };
        assert!((v - want).abs() < 1e-12, "{name}: {v}");
    }
}

#[test]
fn mismatched_widths_are_rejected() {
    assert!(losses(&[0.0], &[1.0], &[0.0, 1.0], &[1.0, 1.0], 1e-6).is_err());
}

#[test]
fn distill_demo_reduces_loss_and_is_deterministic() {
    let a = distill_run("zscore", 60, 0.05, 1).unwrap();
    assert_eq!(a.history.len(), 60);
    assert!(a.last < a.initial, "{} -> {}", a.initial, a.last);
    assert_eq!(a.pixels.len(), a.shape.iter().product::<usize>());
    let b = distill_run("zscore", 60, 0.05, 1).unwrap();
    assert_eq!(a.pixels, b.pixels);
    assert!(distill_run("l3", 10, 0.05, 1).is_err());
}
