use crackseg_core::metrics::{compute_metrics, confusion, Aggregation, ConfusionCounts};
use crackseg_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Tensor<f64> {
    Tensor::from_fn([1, 1, 32, 32], |_| if rng.random_bool(density) { 1.0 } else { 0.0 })
}

/// Per-pixel tally written independently of the library.
fn brute_force(p: &Tensor<f64>, g: &Tensor<f64>) -> [u64; 4] {
    let mut c = [0u64; 4];
    for i in 0..p.len() {
        let (pp, gg) = (p.data()[i] > 0.5, g.data()[i] > 0.5);
        let slot = match (pp, gg) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[slot] += 1;
    }
    c
}

#[test]
fn hundred_random_pairs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut counts = Vec::new();
    let mut sum = [0u64; 4];
    for _ in 0..100 {
        let density = rng.random_range(0.0..0.6);
        let (p, g) = (random_mask(&mut rng, density), random_mask(&mut rng, density));
        let c = confusion(&p, &g).unwrap();
        let o = brute_force(&p, &g);
        assert_eq!([c.tp, c.fp, c.fn_, c.tn], o);
        for k in 0..4 {
            sum[k] += o[k];
        }
        counts.push(c);
    }
    let [tp, fp, fn_, _] = sum.map(|v| v as f64);
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    let f1 = 2.0 * precision * recall / (precision + recall);
    let iou = tp / (tp + fp + fn_);
    let dice = 2.0 * tp / (2.0 * tp + fp + fn_);
    let r = compute_metrics(&counts, Aggregation::Micro).unwrap();
    assert!((r.f1 - f1).abs() < 1e-12);
    assert!((r.iou - iou).abs() < 1e-12);
    assert!((r.dice - dice).abs() < 1e-12);
    assert!((r.dice - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
}

#[test]
fn worked_counts() {
    let c = ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 };
    let r = compute_metrics(&[c], Aggregation::Micro).unwrap();
    assert!((r.iou - 1.0 / 3.0).abs() < 1e-15);
    assert!((r.dice - 0.5).abs() < 1e-15);
    assert!((r.f1 - 0.5).abs() < 1e-15);
}

#[test]
fn macro_averages_per_image_scores() {
    let a = ConfusionCounts { tp: 1, fp: 1, fn_: 1, tn: 0 };
    let b = ConfusionCounts { tp: 4, fp: 0, fn_: 0, tn: 5 };
    let r = compute_metrics(&[a, b], Aggregation::Macro).unwrap();
    assert!((r.dice - 0.75).abs() < 1e-15);
    assert!((r.iou - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn bounds_hold(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500) {
        let c = ConfusionCounts { tp, fp, fn_, tn };
        let (iou, dice, f1) = (c.iou(), c.dice(), c.f1());
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(iou <= dice + 1e-15);
        prop_assert!(dice <= 1.0);
        prop_assert!((f1 - dice).abs() < 1e-12);
        if tp + fp + fn_ > 0 {
            prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }
    }
}
