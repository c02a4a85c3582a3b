//! Central finite differences against the hand-written backward passes, in f64.

use crackseg_core::fusion::{FusionMode, GatedFusion};
use crackseg_core::loss::{total_loss, total_loss_with_grad};
use crackseg_core::nn::{Init, Parameterized};
use crackseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Worst relative error over every parameter element of a randomly initialised fusion block.
fn fusion_worst_error(mode: FusionMode, step: f64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut block = GatedFusion::<f64>::new(&Init::new(1), "f", mode, 5, 4, 2);
    block.visit_mut("", &mut |_, p| p.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
    let general = random([1, 5, 3, 3], &mut rng);
    let crack = random([1, 4, 6, 6], &mut rng);
    let r = random([1, 4, 6, 6], &mut rng);
    let loss = |b: &GatedFusion<f64>| -> f64 {
        let out = b.fuse(&general, &crack).unwrap();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };

    let (_, cache) = block.fuse_train(&general, &crack).unwrap();
    block.zero_grad();
    block.backward(&cache, &r);
    let mut analytic = Vec::new();
    block.visit("", &mut |n, p| analytic.push((n.to_string(), p.grad.clone())));

    let mut worst = (0.0, String::new());
    for (name, grads) in &analytic {
        for (i, &a) in grads.iter().enumerate() {
            let nudge = |b: &mut GatedFusion<f64>, d: f64| {
                b.visit_mut("", &mut |n, p| {
                    if n == name {
                        p.value[i] += d;
                    }
                })
            };
            nudge(&mut block, step);
            let up = loss(&block);
            nudge(&mut block, -2.0 * step);
            let down = loss(&block);
            nudge(&mut block, step);
            let e = rel_err(a, (up - down) / (2.0 * step));
            if e > worst.0 {
                worst = (e, format!("{name}[{i}]"));
            }
        }
    }
    worst
}

#[test]
fn gated_fusion_parameter_gradients() {
    let (err, at) = fusion_worst_error(FusionMode::Gated, 1e-5);
    assert!(err < 1e-4, "worst relative error {err:e} at {at}");
}

#[test]
fn concat_fusion_parameter_gradients() {
    let (err, at) = fusion_worst_error(FusionMode::Concat, 1e-5);
    assert!(err < 1e-4, "worst relative error {err:e} at {at}");
}

#[test]
fn gated_fusion_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut block = GatedFusion::<f64>::new(&Init::new(2), "f", FusionMode::Gated, 5, 4, 2);
    let general = random([1, 5, 3, 3], &mut rng);
    let mut crack = random([1, 4, 6, 6], &mut rng);
    let r = random([1, 4, 6, 6], &mut rng);
    let (_, cache) = block.fuse_train(&general, &crack).unwrap();
    let dx = block.backward(&cache, &r);
    let step = 1e-5;
    for i in 0..crack.len() {
        let mut eval = |d: f64| {
            crack.data_mut()[i] += d;
            let out = block.fuse(&general, &crack).unwrap();
            crack.data_mut()[i] -= d;
            out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let n = (eval(step) - eval(-step)) / (2.0 * step);
        assert!(rel_err(dx.data()[i], n) < 1e-4, "element {i}: {} vs {n}", dx.data()[i]);
    }
}

#[test]
fn total_loss_probability_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut p = Tensor::<f64>::from_fn([1, 1, 4, 4], |_| rng.random_range(0.05..0.95));
    let y = Tensor::<f64>::from_fn([1, 1, 4, 4], |_| rng.random_range(0..2) as f64);
    let (_, grad) = total_loss_with_grad(&p, &y).unwrap();
    let step = 1e-6;
    for i in 0..p.len() {
        let mut eval = |d: f64| {
            p.data_mut()[i] += d;
            let l = total_loss(&p, &y).unwrap().total;
            p.data_mut()[i] -= d;
            l
        };
        let n = (eval(step) - eval(-step)) / (2.0 * step);
        assert!(rel_err(grad.data()[i], n) < 1e-5, "element {i}: {} vs {n}", grad.data()[i]);
    }
}
