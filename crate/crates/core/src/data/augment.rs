use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SegmentationSample;
use crate::tensor::{Real, Tensor};

/// Clockwise rotation by a multiple of 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn from_degrees(d: u32) -> Option<Self> {
        match d {
            0 => Some(Rotation::R0),
            90 => Some(Rotation::R90),
            180 => Some(Rotation::R180),
            270 => Some(Rotation::R270),
            _ => None,
        }
    }

    fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rotation_choices: Vec<Rotation>,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rotation_choices: vec![Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270],
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rotation_choices: vec![Rotation::R0],
            seed: 0,
        }
    }
}

/// Deterministic per-sample stream, a pure function of (seed, epoch, index).
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(0x5eed, seed), epoch), index))
}

/// splitmix64 step over `a ^ b`.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = (a ^ b).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Transform {
    flip_h: bool,
    flip_v: bool,
    rotation: Rotation,
}

/// Draw one geometric transform and apply it to image and mask alike.
///
/// Always consumes exactly three draws. Quarter turns are dropped from the
/// choices for non-square samples.
pub fn augment<R: Rng + ?Sized>(sample: &SegmentationSample, policy: &AugmentPolicy, rng: &mut R) -> SegmentationSample {
    let (h, w) = sample.image.hw();
    let flip_h = rng.random::<f64>() < policy.flip_h_prob;
    let flip_v = rng.random::<f64>() < policy.flip_v_prob;
    let pick = rng.random::<u64>();
    let choices: Vec<Rotation> = policy
        .rotation_choices
        .iter()
        .copied()
        .filter(|r| h == w || !r.swaps_axes())
        .collect();
    let rotation = if choices.is_empty() {
        Rotation::R0
    } else {
        choices[(pick % choices.len() as u64) as usize]
    };
    let t = Transform { flip_h, flip_v, rotation };
    SegmentationSample {
        image: apply(&sample.image, t),
        mask: apply(&sample.mask, t),
        id: sample.id.clone(),
    }
}

fn apply<T: Real>(x: &Tensor<T>, t: Transform) -> Tensor<T> {
    let mut out = x.clone();
    if t.flip_h {
        out = flip_h(&out);
    }
    if t.flip_v {
        out = flip_v(&out);
    }
    match t.rotation {
        Rotation::R0 => out,
        Rotation::R90 => rotate_cw(&out),
        Rotation::R180 => flip_v(&flip_h(&out)),
        Rotation::R270 => rotate_cw(&flip_v(&flip_h(&out))),
    }
}

pub(crate) fn flip_h<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [_, _, _, w] = x.shape();
    Tensor::from_fn(x.shape(), |[b, c, y, xx]| x.at([b, c, y, w - 1 - xx]))
}

pub(crate) fn flip_v<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [_, _, h, _] = x.shape();
    Tensor::from_fn(x.shape(), |[b, c, y, xx]| x.at([b, c, h - 1 - y, xx]))
}

pub(crate) fn rotate_cw<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    Tensor::from_fn([b, c, w, h], |[bi, ci, y, xx]| x.at([bi, ci, h - 1 - xx, y]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn sample(h: usize, w: usize, salt: u32) -> SegmentationSample {
        SegmentationSample {
            image: Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 31 + y * 7 + x * 3) as u32 ^ salt) as f32 / 97.0),
            mask: Tensor::from_fn([1, 1, h, w], |[_, _, y, x]| (y * 5 + x + salt as usize).is_multiple_of(3) as u8 as f32),
            id: "s".into(),
        }
    }

    #[test]
    fn identity_policy_is_exact() {
        let s = sample(8, 8, 1);
        let mut rng = sample_rng(3, 0, 0);
        assert_eq!(augment(&s, &AugmentPolicy::identity(), &mut rng), s);
    }

    #[test]
    fn flips_are_involutions() {
        let s = sample(6, 10, 2);
        assert_eq!(flip_h(&flip_h(&s.image)), s.image);
        assert_eq!(flip_v(&flip_v(&s.mask)), s.mask);
        let r = s.image.clone();
        assert_eq!(rotate_cw(&rotate_cw(&rotate_cw(&rotate_cw(&r)))), r);
    }

    #[test]
    fn same_seed_same_output() {
        let s = sample(8, 8, 3);
        let p = AugmentPolicy {
            seed: 7,
            ..Default::default()
        };
        let a = augment(&s, &p, &mut sample_rng(7, 0, 4));
        let b = augment(&s, &p, &mut sample_rng(7, 0, 4));
        assert_eq!(a, b);
    }

    #[test]
    fn non_square_never_swaps_axes() {
        let s = sample(8, 16, 4);
        let p = AugmentPolicy {
            rotation_choices: vec![Rotation::R90, Rotation::R270],
            ..Default::default()
        };
        for i in 0..20 {
            let out = augment(&s, &p, &mut sample_rng(1, 0, i));
            assert_eq!(out.image.hw(), (8, 16));
        }
    }

    proptest! {
        #[test]
        fn mask_follows_image(seed in any::<u64>(), idx in 0u64..1000, square in any::<bool>()) {
            let s = if square { sample(6, 6, 5) } else { sample(4, 6, 5) };
            // Encode the mask as a fourth image channel: transforming the
            // stack must equal transforming each part.
            let stacked = s.image.concat_channels(&s.mask).unwrap();
            let mut probe = sample_rng(seed, 0, idx);
            let out = augment(&s, &AugmentPolicy::default(), &mut sample_rng(seed, 0, idx));
            let flip_h_drawn = probe.random::<f64>() < 0.5;
            let flip_v_drawn = probe.random::<f64>() < 0.5;
            let pick = probe.random::<u64>();
            let all = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];
            let choices: Vec<_> = all.iter().copied().filter(|r| square || !r.swaps_axes()).collect();
            let t = Transform { flip_h: flip_h_drawn, flip_v: flip_v_drawn, rotation: choices[(pick % choices.len() as u64) as usize] };
            let (img, mask) = apply(&stacked, t).split_channels(3);
            prop_assert_eq!(&out.image, &img);
            prop_assert_eq!(&out.mask, &mask);
            prop_assert!(out.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }
}
