use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::augment::{augment, mix, sample_rng};
use super::{AugmentPolicy, DatasetManifest, SegmentationSample};
use crate::error::Result;
use crate::par;
use crate::tensor::Tensor;

/// Stacked samples: images (B, 3, H, W), masks (B, 1, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub masks: Tensor<f32>,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn from_samples(samples: &[SegmentationSample]) -> Result<Self> {
        let images: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
        let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        Ok(Batch {
            images: Tensor::stack(&images)?,
            masks: Tensor::stack(&masks)?,
            ids: samples.iter().map(|s| s.id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    policy: Option<AugmentPolicy>,
    epoch: u64,
}

impl BatchIter<'_> {
    /// Manifest indices in the order this epoch visits them.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

pub fn batch_iter<'a>(
    manifest: &'a DatasetManifest,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    policy: Option<&AugmentPolicy>,
) -> BatchIter<'a> {
    batch_iter_epoch(manifest, batch_size, shuffle_seed, policy, 0)
}

/// Batches for one epoch. Both the visiting order and each sample's
/// augmentation are pure functions of (seed, epoch, manifest index).
pub fn batch_iter_epoch<'a>(
    manifest: &'a DatasetManifest,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    policy: Option<&AugmentPolicy>,
    epoch: u64,
) -> BatchIter<'a> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    }
    BatchIter {
        manifest,
        order,
        batch_size,
        pos: 0,
        policy: policy.cloned(),
        epoch,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let policy = self.policy.as_ref();
        let epoch = self.epoch;
        let manifest = self.manifest;
        let samples: Result<Vec<_>> = par::map_indexed(idx.len(), |j| {
            let i = idx[j];
            let s = manifest.load(i)?;
            Ok(match policy {
                Some(p) => augment(&s, p, &mut sample_rng(p.seed, epoch, i as u64)),
                None => s,
            })
        })
        .into_iter()
        .collect();
        Some(samples.and_then(|s| Batch::from_samples(&s)))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn fixture(n: usize) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        for i in 0..n {
            RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 16) as u8, (y * 16) as u8, (i * 40) as u8]))
                .save(dir.path().join(format!("images/s{i}.png")))
                .unwrap();
            GrayImage::from_fn(16, 16, |x, y| Luma([if (x + y + i as u32).is_multiple_of(5) { 255 } else { 0 }]))
                .save(dir.path().join(format!("masks/s{i}.png")))
                .unwrap();
        }
        let m = super::super::scan_dataset(dir.path(), (16, 16)).unwrap();
        (dir, m)
    }

    #[test]
    fn last_batch_may_be_short() {
        let (_d, m) = fixture(5);
        let sizes: Vec<usize> = batch_iter(&m, 2, None, None).map(|b| b.unwrap().len()).collect();
        assert_eq!(sizes, [2, 2, 1]);
        let first = batch_iter(&m, 2, None, None).next().unwrap().unwrap();
        assert_eq!(first.images.shape(), [2, 3, 16, 16]);
        assert_eq!(first.masks.shape(), [2, 1, 16, 16]);
    }

    #[test]
    fn unshuffled_keeps_manifest_order() {
        let (_d, m) = fixture(5);
        let ids: Vec<String> = batch_iter(&m, 2, None, None).flat_map(|b| b.unwrap().ids).collect();
        assert_eq!(ids, ["s0", "s1", "s2", "s3", "s4"]);
    }

    #[test]
    fn seeded_epochs_replay_exactly() {
        let (_d, m) = fixture(5);
        let policy = AugmentPolicy {
            seed: 11,
            ..Default::default()
        };
        let run = || -> Vec<Batch> { batch_iter_epoch(&m, 2, Some(9), Some(&policy), 3).map(|b| b.unwrap()).collect() };
        assert_eq!(run(), run());
        let o1 = batch_iter_epoch(&m, 2, Some(9), None, 0).order().to_vec();
        let o2 = batch_iter_epoch(&m, 2, Some(9), None, 1).order().to_vec();
        let mut sorted = o1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..5).collect::<Vec<_>>());
        assert_ne!(o1, o2);
    }

    #[test]
    fn parallel_and_sequential_loading_agree() {
        let (_d, m) = fixture(4);
        let policy = AugmentPolicy::default();
        let a: Vec<Batch> = batch_iter(&m, 4, Some(1), Some(&policy)).map(|b| b.unwrap()).collect();
        crate::par::set_sequential(true);
        let b: Vec<Batch> = batch_iter(&m, 4, Some(1), Some(&policy)).map(|b| b.unwrap()).collect();
        crate::par::set_sequential(false);
        assert_eq!(a, b);
    }
}
