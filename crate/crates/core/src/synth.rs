//! Synthetic crack images: a dark meandering stroke on a noisy light background.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{binarize_mask, rgb_to_tensor, scan_dataset, DatasetManifest, SegmentationSample};
use crate::error::{Error, Result};

const SEGMENTS: usize = 6;

/// Image and mask (foreground 255) for one seeded crack.
pub fn crack_pair(seed: u64, h: usize, w: usize) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vertical = rng.random::<bool>();
    let (len, across) = if vertical { (h, w) } else { (w, h) };
    let half_width = rng.random_range(1.5f64..3.0);
    let mut pos = rng.random_range(0.3..0.7) * across as f64;
    let mut pts = Vec::with_capacity(SEGMENTS + 1);
    for k in 0..=SEGMENTS {
        let along = k as f64 * (len as f64 - 1.0) / SEGMENTS as f64;
        pts.push(if vertical { (pos, along) } else { (along, pos) });
        pos = (pos + rng.random_range(-0.12..0.12) * across as f64).clamp(0.1 * across as f64, 0.9 * across as f64);
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    let mut mask = GrayImage::new(w as u32, h as u32);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let d = pts.windows(2).map(|s| seg_dist(p, s[0], s[1])).fold(f64::INFINITY, f64::min);
            let crack = d <= half_width;
            let base = if crack { 0.2 } else { 0.6 };
            let px: [u8; 3] = std::array::from_fn(|c| {
                let v = base + tint[c] + rng.random_range(-0.05..0.05);
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, Rgb(px));
            mask.put_pixel(x as u32, y as u32, Luma([if crack { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

fn seg_dist((px, py): (f64, f64), (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0) };
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// In-memory sample identical to what loading the written PNG pair would give.
pub fn crack_sample(seed: u64, h: usize, w: usize) -> SegmentationSample {
    let (img, mask) = crack_pair(seed, h, w);
    SegmentationSample {
        image: rgb_to_tensor(&img),
        mask: binarize_mask(&mask, (h, w)),
        id: format!("crack{seed:04}"),
    }
}

/// Write `n` pairs under `root/images` and `root/masks` and scan them back.
pub fn write_dataset(root: &Path, n: usize, (h, w): (usize, usize), seed: u64) -> Result<DatasetManifest> {
    let images = root.join("images");
    let masks = root.join("masks");
    for d in [&images, &masks] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for i in 0..n {
        let (img, mask) = crack_pair(seed.wrapping_add(i as u64), h, w);
        let name = format!("crack{i:04}.png");
        let ip = images.join(&name);
        let mp = masks.join(&name);
        img.save(&ip).map_err(|e| Error::Decode { path: ip.clone(), msg: e.to_string() })?;
        mask.save(&mp).map_err(|e| Error::Decode { path: mp.clone(), msg: e.to_string() })?;
    }
    scan_dataset(root, (h, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_nontrivial() {
        let a = crack_sample(3, 64, 64);
        assert_eq!(a, crack_sample(3, 64, 64));
        assert_ne!(a.mask, crack_sample(4, 64, 64).mask);
        let fg = a.mask.sum();
        assert!(fg > 64.0 && fg < 0.5 * 64.0 * 64.0, "{fg}");
    }

    #[test]
    fn written_dataset_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), 2, (32, 48), 10).unwrap();
        assert_eq!(m.len(), 2);
        let loaded = m.load(1).unwrap();
        let direct = crack_sample(11, 32, 48);
        assert_eq!(loaded.image, direct.image);
        assert_eq!(loaded.mask, direct.mask);
    }
}
