//! Image/mask datasets on disk.
//!
//! Layout: `<root>/images/*.{png,jpg}` paired by filename stem with
//! `<root>/masks/*.{png,jpg}`. Masks are 8-bit single channel.

mod augment;
mod batch;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub use augment::{augment, sample_rng, AugmentPolicy, Rotation};
pub use batch::{batch_iter, batch_iter_epoch, Batch, BatchIter};

use crate::error::{Error, Result};
use crate::nn::resize_bilinear;
use crate::tensor::Tensor;

/// Masks are foreground where the 8-bit intensity exceeds this value.
pub const MASK_THRESHOLD: u8 = 127;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePair {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub pairs: Vec<SamplePair>,
    pub target_size: (usize, usize),
}

/// Subdirectory names holding images and masks.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub images_dir: String,
    pub masks_dir: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        DatasetLayout {
            images_dir: "images".into(),
            masks_dir: "masks".into(),
        }
    }
}

/// One image/mask pair. `image` is (1, 3, H, W) in [0, 1]; `mask` is (1, 1, H, W) in {0, 1}.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub id: String,
}

pub fn check_target_size((h, w): (usize, usize)) -> Result<()> {
    if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
        return Err(Error::BadTargetSize { h, w });
    }
    Ok(())
}

pub fn scan_dataset(root: &Path, target_size: (usize, usize)) -> Result<DatasetManifest> {
    scan_dataset_with(root, target_size, &DatasetLayout::default())
}

pub fn scan_dataset_with(root: &Path, target_size: (usize, usize), layout: &DatasetLayout) -> Result<DatasetManifest> {
    check_target_size(target_size)?;
    let images = list_by_stem(&root.join(&layout.images_dir))?;
    let masks = list_by_stem(&root.join(&layout.masks_dir))?;
    let mut pairs = Vec::with_capacity(images.len());
    for (stem, image) in images {
        let mask = masks.get(&stem).cloned().ok_or_else(|| Error::MissingMask { stem: stem.clone() })?;
        pairs.push(SamplePair { stem, image, mask });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset { root: root.to_path_buf() });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        pairs,
        target_size,
    })
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if !ext_ok || !path.is_file() {
            continue;
        }
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        if let Some(prev) = out.insert(stem.clone(), path.clone()) {
            return Err(Error::Config(format!(
                "stem `{stem}` appears twice: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            root: self.root.clone(),
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            target_size: self.target_size,
        }
    }

    /// Hold out the trailing `fraction` of pairs (at least one) for validation.
    /// A single-pair manifest validates on itself.
    pub fn split_holdout(&self, fraction: f64) -> (DatasetManifest, DatasetManifest) {
        let n = self.len();
        if n < 2 || fraction <= 0.0 {
            return (self.clone(), self.clone());
        }
        let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
        let idx: Vec<usize> = (0..n).collect();
        (self.subset(&idx[..n - n_val]), self.subset(&idx[n - n_val..]))
    }

    /// `<stem>\t<image_path>\t<mask_path>` per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for p in &self.pairs {
            let _ = writeln!(s, "{}\t{}\t{}", p.stem, p.image.display(), p.mask.display());
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, index: usize) -> Result<SegmentationSample> {
        load_sample(self, index)
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// RGB image scaled to [0, 1] as a (1, 3, H, W) tensor at native size.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&decode(path)?.to_rgb8()))
}

pub fn rgb_to_tensor(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
}

/// Nearest-neighbour resize of 8-bit intensities followed by thresholding.
pub fn binarize_mask(gray: &image::GrayImage, (oh, ow): (usize, usize)) -> Tensor<f32> {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let near = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    Tensor::from_fn([1, 1, oh, ow], |[_, _, y, x]| {
        let v = gray.get_pixel(near(x, ow, w) as u32, near(y, oh, h) as u32)[0];
        if v > MASK_THRESHOLD {
            1.0
        } else {
            0.0
        }
    })
}

pub fn load_sample(manifest: &DatasetManifest, index: usize) -> Result<SegmentationSample> {
    let pair = manifest.pairs.get(index).ok_or_else(|| {
        Error::Config(format!("sample index {index} out of range for {} pairs", manifest.len()))
    })?;
    let img = decode(&pair.image)?.to_rgb8();
    let gray = decode(&pair.mask)?.to_luma8();
    if img.dimensions() != gray.dimensions() {
        return Err(Error::ShapeMismatch(format!(
            "sample `{}`: image is {:?} but mask is {:?}",
            pair.stem,
            img.dimensions(),
            gray.dimensions()
        )));
    }
    let (th, tw) = manifest.target_size;
    let image = resize_bilinear(&rgb_to_tensor(&img), th, tw);
    let mask = binarize_mask(&gray, (th, tw));
    Ok(SegmentationSample {
        image,
        mask,
        id: pair.stem.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    fn write_pair(root: &Path, stem: &str, w: u32, h: u32) {
        std::fs::create_dir_all(root.join("images")).unwrap();
        std::fs::create_dir_all(root.join("masks")).unwrap();
        RgbImage::from_pixel(w, h, Rgb([10, 20, 30]))
            .save(root.join("images").join(format!("{stem}.png")))
            .unwrap();
        GrayImage::from_fn(w, h, |x, _| Luma([if x % 2 == 0 { 255 } else { 0 }]))
            .save(root.join("masks").join(format!("{stem}.png")))
            .unwrap();
    }

    #[test]
    fn scans_matched_pairs_in_stem_order() {
        let dir = tempfile::tempdir().unwrap();
        for s in ["c", "a", "b"] {
            write_pair(dir.path(), s, 8, 8);
        }
        let m = scan_dataset(dir.path(), (16, 16)).unwrap();
        let stems: Vec<_> = m.pairs.iter().map(|p| p.stem.as_str()).collect();
        assert_eq!(stems, ["a", "b", "c"]);
        let tsv = m.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with("a\t"));
    }

    #[test]
    fn scan_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 8, 8);
        RgbImage::new(4, 4).save(dir.path().join("images/lonely.png")).unwrap();
        match scan_dataset(dir.path(), (16, 16)) {
            Err(Error::MissingMask { stem }) => assert_eq!(stem, "lonely"),
            other => panic!("expected MissingMask, got {other:?}"),
        }
        assert!(matches!(scan_dataset(dir.path(), (500, 500)), Err(Error::BadTargetSize { .. })));

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("images")).unwrap();
        std::fs::create_dir_all(empty.path().join("masks")).unwrap();
        assert!(matches!(scan_dataset(empty.path(), (16, 16)), Err(Error::EmptyDataset { .. })));
        assert!(matches!(
            scan_dataset(&empty.path().join("nope"), (16, 16)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn threshold_is_strictly_above_127() {
        let g = GrayImage::from_raw(4, 1, vec![0, 127, 128, 255]).unwrap();
        let m = binarize_mask(&g, (1, 4));
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn load_resizes_to_target() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 40, 30);
        let m = scan_dataset(dir.path(), (32, 16)).unwrap();
        let s = m.load(0).unwrap();
        assert_eq!(s.image.shape(), [1, 3, 32, 16]);
        assert_eq!(s.mask.shape(), [1, 1, 32, 16]);
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!((s.image.at([0, 0, 5, 5]) - 10.0 / 255.0).abs() < 1e-6);
    }

    #[test]
    fn load_rejects_mismatched_native_sizes() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", 8, 8);
        GrayImage::new(6, 8).save(dir.path().join("masks/a.png")).unwrap();
        let m = scan_dataset(dir.path(), (16, 16)).unwrap();
        assert!(matches!(m.load(0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn holdout_split() {
        let m = DatasetManifest {
            root: PathBuf::new(),
            pairs: (0..10)
                .map(|i| SamplePair {
                    stem: i.to_string(),
                    image: PathBuf::new(),
                    mask: PathBuf::new(),
                })
                .collect(),
            target_size: (16, 16),
        };
        let (t, v) = m.split_holdout(0.1);
        assert_eq!((t.len(), v.len()), (9, 1));
        assert_eq!(v.pairs[0].stem, "9");
        let one = m.subset(&[3]);
        let (t, v) = one.split_holdout(0.1);
        assert_eq!((t.len(), v.len()), (1, 1));
    }
}
