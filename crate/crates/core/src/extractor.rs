//! Frozen five-stage generic feature extractor.
//!
//! A backend is a conv pyramid: each stage is a 3x3 (or any odd square)
//! convolution followed by a rectifier, with 2x2 max pooling in front of
//! every stage whose stride doubles. Backends expose no mutable access to
//! their weights once built.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{digest_tensors, Container, NamedTensor};
use crate::error::{Error, Result};
use crate::nn::{conv2d_flops, max_pool2, relu, Conv2d, Init, Param, Parameterized};
use crate::tensor::{FeatureMap, Tensor};

pub const NUM_STAGES: usize = 5;
pub const DEFAULT_STAGE_CHANNELS: [usize; NUM_STAGES] = [32, 64, 128, 256, 320];
pub const STUB_STRIDES: [usize; NUM_STAGES] = [1, 2, 4, 8, 16];
/// Inputs must be divisible by this so every stage size is exact.
pub const INPUT_DIVISOR: usize = 16;

const STUB_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STUB_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Multi-resolution features, one map per stage, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<FeatureMap<f32>>,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
}

/// Header fields stored alongside backend weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendHeader {
    pub name: String,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub input_mean: [f32; 3],
    pub input_std: [f32; 3],
}

#[derive(Debug)]
pub struct ExtractorBackend {
    header: BackendHeader,
    stages: Vec<Conv2d<f32>>,
}

pub fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_DIVISOR) || !w.is_multiple_of(INPUT_DIVISOR) {
        return Err(Error::BadResolution { h, w });
    }
    Ok(())
}

/// Seeded stand-in for pretrained weights with strides [1, 2, 4, 8, 16].
pub fn make_stub_backend(seed: u64, stage_channels: [usize; NUM_STAGES]) -> ExtractorBackend {
    assert!(stage_channels.iter().all(|&c| c > 0), "stage channels must be positive");
    let init = Init::new(seed);
    let mut cin = 3;
    let stages = stage_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let fan_in = (cin * 9) as f64;
            let conv = Conv2d::with_bound(&init, &format!("stage{}", i + 1), cin, c, 3, true, (6.0 / fan_in).sqrt());
            cin = c;
            conv
        })
        .collect();
    ExtractorBackend {
        header: BackendHeader {
            name: format!("stub:{seed}"),
            stage_channels: stage_channels.to_vec(),
            stage_strides: STUB_STRIDES.to_vec(),
            input_mean: STUB_MEAN,
            input_std: STUB_STD,
        },
        stages,
    }
}

/// Load a backend saved in the checkpoint container format.
pub fn load_pretrained_backend(weights_path: &Path) -> Result<ExtractorBackend> {
    if !weights_path.is_file() {
        return Err(Error::BackendUnavailable {
            path: weights_path.to_path_buf(),
        });
    }
    let c = Container::read(weights_path)?;
    let kind = c.header.get("kind").and_then(|k| k.as_str());
    if kind != Some("extractor") {
        return Err(Error::CorruptWeights(format!("expected an extractor container, found kind {kind:?}")));
    }
    ExtractorBackend::from_container(&c, "")
}

impl ExtractorBackend {
    fn validate(header: &BackendHeader) -> Result<()> {
        let (ch, st) = (&header.stage_channels, &header.stage_strides);
        if ch.len() != NUM_STAGES || st.len() != NUM_STAGES {
            return Err(Error::CorruptWeights(format!(
                "expected {NUM_STAGES} stages, header declares {} channels / {} strides",
                ch.len(),
                st.len()
            )));
        }
        if ch.contains(&0) {
            return Err(Error::CorruptWeights("zero-width stage".into()));
        }
        if st[0] != 1 || st.windows(2).any(|w| w[1] != w[0] && w[1] != 2 * w[0]) || st[NUM_STAGES - 1] > INPUT_DIVISOR {
            return Err(Error::CorruptWeights(format!("unsupported stride schedule {st:?}")));
        }
        if header.input_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::CorruptWeights("non-positive normalization std".into()));
        }
        Ok(())
    }

    /// Rebuild from tensors named `<prefix>stage<k>.weight` / `.bias`.
    pub fn from_container(c: &Container, prefix: &str) -> Result<Self> {
        let backend = c
            .header
            .get("backend")
            .cloned()
            .unwrap_or_else(|| c.header.clone());
        let header: BackendHeader =
            serde_json::from_value(backend).map_err(|e| Error::CorruptWeights(format!("backend header: {e}")))?;
        Self::validate(&header)?;
        let mut cin = 3;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, &cout) in header.stage_channels.iter().enumerate() {
            let name = format!("{prefix}stage{}", i + 1);
            let get = |suffix: &str| {
                c.get(&format!("{name}.{suffix}"))
                    .ok_or_else(|| Error::CorruptWeights(format!("missing tensor {name}.{suffix}")))
            };
            let w = get("weight")?;
            let b = get("bias")?;
            if w.shape.len() != 4 || w.shape[0] != cout || w.shape[1] != cin {
                return Err(Error::CorruptWeights(format!(
                    "{name}.weight has shape {:?}, expected ({cout}, {cin}, k, k)",
                    w.shape
                )));
            }
            let conv = Conv2d::from_params(
                Param::new(w.shape.clone(), w.data.clone()),
                Some(Param::new(b.shape.clone(), b.data.clone())),
            )
            .map_err(|e| Error::CorruptWeights(e.to_string()))?;
            stages.push(conv);
            cin = cout;
        }
        Ok(ExtractorBackend { header, stages })
    }

    pub fn header(&self) -> &BackendHeader {
        &self.header
    }

    pub fn name(&self) -> &str {
        &self.header.name
    }

    pub fn stage_channels(&self) -> &[usize] {
        &self.header.stage_channels
    }

    pub fn stage_strides(&self) -> &[usize] {
        &self.header.stage_strides
    }

    /// Always true: nothing outside this module can reach the weights mutably.
    pub fn frozen(&self) -> bool {
        true
    }

    /// Named read-only views of every weight.
    pub fn parameters(&self) -> Vec<(String, &Param<f32>)> {
        let mut out = Vec::new();
        for (i, conv) in self.stages.iter().enumerate() {
            out.push((format!("stage{}.weight", i + 1), &conv.weight));
            if let Some(b) = &conv.bias {
                out.push((format!("stage{}.bias", i + 1), b));
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(|c| c.num_params()).sum()
    }

    /// SHA-256 over every weight tensor.
    pub fn digest(&self) -> String {
        let params = self.parameters();
        digest_tensors(params.iter().map(|(n, p)| (n.as_str(), p.shape.as_slice(), p.value.as_slice())))
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        self.parameters()
            .into_iter()
            .map(|(n, p)| NamedTensor {
                name: format!("{prefix}{n}"),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = serde_json::to_value(&self.header).unwrap();
        header["kind"] = json!("extractor");
        Container {
            header,
            tensors: self.to_tensors(""),
        }
        .write(path)
    }

    pub fn extract(&self, images: &Tensor<f32>) -> Result<FeaturePyramid> {
        let [_, c, h, w] = images.shape();
        check_resolution(h, w)?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, found: c });
        }
        let mut x = self.normalize(images);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 && self.header.stage_strides[i] != self.header.stage_strides[i - 1] {
                x = max_pool2(&x);
            }
            x = relu(&conv.forward(&x)?);
            stages.push(x.clone());
        }
        Ok(FeaturePyramid {
            stages,
            stage_channels: self.header.stage_channels.clone(),
            stage_strides: self.header.stage_strides.clone(),
        })
    }

    fn normalize(&self, images: &Tensor<f32>) -> Tensor<f32> {
        let mut x = images.clone();
        for b in 0..x.batch() {
            for c in 0..3 {
                let (m, s) = (self.header.input_mean[c], self.header.input_std[c]);
                x.plane_mut(b, c).iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        x
    }

    /// Forward FLOPs at (h, w), batch 1: normalization, convolutions, rectifiers and pools.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut total = (3 * h * w) as u64;
        let (mut ch, mut cw) = (h, w);
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 && self.header.stage_strides[i] != self.header.stage_strides[i - 1] {
                ch /= 2;
                cw /= 2;
                total += (conv.in_channels() * ch * cw) as u64;
            }
            total += conv2d_flops(conv.in_channels(), conv.out_channels(), conv.kernel(), ch, cw, true);
            total += (conv.out_channels() * ch * cw) as u64;
        }
        total
    }
}

/// Rows and columns of a near-square grid holding `n` tiles.
pub fn grid_layout(n: usize) -> (usize, usize) {
    let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
    (n.div_ceil(cols), cols)
}

const TILE_GAP: usize = 2;

/// Render the first `n_maps` channels of batch item 0 of a map as a grayscale grid.
/// Each channel is min-max scaled to 0..=255 on its own; constant channels render as 128.
pub fn render_grid(map: &FeatureMap<f32>, n_maps: usize) -> GrayImage {
    let [_, c, h, w] = map.shape();
    let n = n_maps.min(c).max(1);
    let (rows, cols) = grid_layout(n);
    let gw = cols * w + (cols - 1) * TILE_GAP;
    let gh = rows * h + (rows - 1) * TILE_GAP;
    let mut img = GrayImage::new(gw as u32, gh as u32);
    for k in 0..n.min(c) {
        let plane = map.plane(0, k);
        let (lo, hi) = plane
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let (ty, tx) = (k / cols, k % cols);
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                let g = if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round() as u8
                } else {
                    128
                };
                img.put_pixel((tx * (w + TILE_GAP) + x) as u32, (ty * (h + TILE_GAP) + y) as u32, Luma([g]));
            }
        }
    }
    img
}

/// Write `stage<k>.png` grids for every stage of `pyramid`.
pub fn visualize_pyramid(pyramid: &FeaturePyramid, n_maps: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if n_maps == 0 {
        return Err(Error::Config("n_maps must be at least 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    pyramid
        .stages
        .iter()
        .enumerate()
        .map(|(i, map)| {
            let path = out_dir.join(format!("stage{}.png", i + 1));
            render_grid(map, n_maps).save(&path).map_err(|e| {
                Error::io(&path, std::io::Error::other(e.to_string()))
            })?;
            Ok(path)
        })
        .collect()
}
