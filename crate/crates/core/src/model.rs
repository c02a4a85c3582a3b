//! Encoder-decoder segmentation network with per-stage fusion of frozen
//! generic features.
//!
//! Encoder stage i: `[maxpool] -> DoubleConv -> fusion(pyramid[i], .)`. The
//! fused map feeds both the next stage and the matching skip connection.
//! Decoder level i: `bilinear x2 -> concat(skip_i) -> DoubleConv`, then a
//! pointwise head produces one logit per pixel.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::digest_tensors;
use crate::error::{Error, Result};
use crate::extractor::{check_resolution, ExtractorBackend, NUM_STAGES};
use crate::fusion::{FusionCache, FusionMode, GatedFusion, DEFAULT_MASK_GROUPS};
use crate::nn::{
    join, max_pool2, max_pool2_backward, relu, relu_backward, resize_bilinear, resize_bilinear_backward, sigmoid,
    Conv2d, GroupNorm, Init, Param, ParamVisitor, ParamVisitorMut, Parameterized,
};
use crate::tensor::{FeatureMap, Real, Tensor};

pub const DEFAULT_BASE_CHANNELS: usize = 64;
/// Preferred group count for the encoder/decoder normalization layers.
pub const BLOCK_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub fusion_mode: FusionMode,
    pub mask_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: DEFAULT_BASE_CHANNELS,
            fusion_mode: FusionMode::Gated,
            mask_groups: DEFAULT_MASK_GROUPS,
        }
    }
}

impl ModelConfig {
    /// `[b, 2b, 4b, 8b, 16b]`
    pub fn encoder_channels(&self) -> [usize; NUM_STAGES] {
        std::array::from_fn(|i| self.base_channels << i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.mask_groups == 0 {
            return Err(Error::Config("mask_groups must be positive".into()));
        }
        Ok(())
    }
}

/// Two `conv3x3 -> GroupNorm -> ReLU` blocks.
#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    conv1: Conv2d<T>,
    norm1: GroupNorm<T>,
    conv2: Conv2d<T>,
    norm2: GroupNorm<T>,
}

struct DoubleConvCache<T> {
    input: FeatureMap<T>,
    pre1: FeatureMap<T>,
    act1: FeatureMap<T>,
    pre2: FeatureMap<T>,
    out: FeatureMap<T>,
}

impl<T: Real> DoubleConv<T> {
    fn new(init: &Init, name: &str, cin: usize, cout: usize) -> Self {
        let g = GroupNorm::<T>::groups_for(cout, BLOCK_GROUPS);
        DoubleConv {
            conv1: Conv2d::new(init, &join(name, "conv1"), cin, cout, 3, false),
            norm1: GroupNorm::new(cout, g),
            conv2: Conv2d::new(init, &join(name, "conv2"), cout, cout, 3, false),
            norm2: GroupNorm::new(cout, g),
        }
    }

    fn forward(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let a = relu(&self.norm1.forward(&self.conv1.forward(x)?));
        Ok(relu(&self.norm2.forward(&self.conv2.forward(&a)?)))
    }

    fn forward_train(&self, x: &FeatureMap<T>) -> Result<DoubleConvCache<T>> {
        let pre1 = self.conv1.forward(x)?;
        let act1 = relu(&self.norm1.forward(&pre1));
        let pre2 = self.conv2.forward(&act1)?;
        let out = relu(&self.norm2.forward(&pre2));
        Ok(DoubleConvCache {
            input: x.clone(),
            pre1,
            act1,
            pre2,
            out,
        })
    }

    fn backward(&mut self, c: &DoubleConvCache<T>, dy: &FeatureMap<T>, need_dx: bool) -> Option<FeatureMap<T>> {
        let d = self.norm2.backward(&c.pre2, &relu_backward(&c.out, dy));
        let d = self.conv2.backward(&c.act1, &d, true).unwrap();
        let d = self.norm1.backward(&c.pre1, &relu_backward(&c.act1, &d));
        self.conv1.backward(&c.input, &d, need_dx)
    }

    fn flops(&self, h: usize, w: usize) -> u64 {
        let elems = (self.conv1.out_channels() * h * w) as u64;
        self.conv1.flops(h, w) + self.conv2.flops(h, w) + 4 * elems
    }
}

impl<T: Real> Parameterized<T> for DoubleConv<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput<T = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

pub struct ForwardCache<T = f32> {
    encoder: Vec<DoubleConvCache<T>>,
    fusion: Vec<FusionCache<T>>,
    fused: Vec<FeatureMap<T>>,
    decoder: Vec<DoubleConvCache<T>>,
    head_input: FeatureMap<T>,
}

/// `name -> (shape, values)` source for [`SegmentationModel::load_parameters`].
pub type ParamLookup<'a, T> = dyn Fn(&str) -> Option<(Vec<usize>, Vec<T>)> + 'a;

#[derive(Clone, Debug)]
pub struct SegmentationModel<T = f32> {
    config: ModelConfig,
    extractor: Arc<ExtractorBackend>,
    encoder: Vec<DoubleConv<T>>,
    fusion: Vec<GatedFusion<T>>,
    /// `decoder[i]` restores encoder stage i's resolution.
    decoder: Vec<DoubleConv<T>>,
    head: Conv2d<T>,
}

pub fn build_model(cfg: &ModelConfig, extractor: Arc<ExtractorBackend>, seed: u64) -> Result<SegmentationModel> {
    build_model_as(cfg, extractor, seed)
}

/// [`build_model`] at an arbitrary precision; weights are identical up to rounding.
pub fn build_model_as<T: Real>(
    cfg: &ModelConfig,
    extractor: Arc<ExtractorBackend>,
    seed: u64,
) -> Result<SegmentationModel<T>> {
    cfg.validate()?;
    if extractor.stage_channels().len() != NUM_STAGES {
        return Err(Error::Config(format!(
            "extractor has {} stages, expected {NUM_STAGES}",
            extractor.stage_channels().len()
        )));
    }
    let init = Init::new(seed);
    let ch = cfg.encoder_channels();
    let encoder = (0..NUM_STAGES)
        .map(|i| {
            let cin = if i == 0 { 3 } else { ch[i - 1] };
            DoubleConv::new(&init, &format!("encoder.stage{}", i + 1), cin, ch[i])
        })
        .collect();
    let fusion = (0..NUM_STAGES)
        .map(|i| {
            GatedFusion::new(
                &init,
                &format!("fusion.stage{}", i + 1),
                cfg.fusion_mode,
                extractor.stage_channels()[i],
                ch[i],
                cfg.mask_groups,
            )
        })
        .collect();
    let decoder = (0..NUM_STAGES - 1)
        .map(|i| DoubleConv::new(&init, &format!("decoder.stage{}", i + 1), ch[i + 1] + ch[i], ch[i]))
        .collect();
    let head = Conv2d::new(&init, "head", ch[0], 1, 1, true);
    Ok(SegmentationModel {
        config: cfg.clone(),
        extractor,
        encoder,
        fusion,
        decoder,
        head,
    })
}

impl<T: Real> SegmentationModel<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn extractor(&self) -> &Arc<ExtractorBackend> {
        &self.extractor
    }

    fn pyramid(&self, images: &Tensor<f32>) -> Result<Option<Vec<FeatureMap<T>>>> {
        if self.config.fusion_mode == FusionMode::Off {
            return Ok(None);
        }
        let p = self.extractor.extract(images)?;
        Ok(Some(p.stages.iter().map(|s| s.cast()).collect()))
    }

    fn check_input(images: &Tensor<f32>) -> Result<()> {
        let [_, c, h, w] = images.shape();
        check_resolution(h, w)?;
        if c != 3 {
            return Err(Error::ChannelMismatch { expected: 3, found: c });
        }
        Ok(())
    }

    /// Inference forward pass; keeps no intermediate activations.
    pub fn forward(&self, images: &Tensor<f32>) -> Result<SegmentationOutput<T>> {
        Self::check_input(images)?;
        let pyramid = self.pyramid(images)?;
        let x: Tensor<T> = images.cast();
        let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let e = match skips.last() {
                None => self.encoder[i].forward(&x)?,
                Some(prev) => self.encoder[i].forward(&max_pool2(prev))?,
            };
            let fused = match &pyramid {
                Some(p) => self.fusion[i].fuse(&p[i], &e)?,
                None => e,
            };
            skips.push(fused);
        }
        let mut d = skips.pop().unwrap();
        for i in (0..NUM_STAGES - 1).rev() {
            let skip = &skips[i];
            let up = resize_bilinear(&d, skip.height(), skip.width());
            d = self.decoder[i].forward(&up.concat_channels(skip)?)?;
        }
        let logits = self.head.forward(&d)?;
        Ok(SegmentationOutput {
            probabilities: sigmoid(&logits),
            logits,
        })
    }

    /// Forward pass that records the activations [`SegmentationModel::backward`] needs.
    pub fn forward_train(&self, images: &Tensor<f32>) -> Result<(SegmentationOutput<T>, ForwardCache<T>)> {
        Self::check_input(images)?;
        let pyramid = self.pyramid(images)?;
        let x: Tensor<T> = images.cast();
        let mut encoder = Vec::with_capacity(NUM_STAGES);
        let mut fusion = Vec::with_capacity(NUM_STAGES);
        let mut fused: Vec<FeatureMap<T>> = Vec::with_capacity(NUM_STAGES);
        for i in 0..NUM_STAGES {
            let ec = match fused.last() {
                None => self.encoder[i].forward_train(&x)?,
                Some(prev) => self.encoder[i].forward_train(&max_pool2(prev))?,
            };
            let (f, fc) = match &pyramid {
                Some(p) => self.fusion[i].fuse_train(&p[i], &ec.out)?,
                None => self.fusion[i].fuse_train(&ec.out, &ec.out)?,
            };
            encoder.push(ec);
            fusion.push(fc);
            fused.push(f);
        }
        let mut decoder: Vec<DoubleConvCache<T>> = Vec::with_capacity(NUM_STAGES - 1);
        for i in (0..NUM_STAGES - 1).rev() {
            let below = decoder.last().map_or(&fused[NUM_STAGES - 1], |c| &c.out);
            let up = resize_bilinear(below, fused[i].height(), fused[i].width());
            let dc = self.decoder[i].forward_train(&up.concat_channels(&fused[i])?)?;
            decoder.push(dc);
        }
        // Stored finest-first to match `self.decoder`.
        decoder.reverse();
        let head_input = decoder[0].out.clone();
        let logits = self.head.forward(&head_input)?;
        let out = SegmentationOutput {
            probabilities: sigmoid(&logits),
            logits,
        };
        Ok((
            out,
            ForwardCache {
                encoder,
                fusion,
                fused,
                decoder,
                head_input,
            },
        ))
    }

    /// Accumulate gradients of every trainable parameter given dLoss/dLogits.
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_logits: &Tensor<T>) {
        let mut d = self.head.backward(&cache.head_input, d_logits, true).unwrap();
        let mut d_fused: Vec<Option<FeatureMap<T>>> = vec![None; NUM_STAGES];
        for i in 0..NUM_STAGES - 1 {
            let d_cat = self.decoder[i].backward(&cache.decoder[i], &d, true).unwrap();
            let below = &cache.fused[i + 1];
            let (d_up, d_skip) = d_cat.split_channels(below.channels());
            d_fused[i] = Some(d_skip);
            d = resize_bilinear_backward(&d_up, below.height(), below.width());
        }
        d_fused[NUM_STAGES - 1] = Some(d);
        for i in (0..NUM_STAGES).rev() {
            let g = d_fused[i].take().unwrap();
            let d_enc = self.fusion[i].backward(&cache.fusion[i], &g);
            let d_in = self.encoder[i].backward(&cache.encoder[i], &d_enc, i > 0);
            if let Some(d_in) = d_in {
                let d_prev = max_pool2_backward(&cache.fused[i - 1], &d_in);
                d_fused[i - 1].as_mut().unwrap().add_assign(&d_prev);
            }
        }
    }

    /// Names of the frozen extractor weights as they appear in checkpoints.
    pub fn extractor_parameter_names(&self) -> Vec<String> {
        self.extractor
            .parameters()
            .into_iter()
            .map(|(n, _)| format!("extractor.{n}"))
            .collect()
    }

    /// Named trainable tensors; never includes extractor weights.
    pub fn trainable_parameters(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.clone())));
        out
    }

    /// Analytic forward FLOPs at (h, w), batch 1, including the extractor when fusion is on.
    pub fn flops(&self, h: usize, w: usize) -> Result<u64> {
        check_resolution(h, w)?;
        let ch = self.config.encoder_channels();
        let mut total = 0u64;
        let fusing = self.config.fusion_mode != FusionMode::Off;
        if fusing {
            total += self.extractor.flops(h, w);
        }
        let sizes: Vec<(usize, usize)> = (0..NUM_STAGES).map(|i| (h >> i, w >> i)).collect();
        let strides = self.extractor.stage_strides();
        for i in 0..NUM_STAGES {
            let (sh, sw) = sizes[i];
            if i > 0 {
                total += (ch[i - 1] * sh * sw) as u64;
            }
            total += self.encoder[i].flops(sh, sw);
            if fusing {
                let general_hw = (h / strides[i], w / strides[i]);
                total += self.fusion[i].flops(sh, sw, general_hw);
            }
        }
        for i in 0..NUM_STAGES - 1 {
            let (sh, sw) = sizes[i];
            total += (ch[i + 1] * sh * sw) as u64;
            total += self.decoder[i].flops(sh, sw);
        }
        total += self.head.flops(h, w) + (h * w) as u64;
        Ok(total)
    }

    /// Replace trainable weights by name. Every trainable tensor must be provided with a matching shape.
    pub fn load_parameters(&mut self, lookup: &ParamLookup<'_, T>) -> Result<()> {
        let mut err = None;
        self.visit_mut("", &mut |n, p| {
            if err.is_some() {
                return;
            }
            match lookup(n) {
                Some((shape, data)) if shape == p.shape && data.len() == p.value.len() => p.value = data,
                Some((shape, _)) => {
                    err = Some(Error::CorruptWeights(format!(
                        "tensor {n} has shape {shape:?}, model expects {:?}",
                        p.shape
                    )))
                }
                None => err = Some(Error::CorruptWeights(format!("missing tensor {n}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

impl SegmentationModel<f32> {
    /// Binary mask `probabilities >= threshold`.
    pub fn predict_mask(&self, images: &Tensor<f32>, threshold: f32) -> Result<Tensor<f32>> {
        check_threshold(threshold)?;
        Ok(threshold_mask(&self.forward(images)?.probabilities, threshold))
    }

    /// SHA-256 over every trainable tensor.
    pub fn digest(&self) -> String {
        let mut items: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
        self.visit("", &mut |n, p| items.push((n.to_string(), p.shape.clone(), p.value.clone())));
        digest_tensors(items.iter().map(|(n, s, v)| (n.as_str(), s.as_slice(), v.as_slice())))
    }
}

impl<T: Real> Parameterized<T> for SegmentationModel<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("encoder.stage{}", i + 1)), f);
        }
        for (i, b) in self.fusion.iter().enumerate() {
            b.visit(&join(prefix, &format!("fusion.stage{}", i + 1)), f);
        }
        for (i, b) in self.decoder.iter().enumerate() {
            b.visit(&join(prefix, &format!("decoder.stage{}", i + 1)), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("encoder.stage{}", i + 1)), f);
        }
        for (i, b) in self.fusion.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("fusion.stage{}", i + 1)), f);
        }
        for (i, b) in self.decoder.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("decoder.stage{}", i + 1)), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn check_threshold(threshold: f32) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} must lie in (0, 1)")));
    }
    Ok(())
}

/// `1` where `probs >= threshold`, else `0`.
pub fn threshold_mask(probs: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    probs.map(|p| if p >= threshold { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::extractor::make_stub_backend;

    fn extractor() -> Arc<ExtractorBackend> {
        Arc::new(make_stub_backend(0, [4, 4, 8, 8, 8]))
    }

    fn cfg(base: usize, mode: FusionMode) -> ModelConfig {
        ModelConfig {
            base_channels: base,
            fusion_mode: mode,
            mask_groups: 4,
        }
    }

    fn image(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| ((c * 7 + y * 3 + x * 5) % 19) as f32 / 19.0)
    }

    #[test]
    fn widths_follow_base() {
        assert_eq!(ModelConfig::default().encoder_channels(), [64, 128, 256, 512, 1024]);
    }

    #[test]
    fn output_matches_input_size() {
        let m = build_model(&cfg(4, FusionMode::Gated), extractor(), 0).unwrap();
        for (h, w) in [(32, 32), (32, 48), (64, 16)] {
            let out = m.forward(&image(h, w)).unwrap();
            assert_eq!(out.probabilities.shape(), [1, 1, h, w]);
            assert!(out.probabilities.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        assert!(matches!(m.forward(&image(40, 40)), Err(Error::BadResolution { .. })));
    }

    #[test]
    fn training_forward_equals_inference_forward() {
        for mode in FusionMode::ALL {
            let m = build_model(&cfg(4, mode), extractor(), 1).unwrap();
            let x = image(32, 32);
            let (a, _) = m.forward_train(&x).unwrap();
            assert_eq!(a, m.forward(&x).unwrap(), "{mode}");
        }
    }

    /// Independently enumerated parameter names of a plain five-level U-Net.
    fn plain_unet_names() -> BTreeSet<String> {
        let block = |p: &str| {
            ["conv1.weight", "norm1.gamma", "norm1.beta", "conv2.weight", "norm2.gamma", "norm2.beta"]
                .iter()
                .map(|s| format!("{p}.{s}"))
                .collect::<Vec<_>>()
        };
        let mut names = BTreeSet::new();
        for k in 1..=5 {
            names.extend(block(&format!("encoder.stage{k}")));
        }
        for k in 1..=4 {
            names.extend(block(&format!("decoder.stage{k}")));
        }
        names.insert("head.weight".into());
        names.insert("head.bias".into());
        names
    }

    #[test]
    fn parameter_sets() {
        let off = build_model(&cfg(4, FusionMode::Off), extractor(), 0).unwrap();
        let gated = build_model(&cfg(4, FusionMode::Gated), extractor(), 0).unwrap();
        let off_names: BTreeSet<String> = off.param_names("").into_iter().collect();
        let gated_names: BTreeSet<String> = gated.param_names("").into_iter().collect();
        assert_eq!(off_names, plain_unet_names());
        assert!(off_names.is_subset(&gated_names) && off_names.len() < gated_names.len());
        let ext: BTreeSet<String> = gated.extractor_parameter_names().into_iter().collect();
        assert!(ext.is_disjoint(&gated_names));
        let other_seed = build_model(&cfg(4, FusionMode::Gated), extractor(), 9).unwrap();
        assert_eq!(gated.num_params(), other_seed.num_params());
        assert_ne!(gated.digest(), other_seed.digest());
        assert_eq!(gated.digest(), build_model(&cfg(4, FusionMode::Gated), extractor(), 0).unwrap().digest());
    }

    #[test]
    fn baseline_ignores_extractor_weights() {
        let a = build_model(&cfg(4, FusionMode::Off), extractor(), 0).unwrap();
        let b = build_model(&cfg(4, FusionMode::Off), Arc::new(make_stub_backend(5, [4, 4, 8, 8, 8])), 0).unwrap();
        let x = image(32, 32);
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn threshold_rules() {
        let p = Tensor::full([1, 1, 2, 2], 0.7f32);
        assert!(threshold_mask(&p, 0.5).data().iter().all(|&v| v == 1.0));
        assert!(threshold_mask(&p, 0.9).data().iter().all(|&v| v == 0.0));
        let half = Tensor::full([1, 1, 2, 2], 0.5f32);
        assert!(threshold_mask(&half, 0.5).data().iter().all(|&v| v == 1.0));
        assert!(check_threshold(0.0).is_err() && check_threshold(1.0).is_err());
    }

    #[test]
    fn backward_matches_directional_derivative() {
        // End-to-end wiring in f64 along one random direction over all trainable weights.
        use rand::{Rng, SeedableRng};
        for mode in FusionMode::ALL {
            let mut m = build_model_as::<f64>(&cfg(4, mode), extractor(), 3).unwrap();
            let x = image(32, 32);
            let proj = Tensor::from_fn([1, 1, 32, 32], |[_, _, y, x]| ((y * 32 + x) as f64 * 0.37).sin());
            let loss = |m: &SegmentationModel<f64>| -> f64 {
                let l = m.forward(&x).unwrap().logits;
                l.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = m.forward_train(&x).unwrap();
            m.zero_grad();
            m.backward(&cache, &proj);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let mut dirs: Vec<Vec<f64>> = Vec::new();
            let mut analytic = 0.0;
            m.visit("", &mut |_, p| {
                let v: Vec<f64> = (0..p.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
                analytic += v.iter().zip(&p.grad).map(|(a, g)| a * g).sum::<f64>();
                dirs.push(v);
            });
            let step = |m: &mut SegmentationModel<f64>, s: f64| {
                let mut i = 0;
                m.visit_mut("", &mut |_, p| {
                    for (w, d) in p.value.iter_mut().zip(&dirs[i]) {
                        *w += s * d;
                    }
                    i += 1;
                });
            };
            let eps = 1e-7;
            step(&mut m, eps);
            let up = loss(&m);
            step(&mut m, -2.0 * eps);
            let dn = loss(&m);
            let numeric = (up - dn) / (2.0 * eps);
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs());
            assert!(rel < 1e-6, "{mode}: {numeric} vs {analytic}");
        }
    }
}
