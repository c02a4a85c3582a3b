//! Per-stage fusion of generic prior features into crack-specific features.
//!
//! * [`ScalingModule`] resizes a generic map to the stage resolution
//!   (bilinear, half-pixel centers) and projects its channels with a
//!   pointwise convolution.
//! * [`InteractionMasks`] turns the channel concatenation `[scaled, crack]`
//!   (2C channels) into two sigmoid masks of C channels each:
//!   `PwConv(2C->C) -> GN -> ReLU`, then two `PwConv(C->C) -> GN -> sigmoid` branches.
//! * [`GatedFusion`] combines them:
//!   `out = crack + mask_general * scaled + mask_crack * crack`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    join, relu, relu_backward, resize_bilinear, sigmoid, sigmoid_backward, Conv2d, GroupNorm, Init, ParamVisitor,
    ParamVisitorMut, Parameterized,
};
use crate::tensor::{FeatureMap, Real};

/// Preferred group count for the mask generator's normalization.
pub const DEFAULT_MASK_GROUPS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    /// Gated attention fusion with a residual path.
    #[default]
    #[serde(rename = "igam")]
    Gated,
    /// Pointwise projection of the channel concatenation.
    #[serde(rename = "concat")]
    Concat,
    /// No fusion; the crack-specific features pass through.
    #[serde(rename = "none")]
    Off,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Off, FusionMode::Concat, FusionMode::Gated];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Gated => "igam",
            FusionMode::Concat => "concat",
            FusionMode::Off => "none",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "igam" => Ok(FusionMode::Gated),
            "concat" => Ok(FusionMode::Concat),
            "none" => Ok(FusionMode::Off),
            _ => Err(Error::Config(format!("unknown fusion mode `{s}` (expected igam, concat or none)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ScalingModule<T> {
    pub conv: Conv2d<T>,
}

impl<T: Real> ScalingModule<T> {
    pub fn new(init: &Init, name: &str, source_channels: usize, target_channels: usize) -> Self {
        ScalingModule {
            conv: Conv2d::new(init, name, source_channels, target_channels, 1, true),
        }
    }

    pub fn source_channels(&self) -> usize {
        self.conv.in_channels()
    }

    pub fn target_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn scale(&self, f_general: &FeatureMap<T>, (th, tw): (usize, usize)) -> Result<FeatureMap<T>> {
        if f_general.channels() != self.source_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.source_channels(),
                found: f_general.channels(),
            });
        }
        self.conv.forward(&resize_bilinear(f_general, th, tw))
    }

    /// Accumulate parameter gradients. The generic input is frozen, so no input gradient is produced.
    pub fn backward(&mut self, f_general: &FeatureMap<T>, dy: &FeatureMap<T>) {
        let (th, tw) = dy.hw();
        let resized = resize_bilinear(f_general, th, tw);
        self.conv.backward(&resized, dy, false);
    }

    /// One op per interpolated element when sizes differ, plus the projection.
    pub fn flops(&self, (h, w): (usize, usize), general_hw: (usize, usize)) -> u64 {
        let interp = if general_hw != (h, w) {
            (self.source_channels() * h * w) as u64
        } else {
            0
        };
        interp + self.conv.flops(h, w)
    }
}

impl<T: Real> Parameterized<T> for ScalingModule<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.conv.visit_mut(prefix, f);
    }
}

/// Mask generator over the concatenated pair.
#[derive(Clone, Debug)]
pub struct InteractionMasks<T> {
    pub reduce: Conv2d<T>,
    pub reduce_norm: GroupNorm<T>,
    pub general: Conv2d<T>,
    pub general_norm: GroupNorm<T>,
    pub crack: Conv2d<T>,
    pub crack_norm: GroupNorm<T>,
}

pub struct MaskCache<T> {
    concat: FeatureMap<T>,
    reduced: FeatureMap<T>,
    hidden: FeatureMap<T>,
    general_pre: FeatureMap<T>,
    crack_pre: FeatureMap<T>,
    mask_general: FeatureMap<T>,
    mask_crack: FeatureMap<T>,
}

impl<T: Real> InteractionMasks<T> {
    /// `groups` falls back to 1 when it does not divide `channels`.
    pub fn new(init: &Init, name: &str, channels: usize, groups: usize) -> Self {
        let g = if groups > 0 && channels.is_multiple_of(groups) { groups } else { 1 };
        InteractionMasks {
            reduce: Conv2d::new(init, &join(name, "reduce"), 2 * channels, channels, 1, true),
            reduce_norm: GroupNorm::new(channels, g),
            general: Conv2d::new(init, &join(name, "general"), channels, channels, 1, true),
            general_norm: GroupNorm::new(channels, g),
            crack: Conv2d::new(init, &join(name, "crack"), channels, channels, 1, true),
            crack_norm: GroupNorm::new(channels, g),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.out_channels()
    }

    pub fn groups(&self) -> usize {
        self.reduce_norm.groups()
    }

    fn check(&self, concat: &FeatureMap<T>) -> Result<()> {
        let c = concat.channels();
        if !c.is_multiple_of(2) || c != 2 * self.channels() {
            return Err(Error::ChannelMismatch {
                expected: 2 * self.channels(),
                found: c,
            });
        }
        Ok(())
    }

    /// `(mask_general, mask_crack)`, each (B, C, H, W) with entries in (0, 1).
    pub fn forward(&self, concat: &FeatureMap<T>) -> Result<(FeatureMap<T>, FeatureMap<T>)> {
        let c = self.forward_train(concat)?;
        Ok((c.mask_general, c.mask_crack))
    }

    pub fn forward_train(&self, concat: &FeatureMap<T>) -> Result<MaskCache<T>> {
        self.check(concat)?;
        let reduced = self.reduce.forward(concat)?;
        let hidden = relu(&self.reduce_norm.forward(&reduced));
        let general_pre = self.general.forward(&hidden)?;
        let crack_pre = self.crack.forward(&hidden)?;
        let mask_general = sigmoid(&self.general_norm.forward(&general_pre));
        let mask_crack = sigmoid(&self.crack_norm.forward(&crack_pre));
        Ok(MaskCache {
            concat: concat.clone(),
            reduced,
            hidden,
            general_pre,
            crack_pre,
            mask_general,
            mask_crack,
        })
    }

    /// Gradient with respect to the concatenated input.
    pub fn backward(&mut self, cache: &MaskCache<T>, d_general: &FeatureMap<T>, d_crack: &FeatureMap<T>) -> FeatureMap<T> {
        let dg = self
            .general_norm
            .backward(&cache.general_pre, &sigmoid_backward(&cache.mask_general, d_general));
        let dc = self
            .crack_norm
            .backward(&cache.crack_pre, &sigmoid_backward(&cache.mask_crack, d_crack));
        let mut dh = self.general.backward(&cache.hidden, &dg, true).unwrap();
        dh.add_assign(&self.crack.backward(&cache.hidden, &dc, true).unwrap());
        let dr = self.reduce_norm.backward(&cache.reduced, &relu_backward(&cache.hidden, &dh));
        self.reduce.backward(&cache.concat, &dr, true).unwrap()
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let elems = (self.channels() * h * w) as u64;
        self.reduce.flops(h, w)
            + self.general.flops(h, w)
            + self.crack.flops(h, w)
            // three norms, one rectifier, two sigmoids
            + 6 * elems
    }
}

impl<T: Real> Parameterized<T> for InteractionMasks<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.reduce_norm.visit(&join(prefix, "reduce_norm"), f);
        self.general.visit(&join(prefix, "general"), f);
        self.general_norm.visit(&join(prefix, "general_norm"), f);
        self.crack.visit(&join(prefix, "crack"), f);
        self.crack_norm.visit(&join(prefix, "crack_norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.reduce_norm.visit_mut(&join(prefix, "reduce_norm"), f);
        self.general.visit_mut(&join(prefix, "general"), f);
        self.general_norm.visit_mut(&join(prefix, "general_norm"), f);
        self.crack.visit_mut(&join(prefix, "crack"), f);
        self.crack_norm.visit_mut(&join(prefix, "crack_norm"), f);
    }
}

/// `crack + mask_general * scaled + mask_crack * crack`, residual added last.
pub fn gated_combine<T: Real>(
    scaled: &FeatureMap<T>,
    crack: &FeatureMap<T>,
    mask_general: &FeatureMap<T>,
    mask_crack: &FeatureMap<T>,
) -> FeatureMap<T> {
    let gated = mask_general.mul(scaled).add(&mask_crack.mul(crack));
    crack.add(&gated)
}

/// One encoder stage's fusion block.
#[derive(Clone, Debug)]
pub struct GatedFusion<T> {
    mode: FusionMode,
    pub scaler: Option<ScalingModule<T>>,
    pub masks: Option<InteractionMasks<T>>,
    pub project: Option<Conv2d<T>>,
}

pub struct FusionCache<T> {
    general: Option<FeatureMap<T>>,
    scaled: Option<FeatureMap<T>>,
    crack: Option<FeatureMap<T>>,
    masks: Option<MaskCache<T>>,
    concat: Option<FeatureMap<T>>,
}

impl<T: Real> GatedFusion<T> {
    pub fn new(init: &Init, name: &str, mode: FusionMode, source_channels: usize, channels: usize, groups: usize) -> Self {
        let scaler = (mode != FusionMode::Off).then(|| ScalingModule::new(init, &join(name, "scaler"), source_channels, channels));
        GatedFusion {
            mode,
            scaler,
            masks: (mode == FusionMode::Gated).then(|| InteractionMasks::new(init, &join(name, "iim"), channels, groups)),
            project: (mode == FusionMode::Concat).then(|| Conv2d::new(init, &join(name, "project"), 2 * channels, channels, 1, true)),
        }
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn fuse(&self, f_general: &FeatureMap<T>, f_crack: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.fuse_train(f_general, f_crack).map(|(out, _)| out)
    }

    /// Forward pass that also returns what [`GatedFusion::backward`] needs.
    pub fn fuse_train(&self, f_general: &FeatureMap<T>, f_crack: &FeatureMap<T>) -> Result<(FeatureMap<T>, FusionCache<T>)> {
        let mut cache = FusionCache {
            general: None,
            scaled: None,
            crack: None,
            masks: None,
            concat: None,
        };
        let Some(scaler) = &self.scaler else {
            return Ok((f_crack.clone(), cache));
        };
        if f_crack.channels() != scaler.target_channels() {
            return Err(Error::ChannelMismatch {
                expected: scaler.target_channels(),
                found: f_crack.channels(),
            });
        }
        if f_general.batch() != f_crack.batch() {
            return Err(Error::ShapeMismatch(format!(
                "batch sizes differ: {} vs {}",
                f_general.batch(),
                f_crack.batch()
            )));
        }
        let scaled = scaler.scale(f_general, f_crack.hw())?;
        let concat = scaled.concat_channels(f_crack)?;
        let out = match self.mode {
            FusionMode::Gated => {
                let mc = self.masks.as_ref().unwrap().forward_train(&concat)?;
                let out = gated_combine(&scaled, f_crack, &mc.mask_general, &mc.mask_crack);
                cache.masks = Some(mc);
                out
            }
            FusionMode::Concat => {
                let out = self.project.as_ref().unwrap().forward(&concat)?;
                cache.concat = Some(concat);
                out
            }
            FusionMode::Off => unreachable!(),
        };
        cache.general = Some(f_general.clone());
        cache.scaled = Some(scaled);
        cache.crack = Some(f_crack.clone());
        Ok((out, cache))
    }

    /// Accumulates parameter gradients and returns the gradient for the crack-specific input.
    pub fn backward(&mut self, cache: &FusionCache<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
        let (Some(general), Some(scaled), Some(crack)) = (&cache.general, &cache.scaled, &cache.crack) else {
            return dy.clone();
        };
        let c = crack.channels();
        let (d_scaled, d_crack) = match self.mode {
            FusionMode::Gated => {
                let mc = cache.masks.as_ref().unwrap();
                let d_mask_general = dy.mul(scaled);
                let d_mask_crack = dy.mul(crack);
                let mut d_scaled = dy.mul(&mc.mask_general);
                let mut d_crack = dy.add(&dy.mul(&mc.mask_crack));
                let d_concat = self.masks.as_mut().unwrap().backward(mc, &d_mask_general, &d_mask_crack);
                let (ds, dc) = d_concat.split_channels(c);
                d_scaled.add_assign(&ds);
                d_crack.add_assign(&dc);
                (d_scaled, d_crack)
            }
            FusionMode::Concat => {
                let concat = cache.concat.as_ref().unwrap();
                self.project
                    .as_mut()
                    .unwrap()
                    .backward(concat, dy, true)
                    .unwrap()
                    .split_channels(c)
            }
            FusionMode::Off => unreachable!(),
        };
        self.scaler.as_mut().unwrap().backward(general, &d_scaled);
        d_crack
    }

    /// FLOPs at stage size (h, w) given the generic map's size and channel count.
    pub fn flops(&self, h: usize, w: usize, general_hw: (usize, usize)) -> u64 {
        let Some(scaler) = &self.scaler else { return 0 };
        let elems = (scaler.target_channels() * h * w) as u64;
        let base = scaler.flops((h, w), general_hw);
        match self.mode {
            // two gating products, two additions
            FusionMode::Gated => base + self.masks.as_ref().unwrap().flops(h, w) + 4 * elems,
            FusionMode::Concat => base + self.project.as_ref().unwrap().flops(h, w),
            FusionMode::Off => 0,
        }
    }
}

impl<T: Real> Parameterized<T> for GatedFusion<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        if let Some(s) = &self.scaler {
            s.visit(&join(prefix, "scaler"), f);
        }
        if let Some(m) = &self.masks {
            m.visit(&join(prefix, "iim"), f);
        }
        if let Some(p) = &self.project {
            p.visit(&join(prefix, "project"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        if let Some(s) = &mut self.scaler {
            s.visit_mut(&join(prefix, "scaler"), f);
        }
        if let Some(m) = &mut self.masks {
            m.visit_mut(&join(prefix, "iim"), f);
        }
        if let Some(p) = &mut self.project {
            p.visit_mut(&join(prefix, "project"), f);
        }
    }
}
