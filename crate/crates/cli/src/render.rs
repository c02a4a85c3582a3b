//! Padding for arbitrary-size inference and mask/overlay images.

use image::{GrayImage, Luma, Rgb, RgbImage};

use crackseg_core::extractor::INPUT_DIVISOR;
use crackseg_core::Tensor;

pub const OVERLAY_COLOR: [u8; 3] = [255, 0, 0];
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Zero-pad bottom and right up to the next multiple of the input divisor.
pub fn pad_to_divisor(x: &Tensor<f32>) -> Tensor<f32> {
    let [b, c, h, w] = x.shape();
    let ph = h.div_ceil(INPUT_DIVISOR) * INPUT_DIVISOR;
    let pw = w.div_ceil(INPUT_DIVISOR) * INPUT_DIVISOR;
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn([b, c, ph, pw], |[bi, ci, y, xx]| {
        if y < h && xx < w {
            x.at([bi, ci, y, xx])
        } else {
            0.0
        }
    })
}

/// Top-left `h x w` window.
pub fn crop(x: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let [b, c, _, _] = x.shape();
    Tensor::from_fn([b, c, h, w], |idx| x.at(idx))
}

/// First image of a (B, 1, H, W) binary tensor as a 0/255 PNG-ready image.
pub fn mask_image(mask: &Tensor<f32>) -> GrayImage {
    let (h, w) = mask.hw();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.at([0, 0, y as usize, x as usize]) > 0.5 { 255 } else { 0 }])
    })
}

/// Input image with predicted pixels alpha-blended toward the highlight colour.
pub fn overlay_image(image: &Tensor<f32>, mask: &Tensor<f32>) -> RgbImage {
    let (h, w) = image.hw();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let hit = mask.at([0, 0, y, x]) > 0.5;
        Rgb(std::array::from_fn(|c| {
            let v = image.at([0, c, y, x]).clamp(0.0, 1.0) * 255.0;
            let v = if hit {
                (1.0 - OVERLAY_ALPHA) * v + OVERLAY_ALPHA * OVERLAY_COLOR[c] as f32
            } else {
                v
            };
            v.round() as u8
        }))
    })
}
