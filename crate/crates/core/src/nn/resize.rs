use crate::tensor::{Real, Tensor};

/// Per-output-index source taps `(i0, i1, w0, w1)` with half-pixel centers.
fn taps<T: Real>(inp: usize, out: usize) -> Vec<(usize, usize, T, T)> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let l = src - i0 as f64;
            (i0, i1, T::lit(1.0 - l), T::lit(l))
        })
        .collect()
}

/// Bilinear resize to (oh, ow) with half-pixel center alignment and edge clamping.
/// Matching sizes return an exact copy.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    dst[y * ow + xx] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back to an (h, w) input.
pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [b, c, oh, ow] = dy.shape();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ty = taps::<T>(h, oh);
    let tx = taps::<T>(w, ow);
    let mut dx = Tensor::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let g = dy.plane(bi, ci);
            let dst = dx.plane_mut(bi, ci);
            for (y, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (xx, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let v = g[y * ow + xx];
                    dst[y0 * w + x0] += v * wy0 * wx0;
                    dst[y0 * w + x1] += v * wy0 * wx1;
                    dst[y1 * w + x0] += v * wy1 * wx0;
                    dst[y1 * w + x1] += v * wy1 * wx1;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_2x_known_values() {
        // Half-pixel centers: 1-D [0, 1] -> [0, 0.25, 0.75, 1].
        let x = Tensor::<f64>::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, 1, 4);
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn backward_is_adjoint() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |[_, c, y, x]| ((c * 3 + y * 5 + x) as f64).sin());
        let g = Tensor::<f64>::from_fn([1, 2, 7, 4], |[_, c, y, x]| ((c + y * 2 + x * 3) as f64).cos());
        let lhs = resize_bilinear(&x, 7, 4).mul(&g).sum();
        let rhs = x.mul(&resize_bilinear_backward(&g, 3, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |[_, _, y, x]| (y * 4 + x) as f32);
        assert_eq!(resize_bilinear(&x, 4, 4), x);
    }
}
