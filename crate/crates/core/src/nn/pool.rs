use crate::tensor::{Real, Tensor};

/// 2x2 max pooling with stride 2. Height and width must be even.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even sizes, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for y in 0..oh {
                let r0 = &src[2 * y * w..];
                let r1 = &src[(2 * y + 1) * w..];
                for xx in 0..ow {
                    dst[y * ow + xx] = r0[2 * xx].max(r0[2 * xx + 1]).max(r1[2 * xx]).max(r1[2 * xx + 1]);
                }
            }
        }
    }
    out
}

/// Routes each pooled gradient to the first maximal element of its window.
pub fn max_pool2_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    assert_eq!(dy.shape(), [b, c, oh, ow]);
    let mut dx = Tensor::zeros(x.shape());
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let g = dy.plane(bi, ci);
            let dst = dx.plane_mut(bi, ci);
            for y in 0..oh {
                for xx in 0..ow {
                    let idx = [
                        2 * y * w + 2 * xx,
                        2 * y * w + 2 * xx + 1,
                        (2 * y + 1) * w + 2 * xx,
                        (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = idx[0];
                    for &i in &idx[1..] {
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    dst[best] += g[y * ow + xx];
                }
            }
        }
    }
    dx
}
