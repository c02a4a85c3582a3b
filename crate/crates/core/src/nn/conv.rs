use super::param::{join, Init, Param, ParamVisitor, ParamVisitorMut, Parameterized};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Upper bound on im2col scratch per chunk, in elements.
const COL_BUDGET: usize = 1 << 22;
/// Preferred number of output columns per chunk.
const CHUNK_COLS: usize = 16384;

/// Stride-1 "same" convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
}

impl<T: Real> Conv2d<T> {
    /// Fan-in uniform initialization, bound `1/sqrt(in_ch * k * k)`.
    pub fn new(init: &Init, name: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Self::with_bound(init, name, in_ch, out_ch, kernel, bias, 1.0 / fan_in.sqrt())
    }

    pub fn with_bound(
        init: &Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        bound: f64,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let weight = init.uniform(&join(name, "weight"), vec![out_ch, in_ch, kernel, kernel], bound);
        let bias = bias.then(|| init.uniform(&join(name, "bias"), vec![out_ch], bound));
        Conv2d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn from_params(weight: Param<T>, bias: Option<Param<T>>) -> Result<Self> {
        if weight.shape.len() != 4 || weight.shape[2] != weight.shape[3] || weight.shape[2].is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!(
                "convolution weight must be (out, in, k, k) with odd k, got {:?}",
                weight.shape
            )));
        }
        if let Some(b) = &bias {
            if b.shape != [weight.shape[0]] {
                return Err(Error::ShapeMismatch(format!(
                    "bias shape {:?} does not match {} output channels",
                    b.shape, weight.shape[0]
                )));
            }
        }
        Ok(Conv2d {
            in_ch: weight.shape[1],
            out_ch: weight.shape[0],
            kernel: weight.shape[2],
            weight,
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.in_ch {
            return Err(Error::ChannelMismatch {
                expected: self.in_ch,
                found: x.channels(),
            });
        }
        Ok(conv_same(
            x,
            &self.weight.value,
            self.bias.as_ref().map(|b| b.value.as_slice()),
            self.out_ch,
            self.kernel,
        ))
    }

    /// Accumulate weight/bias gradients for `dy` and return the input gradient when asked.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let [b, _, h, w] = x.shape();
        assert_eq!(dy.shape(), [b, self.out_ch, h, w], "conv backward shape");
        let n = h * w;

        if let Some(bias) = &mut self.bias {
            for bi in 0..b {
                for (co, g) in bias.grad.iter_mut().enumerate() {
                    *g += dy.plane(bi, co).iter().copied().sum::<T>();
                }
            }
        }

        let k = self.kernel;
        let kk = self.in_ch * k * k;
        let rows = rows_per_chunk(kk, h, w);
        let chunks = h.div_ceil(rows);
        let cout = self.out_ch;
        for bi in 0..b {
            let xi = x.item(bi);
            let dyi = dy.item(bi);
            let partials = par::map_indexed(chunks, |ci| {
                let y0 = ci * rows;
                let y1 = (y0 + rows).min(h);
                let nc = (y1 - y0) * w;
                let dy_view = MatRef::strided(&dyi[y0 * w..], cout, nc, n);
                // Both operands row-major keeps GEMM packing on its fast path.
                let col_t = im2col_t(xi, self.in_ch, h, w, k, y0, y1);
                let mut part = vec![T::zero(); cout * kk];
                gemm(dy_view, MatRef::row_major(&col_t, nc, kk), T::zero(), &mut part, kk);
                part
            });
            for part in partials {
                self.weight
                    .grad
                    .iter_mut()
                    .zip(part)
                    .for_each(|(g, p)| *g += p);
            }
        }

        need_dx.then(|| {
            let flipped = flip_transpose(&self.weight.value, self.out_ch, self.in_ch, k);
            conv_same(dy, &flipped, None, self.in_ch, k)
        })
    }

    /// FLOPs for one forward pass on an (h, w) input, batch 1.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        conv2d_flops(self.in_ch, self.out_ch, self.kernel, h, w, self.bias.is_some())
    }
}

impl<T: Real> Parameterized<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Multiply-accumulates count as two FLOPs; a bias adds one FLOP per output element.
pub fn conv2d_flops(cin: usize, cout: usize, k: usize, hout: usize, wout: usize, bias: bool) -> u64 {
    let out = (cout * hout * wout) as u64;
    2 * (k * k * cin) as u64 * out + if bias { out } else { 0 }
}

fn rows_per_chunk(kk: usize, h: usize, w: usize) -> usize {
    let by_budget = COL_BUDGET / (kk * w).max(1);
    let by_cols = CHUNK_COLS / w.max(1);
    by_budget.min(by_cols).clamp(1, h.max(1))
}

/// Stride-1 convolution with zero padding `k / 2`; weights are (cout, cin, k, k).
fn conv_same<T: Real>(x: &Tensor<T>, weight: &[T], bias: Option<&[T]>, cout: usize, k: usize) -> Tensor<T> {
    let [b, cin, h, w] = x.shape();
    let n = h * w;
    let kk = cin * k * k;
    let wmat = MatRef::row_major(weight, cout, kk);
    let mut out = Tensor::zeros([b, cout, h, w]);
    let rows = rows_per_chunk(kk, h, w);
    let chunks = h.div_ceil(rows);
    for bi in 0..b {
        let xi = x.item(bi);
        let blocks = par::map_indexed(chunks, |ci| {
            let y0 = ci * rows;
            let y1 = (y0 + rows).min(h);
            let nc = (y1 - y0) * w;
            let mut block = vec![T::zero(); cout * nc];
            if let Some(bias) = bias {
                for (co, row) in block.chunks_mut(nc).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if k == 1 {
                gemm(wmat, MatRef::strided(&xi[y0 * w..], kk, nc, n), beta, &mut block, nc);
            } else {
                let col = im2col(xi, cin, h, w, k, y0, y1);
                gemm(wmat, MatRef::row_major(&col, kk, nc), beta, &mut block, nc);
            }
            block
        });
        let oi = out.item_mut(bi);
        for (ci, block) in blocks.iter().enumerate() {
            let y0 = ci * rows;
            let nc = block.len() / cout;
            for co in 0..cout {
                oi[co * n + y0 * w..co * n + y0 * w + nc].copy_from_slice(&block[co * nc..(co + 1) * nc]);
            }
        }
    }
    out
}

/// Transposed patch matrix ((y1-y0)*w, cin*k*k): one row of taps per output pixel.
fn im2col_t<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize) -> Vec<T> {
    let pad = k / 2;
    let kk = cin * k * k;
    let mut col = vec![T::zero(); (y1 - y0) * w * kk];
    for y in y0..y1 {
        for ky in 0..k {
            let sy = y + ky;
            if sy < pad || sy - pad >= h {
                continue;
            }
            let sy = sy - pad;
            for ci in 0..cin {
                let src = &x[(ci * h + sy) * w..(ci * h + sy + 1) * w];
                for xo in 0..w {
                    let row = &mut col[((y - y0) * w + xo) * kk + (ci * k + ky) * k..][..k];
                    for (kx, v) in row.iter_mut().enumerate() {
                        let sx = xo + kx;
                        if sx >= pad && sx - pad < w {
                            *v = src[sx - pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Patch matrix (cin*k*k, (y1-y0)*w) for output rows `y0..y1` of one image.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, y0: usize, y1: usize) -> Vec<T> {
    let pad = k / 2;
    let nc = (y1 - y0) * w;
    let mut col = vec![T::zero(); cin * k * k * nc];
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let dst = &mut col[r * nc..(r + 1) * nc];
                // Valid output x range where the tap lands inside the row.
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(w);
                if x_lo >= x_hi {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + ky;
                    if sy < pad || sy - pad >= h {
                        continue;
                    }
                    let sy = sy - pad;
                    let d = (y - y0) * w;
                    let s = sy * w + x_lo + kx - pad;
                    dst[d + x_lo..d + x_hi].copy_from_slice(&plane[s..s + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// (cout, cin, k, k) -> (cin, cout, k, k) with both spatial axes reversed.
fn flip_transpose<T: Real>(w: &[T], cout: usize, cin: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for i in 0..k {
                for j in 0..k {
                    out[((ci * cout + co) * k + (k - 1 - i)) * k + (k - 1 - j)] = w[((co * cin + ci) * k + i) * k + j];
                }
            }
        }
    }
    out
}
