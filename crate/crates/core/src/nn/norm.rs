use super::param::{join, Param, ParamVisitor, ParamVisitorMut, Parameterized};
use crate::par;
use crate::tensor::{Real, Tensor};

const EPS: f64 = 1e-5;

/// Group normalization with per-channel affine scale and shift.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    groups: usize,
}

impl<T: Real> GroupNorm<T> {
    /// `groups` must divide `channels`; scale starts at 1 and shift at 0.
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "{groups} groups do not divide {channels} channels");
        GroupNorm {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            groups,
        }
    }

    /// Largest of `preferred`, 8, 4, 2, 1 that divides `channels`.
    pub fn groups_for(channels: usize, preferred: usize) -> usize {
        [preferred, 8, 4, 2, 1]
            .into_iter()
            .find(|&g| g > 0 && g <= channels && channels.is_multiple_of(g))
            .unwrap_or(1)
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn stats(xs: &[T]) -> (T, T) {
        let m = xs.len() as f64;
        let mean = xs.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m;
        let var = xs
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap() - mean;
                d * d
            })
            .sum::<f64>()
            / m;
        (T::lit(mean), T::lit(1.0 / (var + EPS).sqrt()))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [_, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "group norm channel count");
        let cpg = c / self.groups;
        let glen = cpg * h * w;
        let plane = h * w;
        let mut out = x.clone();
        let groups = self.groups;
        par::for_each_chunk_mut(out.data_mut(), glen, |gi, chunk| {
            let g = gi % groups;
            let (mean, inv) = Self::stats(chunk);
            for (j, p) in chunk.chunks_mut(plane).enumerate() {
                let ch = g * cpg + j;
                let (ga, be) = (self.gamma.value[ch], self.beta.value[ch]);
                p.iter_mut().for_each(|v| *v = (*v - mean) * inv * ga + be);
            }
        });
        out
    }

    /// Accumulates scale/shift gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = x.shape();
        assert_eq!(dy.shape(), x.shape());
        let cpg = c / self.groups;
        let glen = cpg * h * w;
        let plane = h * w;
        let groups = self.groups;
        let gamma = &self.gamma.value;
        let parts = par::map_indexed(b * groups, |gi| {
            let g = gi % groups;
            let xs = &x.data()[gi * glen..(gi + 1) * glen];
            let dys = &dy.data()[gi * glen..(gi + 1) * glen];
            let (mean, inv) = Self::stats(xs);
            let mut dgamma = vec![T::zero(); cpg];
            let mut dbeta = vec![T::zero(); cpg];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..cpg {
                let ga = gamma[g * cpg + j];
                for i in j * plane..(j + 1) * plane {
                    let xhat = (xs[i] - mean) * inv;
                    dgamma[j] += dys[i] * xhat;
                    dbeta[j] += dys[i];
                    let dxhat = dys[i] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m = T::lit(glen as f64);
            let mut dx = vec![T::zero(); glen];
            for j in 0..cpg {
                let ga = gamma[g * cpg + j];
                for i in j * plane..(j + 1) * plane {
                    let xhat = (xs[i] - mean) * inv;
                    dx[i] = inv / m * (m * dys[i] * ga - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
            (dx, dgamma, dbeta)
        });
        let mut dx = Vec::with_capacity(x.len());
        for (gi, (d, dg, db)) in parts.into_iter().enumerate() {
            let g = gi % groups;
            dx.extend(d);
            for j in 0..cpg {
                self.gamma.grad[g * cpg + j] += dg[j];
                self.beta.grad[g * cpg + j] += db[j];
            }
        }
        Tensor::from_vec(x.shape(), dx).unwrap()
    }
}

impl<T: Real> Parameterized<T> for GroupNorm<T> {
    fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, T>) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}
