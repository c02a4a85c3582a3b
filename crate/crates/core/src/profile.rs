//! Parameter counts, analytic FLOPs and wall-clock latency.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::extractor::check_resolution;
use crate::model::SegmentationModel;
use crate::nn::Parameterized;
use crate::tensor::Tensor;

pub const FLOP_CONVENTION: &str = "conv: 2*kh*kw*cin*cout*hout*wout (one MAC = 2 FLOPs) + cout*hout*wout bias adds; \
elementwise, activation, pooling, resize and normalization: 1 FLOP per output element per op; concat: 0";

pub const WARMUP_RUNS: usize = 3;
pub const TIMED_RUNS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub params_millions: f64,
    pub frozen_params_millions: f64,
    pub gflops: f64,
    pub latency_ms_mean: f64,
    pub latency_ms_std: f64,
    pub flop_convention: String,
}

impl ProfileReport {
    pub fn notes(&self, (h, w): (usize, usize)) -> Vec<String> {
        vec![
            format!("input: 1x3x{h}x{w}"),
            "params_millions counts trainable weights; the frozen extractor is reported separately".into(),
            format!("latency: mean and std of {TIMED_RUNS} timed forwards after {WARMUP_RUNS} warmups"),
        ]
    }
}

/// Count-only profile; latency fields are zero.
pub fn analytic_profile(model: &SegmentationModel, (h, w): (usize, usize)) -> Result<ProfileReport> {
    check_resolution(h, w)?;
    Ok(ProfileReport {
        params_millions: model.num_params() as f64 / 1e6,
        frozen_params_millions: model.extractor().num_params() as f64 / 1e6,
        gflops: model.flops(h, w)? as f64 / 1e9,
        latency_ms_mean: 0.0,
        latency_ms_std: 0.0,
        flop_convention: FLOP_CONVENTION.into(),
    })
}

pub fn profile_model(model: &SegmentationModel, size: (usize, usize)) -> Result<ProfileReport> {
    profile_model_with(model, size, WARMUP_RUNS, TIMED_RUNS)
}

pub fn profile_model_with(
    model: &SegmentationModel,
    (h, w): (usize, usize),
    warmup: usize,
    runs: usize,
) -> Result<ProfileReport> {
    let mut report = analytic_profile(model, (h, w))?;
    let x = Tensor::from_fn([1, 3, h, w], |[_, c, y, xx]| ((c * 13 + y * 7 + xx * 3) % 17) as f32 / 17.0);
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        model.forward(&x)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (mean, std) = mean_std(&times);
    report.latency_ms_mean = mean;
    report.latency_ms_std = std;
    Ok(report)
}

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
