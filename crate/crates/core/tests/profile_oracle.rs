use std::sync::Arc;

use crackseg_core::extractor::{make_stub_backend, DEFAULT_STAGE_CHANNELS};
use crackseg_core::fusion::FusionMode;
use crackseg_core::model::{build_model, ModelConfig};
use crackseg_core::nn::{Conv2d, Init, Parameterized};
use crackseg_core::profile::analytic_profile;
use crackseg_core::Error;

#[test]
fn single_conv_flops_by_hand() {
    // 16 output pixels, 9 MACs each, 2 FLOPs per MAC.
    let conv = Conv2d::<f32>::new(&Init::new(0), "c", 1, 1, 3, false);
    assert_eq!(conv.flops(4, 4), 2 * 9 * 16);
    assert_eq!(conv.flops(4, 4), 288);
}

#[test]
fn pointwise_conv_parameter_count() {
    let conv = Conv2d::<f32>::new(&Init::new(0), "c", 8, 4, 1, true);
    assert_eq!(conv.num_params(), 8 * 4 + 4);
}

#[test]
fn model_gflops_monotone_and_trainable_only() {
    let backend = Arc::new(make_stub_backend(0, DEFAULT_STAGE_CHANNELS));
    let cfg = ModelConfig { base_channels: 8, fusion_mode: FusionMode::Gated, mask_groups: 4 };
    let model = build_model(&cfg, backend.clone(), 0).unwrap();
    let sizes = [(64, 64), (128, 128), (256, 320), (512, 512)];
    let g: Vec<f64> = sizes.iter().map(|&s| analytic_profile(&model, s).unwrap().gflops).collect();
    assert!(g.windows(2).all(|w| w[0] < w[1]), "{g:?}");
    let r = analytic_profile(&model, (64, 64)).unwrap();
    assert_eq!(r.params_millions, model.num_params() as f64 / 1e6);
    assert_eq!(r.frozen_params_millions, backend.num_params() as f64 / 1e6);
    assert!(matches!(analytic_profile(&model, (100, 100)), Err(Error::BadResolution { .. })));
}
