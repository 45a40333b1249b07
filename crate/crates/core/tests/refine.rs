mod common;

use common::{rng, uniform32};
use gated::model::{GatedNet, Model, ModelConfig, DEFAULT_PARAM_COUNT};
use gated::nn::Forward;
use gated::unet::{EncoderState, DEPTH};
use gated_tensor::{Eager, Ops, Tensor};

fn model(base: usize, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        base_width: base,
        ..Default::default()
    };
    Model::new(&cfg, seed).unwrap()
}

/// Parameter count written out layer by layer.
fn expected_params(b: usize) -> usize {
    let conv = |ci: usize, co: usize, k: usize, bias: bool| ci * co * k * k + if bias { co } else { 0 };
    let cbr = |ci, co| conv(ci, co, 3, false) + 2 * co;
    let dc = |ci, co| cbr(ci, co) + cbr(co, co);
    let cbam = |c: usize| {
        let r = if c < 16 { (c / 8).max(1) } else { 16 };
        conv(c, c / r, 1, true) + conv(c / r, c, 1, true) + conv(2, 1, 7, true)
    };
    let agcm = cbr(3, 32) + 2 * cbr(32, 32) + conv(32, 16, 1, true) + conv(16, 32, 1, true) + conv(32, 3, 1, true);
    let w: Vec<usize> = (0..5).map(|i| b << i).collect();
    let mut unet = dc(3, w[0]) + conv(w[0], 3, 1, true);
    for i in 1..5 {
        unet += cbam(w[i - 1]) + dc(w[i - 1], w[i]);
    }
    for i in 0..4 {
        unet += w[i + 1] * w[i] * 4 + w[i] + cbam(2 * w[i]) + dc(2 * w[i], w[i]);
    }
    agcm + unet
}

#[test]
fn parameter_count_is_pinned() {
    let m = model(64, 0);
    assert_eq!(m.params.num_trainable(), DEFAULT_PARAM_COUNT);
    assert_eq!(DEFAULT_PARAM_COUNT, expected_params(64));
    assert_eq!(model(8, 0).params.num_trainable(), expected_params(8));
}

#[test]
fn canonical_names() {
    let m = model(8, 0);
    for name in [
        "agcm.feb.0.conv.weight",
        "agcm.feb.2.bn.running_var",
        "agcm.gcb.reduce.bias",
        "agcm.head.weight",
        "refine.stem.0.conv.weight",
        "refine.down.3.cbam.mlp.0.weight",
        "refine.down.3.conv.1.bn.weight",
        "refine.up.0.upconv.weight",
        "refine.up.2.cbam.spatial.bias",
        "refine.out.bias",
    ] {
        assert!(m.params.id(name).is_some(), "{name}");
    }
}

#[test]
fn encoder_shapes_follow_the_ladder() {
    let m = model(64, 1);
    let fw = Forward::new(&Eager, &m.params, false);
    for (size, bottleneck) in [(128, 8), (256, 16)] {
        let x = Tensor::full([1, 3, size, size], 0.4f32);
        let state = m.net.refine.encode(&fw, &x).unwrap();
        assert_eq!(state.features.len(), DEPTH + 1);
        assert_eq!(state.bottleneck().shape(), [1, 1024, bottleneck, bottleneck]);
        for (i, f) in state.features.iter().enumerate() {
            assert_eq!(f.shape(), [1, 64 << i, size >> i, size >> i]);
            assert!(f.min() >= 0.0);
        }
    }
}

#[test]
fn stem_double_conv() {
    let m = model(64, 2);
    let fw = Forward::new(&Eager, &m.params, true);
    let x = uniform32(&mut rng(3), &[1, 3, 128, 128], 0.0, 1.0);
    let y = m.net.refine.stem.forward(&fw, &x).unwrap();
    assert_eq!(y.shape(), [1, 64, 128, 128]);
    assert!(y.min() >= 0.0);
    let odd = uniform32(&mut rng(3), &[1, 3, 7, 13], 0.0, 1.0);
    assert_eq!(m.net.refine.stem.forward(&fw, &odd).unwrap().shape(), [1, 64, 7, 13]);
}

#[test]
fn decoder_widths() {
    let m = model(64, 0);
    let r = &m.net.refine;
    assert_eq!(r.widths, [64, 128, 256, 512, 1024]);
    for i in 0..DEPTH {
        // upsampled channels + skip channels
        assert_eq!(r.up[i].attention.channels, r.widths[i] + r.widths[i]);
        assert_eq!(m.params.tensor(r.up[i].up.weight).shape(), [r.widths[i + 1], r.widths[i], 2, 2]);
    }
    for i in 0..DEPTH {
        assert_eq!(r.down[i].attention.channels, r.widths[i]);
    }
}

#[test]
fn shape_contract() {
    let m = model(64, 4);
    for (h, w) in [(128, 128), (160, 160), (256, 256), (128, 160)] {
        let x = Tensor::full([1, 3, h, w], 0.2f32);
        let out = m.infer(&x).unwrap();
        for t in [&out.stage1, &out.gamma, &out.output] {
            assert_eq!(t.shape(), [1, 3, h, w]);
        }
        assert!(out.output.min() > 0.0 && out.output.max() < 1.0);
        assert!(out.gamma.min() >= 0.5 && out.gamma.max() <= 2.0);
        assert!(out.stage1.min() >= 0.0 && out.stage1.max() <= 1.0);
    }
    for (h, w) in [(129, 128), (128, 120), (8, 8)] {
        let x = Tensor::full([1, 3, h, w], 0.2f32);
        assert!(
            matches!(m.infer(&x), Err(gated::Error::Shape(_))),
            "{h}x{w} should be rejected"
        );
    }
}

#[test]
fn eval_mode_is_deterministic() {
    let m = model(16, 5);
    let x = uniform32(&mut rng(6), &[2, 3, 32, 32], 0.0, 1.0);
    let a = m.infer(&x).unwrap();
    let b = m.infer(&x).unwrap();
    assert_eq!(a.output.data(), b.output.data());
    let again = model(16, 5).infer(&x).unwrap();
    assert_eq!(a.output.data(), again.output.data());
}

#[test]
fn every_skip_connection_matters() {
    let m = model(16, 7);
    // batch statistics keep activations at unit scale; with fresh running
    // statistics deep paths shrink towards zero
    let fw = Forward::new(&Eager, &m.params, true);
    let x = uniform32(&mut rng(8), &[1, 3, 32, 32], 0.0, 1.0);
    let state = m.net.refine.encode(&fw, &x).unwrap();
    let base = m.net.refine.decode(&fw, &state).unwrap();
    for i in 0..DEPTH {
        let mut features = state.features.clone();
        features[i] = features[i].zeros_like();
        let changed = m.net.refine.decode(&fw, &EncoderState { features }).unwrap();
        let d = changed.max_abs_diff(&base).unwrap();
        assert!(d > 1e-4, "skip {i} has no effect ({d})");
    }
}

#[test]
fn decode_rejects_mismatched_skips() {
    let m = model(8, 9);
    let fw = Forward::new(&Eager, &m.params, false);
    let x = uniform32(&mut rng(10), &[1, 3, 32, 32], 0.0, 1.0);
    let mut state = m.net.refine.encode(&fw, &x).unwrap();
    state.features[1] = Tensor::zeros([1, 16, 8, 8]);
    assert!(matches!(m.net.refine.decode(&fw, &state), Err(gated::Error::Shape(_))));
}

#[test]
fn stage_two_consumes_the_stage_one_image() {
    let m = model(8, 11);
    let x = uniform32(&mut rng(12), &[1, 3, 32, 32], 0.0, 1.0);
    let out = m.infer(&x).unwrap();
    let fw = Forward::new(&Eager, &m.params, false);
    let direct = m.net.refine.forward(&fw, &out.stage1).unwrap();
    assert_eq!(direct.data(), out.output.data());
}

#[test]
fn cast_to_f64_agrees() {
    let m = model(8, 13);
    let x = uniform32(&mut rng(14), &[1, 3, 16, 16], 0.0, 1.0);
    let a = m.infer(&x).unwrap().output;
    let m64 = m.cast::<f64>();
    let b = m64.infer(&x.cast()).unwrap().output;
    assert!(a.cast::<f64>().max_abs_diff(&b).unwrap() < 1e-4);
}

#[test]
fn build_is_seeded() {
    let (_, a) = GatedNet::build::<f32>(&ModelConfig::default(), 42).unwrap();
    let (_, b) = GatedNet::build::<f32>(&ModelConfig::default(), 42).unwrap();
    let (_, c) = GatedNet::build::<f32>(&ModelConfig::default(), 43).unwrap();
    let id = a.id("refine.up.1.conv.0.conv.weight").unwrap();
    assert_eq!(a.tensor(id).data(), b.tensor(id).data());
    assert_ne!(a.tensor(id).data(), c.tensor(id).data());
}

#[test]
fn forward_train_updates_running_stats() {
    let mut m = model(8, 15);
    let id = m.params.id("agcm.feb.0.bn.running_mean").unwrap();
    let x = uniform32(&mut rng(16), &[2, 3, 16, 16], 0.0, 1.0);
    m.forward_train(&x).unwrap();
    assert!(m.params.tensor(id).data().iter().any(|&v| v != 0.0));
    let _ = Eager.shape(&x);
}
