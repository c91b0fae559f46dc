use super::*;
use crate::numerics::{NormMode, Tensor};
use crate::rng;
use rand::Rng as _;

fn tiny(norm_kind: NormKind) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 8,
        ffn_expansion: 2,
        num_heads: 2,
        conv_kernel: 3,
        norm_kind,
        group_count: 2,
        num_classes: 3,
        feature_dim: 4,
        max_frames: 5,
        ..ModelConfig::default()
    }
}

fn random_batch(seed: u64, b: usize, t: usize, f: usize) -> Tensor {
    let mut r = rng::seeded(seed);
    let data = (0..b * t * f).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::new(vec![b, t, f], data).unwrap()
}

/// Per-layer trainable count by hand: two FFNs, four attention projections,
/// the conv module and six (gamma, beta) pairs.
fn layer_count_oracle(d: usize, e: usize, k: usize) -> usize {
    let h = d * e;
    let ffn = d * h + h + h * d + d;
    let attn = d * d + d;
    let conv = (d * 2 * d + 2 * d) + (k * d + d) + (d * d + d);
    2 * ffn + 4 * attn + conv + 6 * 2 * d
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let cfg = ModelConfig::preset(SizePreset::ToyS);
    let a = init_model(&cfg, 11).unwrap();
    let b = init_model(&cfg, 11).unwrap();
    assert_eq!(a, b);
    let c = init_model(&cfg, 12).unwrap();
    for (key, entry) in a.iter() {
        let other = &c.get(key).unwrap().tensor;
        match entry.init.kind {
            InitKind::Constant { .. } => assert_eq!(&entry.tensor, other),
            _ => assert_ne!(&entry.tensor, other, "{key} identical across seeds"),
        }
    }
}

#[test]
fn init_from_other_thread_is_bitwise_identical() {
    let cfg = ModelConfig::preset(SizePreset::ToyS);
    let here = init_model(&cfg, 5).unwrap();
    let there = std::thread::spawn(move || init_model(&cfg, 5).unwrap()).join().unwrap();
    assert_eq!(here, there);
}

#[test]
fn parameter_counts_match_shape_walk() {
    let cfg = ModelConfig {
        num_layers: 8,
        model_dim: 32,
        ffn_expansion: 4,
        num_heads: 4,
        conv_kernel: 7,
        ..ModelConfig::default()
    };
    let per_layer = layer_count_oracle(32, 4, 7);
    assert_eq!(per_layer, 24736);
    let ParamCounts::PerLayer(layers) = count_params(&cfg, Granularity::PerLayer) else {
        panic!()
    };
    assert!(layers.iter().all(|&c| c == per_layer));
    let outer = cfg.feature_dim * 32 + 32 + cfg.max_frames * 32 + 32 * cfg.num_classes + cfg.num_classes;
    let ParamCounts::Total(total) = count_params(&cfg, Granularity::Total) else {
        panic!()
    };
    assert_eq!(total, 8 * per_layer + outer);
    assert_eq!(outer_param_count(&cfg), outer);
    assert_eq!(init_model(&cfg, 0).unwrap().num_weights(), total);

    let ParamCounts::PerModule(modules) = count_params(&cfg, Granularity::PerModule) else {
        panic!()
    };
    assert_eq!(modules.values().sum::<usize>(), 8 * per_layer);
    assert_eq!(modules[&(3, Module::ConvDepthwise)], 7 * 32 + 32);
}

#[test]
fn preset_counts_are_homogeneous() {
    for p in [SizePreset::ToyS, SizePreset::ToyM, SizePreset::ToyL] {
        let cfg = ModelConfig::preset(p);
        let ParamCounts::PerLayer(layers) = count_params(&cfg, Granularity::PerLayer) else {
            panic!()
        };
        assert_eq!(layers.len(), cfg.num_layers);
        assert!(layers.iter().all(|&c| c == layer_count_oracle(cfg.model_dim, cfg.ffn_expansion, cfg.conv_kernel)));
    }
}

#[test]
fn batch_norm_adds_buffers_but_not_parameters() {
    let g = init_model(&tiny(NormKind::Group), 1).unwrap();
    let b = init_model(&tiny(NormKind::Batch), 1).unwrap();
    assert_eq!(g.num_weights(), b.num_weights());
    assert_eq!(b.len(), g.len() + 2 * 2 * 2);
}

#[test]
fn every_encoder_tensor_has_a_taxonomy_label() {
    let store = init_model(&ModelConfig::preset(SizePreset::ToyS), 0).unwrap();
    for key in store.keys() {
        if key.slot.encoder_index().is_some() {
            assert!(Module::ENCODER.contains(&key.module));
        }
    }
    let attention = Module::ENCODER.iter().filter(|m| m.is_attention()).count();
    let conv = Module::ENCODER.iter().filter(|m| m.is_convolution()).count();
    assert_eq!((attention, conv), (4, 3));
}

#[test]
fn output_shape_for_any_length() {
    let store = init_model(&tiny(NormKind::Group), 3).unwrap();
    for t in 1..=5 {
        let out = forward(&store, &random_batch(t as u64, 3, t, 4), NormMode::Eval, false).unwrap();
        assert_eq!(out.logits.shape(), &[3, 3]);
        assert!(out.trace.is_none());
    }
    assert!(forward(&store, &random_batch(0, 3, 6, 4), NormMode::Eval, false).is_err());
    assert!(forward(&store, &random_batch(0, 3, 4, 5), NormMode::Eval, false).is_err());
}

#[test]
fn zeroed_branches_keep_logits_finite() {
    let store = init_model(&tiny(NormKind::Group), 3).unwrap();
    for d in 0..2 {
        let mut zeroed = store.clone();
        let keys: Vec<ParamKey> = zeroed
            .layer_keys(d)
            .filter(|k| k.module != Module::NormParams)
            .cloned()
            .collect();
        for k in keys {
            let shape = zeroed.tensor(&k).unwrap().shape().to_vec();
            zeroed.set_tensor(&k, Tensor::zeros(&shape)).unwrap();
        }
        let out = forward(&zeroed, &random_batch(9, 2, 5, 4), NormMode::Eval, false).unwrap();
        assert!(out.logits.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn forward_is_pure() {
    let store = init_model(&tiny(NormKind::Batch), 3).unwrap();
    let x = random_batch(4, 3, 5, 4);
    let a = forward(&store, &x, NormMode::Train, false).unwrap();
    let b = forward(&store, &x, NormMode::Train, false).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    assert_eq!(a.running_stats, b.running_stats);
    assert_eq!(a.running_stats.len(), 2 * 2 * 2);
}

#[test]
fn streaming_differs_only_in_order() {
    let ns = tiny(NormKind::Group);
    let st = ModelConfig {
        layer_order: LayerOrder::Streaming,
        ..ns.clone()
    };
    let a = init_model(&ns, 2).unwrap();
    let b = init_model(&st, 2).unwrap();
    assert!(a.keys().eq(b.keys()));
    assert!(a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.tensor == y.tensor));
    let x = random_batch(1, 2, 5, 4);
    let la = forward(&a, &x, NormMode::Eval, false).unwrap().logits;
    let lb = forward(&b, &x, NormMode::Eval, false).unwrap().logits;
    assert_ne!(la, lb);
}

#[test]
fn reseed_with_original_seed_restores_init() {
    let store = init_model(&tiny(NormKind::Group), 21).unwrap();
    let key = ParamKey::encoder(1, Module::FfnStart, "w1");
    let mut trained = store.clone();
    trained.set_tensor(&key, Tensor::zeros(&[8, 16])).unwrap();
    let back = trained.reseed_tensor(&key, 21).unwrap();
    assert_eq!(back.tensor(&key).unwrap(), store.tensor(&key).unwrap());

    let other = store.reseed_tensor(&key, 99).unwrap();
    assert_eq!(other.tensor(&key).unwrap().shape(), &[8, 16]);
    assert_ne!(other.tensor(&key).unwrap(), store.tensor(&key).unwrap());
    for k in store.keys().filter(|k| **k != key) {
        assert_eq!(other.tensor(k).unwrap(), store.tensor(k).unwrap());
    }
    assert!(matches!(
        store.reseed_tensor(&ParamKey::encoder(7, Module::FfnStart, "w1"), 1),
        Err(ModelError::UnknownKey(_))
    ));
}

#[test]
fn reseeded_moments_match_init_distribution() {
    let cfg = ModelConfig::preset(SizePreset::ToyL);
    let store = init_model(&cfg, 0).unwrap();
    let key = ParamKey::encoder(4, Module::FfnEnd, "w2");
    let redrawn = store.reseed_tensor(&key, 12345).unwrap();
    let t = redrawn.tensor(&key).unwrap();
    let InitKind::Uniform { bound } = store.get(&key).unwrap().init.kind else {
        panic!()
    };
    let n = t.numel() as f64;
    let mean = t.sum() / n;
    let std = (t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let expected_std = bound / 3f64.sqrt();
    assert!(mean.abs() < 0.05 * expected_std, "mean {mean}");
    assert!((std - expected_std).abs() < 0.05 * expected_std, "std {std} vs {expected_std}");

    let pos = ParamKey::new(Slot::Input, Module::InputProjection, "positional");
    let t = store.reseed_tensor(&pos, 777).unwrap().tensor(&pos).unwrap().clone();
    let n = t.numel() as f64;
    let std = (t.sum_of_squares() / n).sqrt();
    assert!((std - 0.1).abs() < 0.005 * 1.0 + 0.05 * 0.1, "normal std {std}");
}

fn model_gradcheck(cfg: &ModelConfig, seed: u64, mode: NormMode) -> f64 {
    let store = init_model(cfg, seed).unwrap();
    let x = random_batch(seed + 100, 3, 4, cfg.feature_dim);
    let labels = [0, 2, 1];
    let analytic = loss_and_grads(&store, &x, &labels, mode).unwrap();
    let loss_at = |s: &ParamStore| {
        let logits = forward(s, &x, mode, false).unwrap().logits;
        crate::numerics::cross_entropy(&logits, &labels).unwrap()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (key, grad) in &analytic.grads {
        let base = store.tensor(key).unwrap().clone();
        for e in 0..base.numel() {
            let mut plus = base.clone().into_data();
            plus[e] += h;
            let mut minus = base.clone().into_data();
            minus[e] -= h;
            let mut sp = store.clone();
            sp.set_tensor(key, Tensor::new(base.shape().to_vec(), plus).unwrap()).unwrap();
            let mut sm = store.clone();
            sm.set_tensor(key, Tensor::new(base.shape().to_vec(), minus).unwrap()).unwrap();
            let numeric = (loss_at(&sp) - loss_at(&sm)) / (2.0 * h);
            let a = grad.data()[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn end_to_end_gradients_group_norm() {
    for seed in 0..3 {
        let err = model_gradcheck(&tiny(NormKind::Group), seed, NormMode::Train);
        assert!(err < 1e-3, "seed {seed}: {err:e}");
    }
}

#[test]
fn end_to_end_gradients_batch_norm_and_streaming() {
    let bn = tiny(NormKind::Batch);
    assert!(model_gradcheck(&bn, 4, NormMode::Train) < 1e-3);
    assert!(model_gradcheck(&bn, 4, NormMode::Eval) < 1e-3);
    let st = ModelConfig {
        layer_order: LayerOrder::Streaming,
        norm_kind: NormKind::Layer,
        ..tiny(NormKind::Layer)
    };
    assert!(model_gradcheck(&st, 5, NormMode::Train) < 1e-3);
}
