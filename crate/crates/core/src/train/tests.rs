use super::*;
use crate::model::{init_model, ModelConfig, Module, NormKind, SizePreset};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        model_dim: 8,
        ffn_expansion: 2,
        num_heads: 2,
        conv_kernel: 3,
        group_count: 2,
        num_classes: 3,
        feature_dim: 4,
        max_frames: 6,
        ..ModelConfig::default()
    }
}

fn tiny_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        num_classes: 3,
        feature_dim: 4,
        frames: 6,
        noise_std: 0.3,
        time_shift_max: 1,
        ..SyntheticTaskSpec::default()
    }
}

#[test]
fn zero_learning_rate_leaves_params_bitwise_unchanged() {
    let store = init_model(&tiny_config(), 1).unwrap();
    let data = make_dataset(&tiny_task(), Split::Train, 30, 2);
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(0.0),
        batch_size: 4,
        total_steps: 5,
        ..TrainConfig::default()
    };
    let out = train(&store, &data, &cfg).unwrap();
    assert_eq!(out.params, store);
    assert_eq!(out.losses.len(), 5);
}

#[test]
fn single_sgd_step_is_p_minus_lr_g() {
    let store = init_model(&tiny_config(), 4).unwrap();
    let data = make_dataset(&tiny_task(), Split::Train, 10, 2);
    let lr = 0.05;
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd { lr },
        batch_size: 4,
        total_steps: 1,
        seed: 8,
        ..TrainConfig::default()
    };
    let out = train(&store, &data, &cfg).unwrap();

    let idx = BatchSampler::new(data.len(), 8).next_batch(4);
    let (x, y) = data.batch(&idx);
    let lg = loss_and_grads(&store, &x, &y, NormMode::Train).unwrap();
    for (key, entry) in store.iter() {
        let g = lg.grads[key].data();
        let expected: Vec<f64> = entry.tensor.data().iter().zip(g).map(|(p, g)| p - lr * g).collect();
        assert_eq!(out.params.tensor(key).unwrap().data(), &expected[..], "{key}");
    }

    // Independently, the step direction on two scalars matches a central
    // finite-difference gradient.
    let h = 1e-5;
    for key in [
        ParamKey::encoder(0, Module::FfnStart, "w1"),
        ParamKey::new(crate::model::Slot::Head, Module::Head, "bias"),
    ] {
        let base = store.tensor(&key).unwrap().clone();
        let bump = |delta: f64| {
            let mut d = base.clone().into_data();
            d[1] += delta;
            let mut s = store.clone();
            s.set_tensor(&key, Tensor::new(base.shape().to_vec(), d).unwrap()).unwrap();
            let logits = forward(&s, &x, NormMode::Train, false).unwrap().logits;
            cross_entropy(&logits, &y).unwrap()
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let stepped = out.params.tensor(&key).unwrap().data()[1];
        assert!((stepped - (base.data()[1] - lr * fd)).abs() < 1e-9);
    }
}

#[test]
fn training_is_deterministic_and_snapshots_are_frozen() {
    let store = init_model(&tiny_config(), 2).unwrap();
    let data = make_dataset(&tiny_task(), Split::Train, 30, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        total_steps: 6,
        snapshot_steps: vec![3],
        seed: 5,
        ..TrainConfig::default()
    };
    let a = train(&store, &data, &cfg).unwrap();
    let b = train(&store, &data, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.snapshots.keys().copied().collect::<Vec<_>>(), vec![0, 3]);
    assert_eq!(a.snapshots[&0], store);

    // Continuing from snapshot 3 for three more steps does not touch it.
    let snap = a.snapshots[&3].clone();
    let _ = train(&a.snapshots[&3], &data, &TrainConfig { total_steps: 3, ..cfg.clone() }).unwrap();
    assert_eq!(a.snapshots[&3], snap);
    assert_ne!(a.snapshots[&3], a.params);
}

#[test]
fn batch_norm_training_updates_running_stats() {
    let cfg_model = ModelConfig {
        norm_kind: NormKind::Batch,
        ..tiny_config()
    };
    let store = init_model(&cfg_model, 2).unwrap();
    let data = make_dataset(&tiny_task(), Split::Train, 30, 2);
    let cfg = TrainConfig {
        optimizer: Optimizer::adam(0.0),
        batch_size: 4,
        total_steps: 2,
        ..TrainConfig::default()
    };
    let out = train(&store, &data, &cfg).unwrap();
    let key = ParamKey::encoder(1, Module::NormParams, "final_mean");
    assert_ne!(out.params.tensor(&key).unwrap(), store.tensor(&key).unwrap());
}

#[test]
fn divergence_reports_step() {
    let store = init_model(&tiny_config(), 2).unwrap();
    let data = make_dataset(&tiny_task(), Split::Train, 30, 2);
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd { lr: 1e305 },
        batch_size: 4,
        total_steps: 10,
        ..TrainConfig::default()
    };
    match train(&store, &data, &cfg) {
        Err(TrainError::Diverged { step, .. }) => assert!(step < 10),
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn config_validation() {
    let cfg = TrainConfig {
        total_steps: 5,
        snapshot_steps: vec![6],
        ..TrainConfig::default()
    };
    assert!(cfg.validate().is_err());
    let empty = Dataset::new(6, 4, 3, vec![], vec![]);
    let store = init_model(&tiny_config(), 0).unwrap();
    assert!(matches!(evaluate(&store, &empty), Err(TrainError::EmptyDataset)));
}

#[test]
fn random_init_error_near_chance() {
    let cfg = ModelConfig::preset(SizePreset::ToyS);
    let task = SyntheticTaskSpec::default();
    let eval = make_dataset(&task, Split::Eval, 1000, 3);
    for seed in 0..2 {
        let store = init_model(&cfg, seed).unwrap();
        let r = evaluate(&store, &eval).unwrap();
        let chance = 1.0 - 1.0 / task.num_classes as f64;
        assert!((r.error_rate - chance).abs() < 0.05, "error {}", r.error_rate);
        assert_eq!(r, evaluate(&store, &eval).unwrap());
        assert_eq!(r.num_examples, 1000);
    }
}

#[test]
fn sampler_covers_each_epoch() {
    let mut s = BatchSampler::new(10, 3);
    let mut first: Vec<usize> = s.next_batch(10);
    first.sort();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
}
