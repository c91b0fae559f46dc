//! Backprop through the whole toy model, checked against central
//! differences on a handful of coordinates.

use ambient::model::{init_model, loss_and_grads, Module, ModelConfig, NormKind, ParamKey};
use ambient::numerics::{NormMode, Tensor};
use ambient::train::{make_dataset, Split, SyntheticTaskSpec};

fn main() {
    let cfg = ModelConfig {
        num_layers: 2,
        model_dim: 8,
        ffn_expansion: 2,
        num_heads: 2,
        conv_kernel: 3,
        norm_kind: NormKind::Group,
        group_count: 2,
        num_classes: 3,
        feature_dim: 4,
        max_frames: 6,
        ..ModelConfig::default()
    };
    let task = SyntheticTaskSpec {
        num_classes: 3,
        feature_dim: 4,
        frames: 6,
        ..SyntheticTaskSpec::default()
    };
    let params = init_model(&cfg, 3).unwrap();
    let data = make_dataset(&task, Split::Train, 4, 0);
    let (x, y) = data.batch(&[0, 1, 2, 3]);
    let out = loss_and_grads(&params, &x, &y, NormMode::Train).unwrap();
    println!("loss {:.6}", out.loss);

    let h = 1e-5;
    let probes = [
        ParamKey::encoder(0, Module::FfnStart, "w1"),
        ParamKey::encoder(1, Module::MhsaQuery, "weight"),
        ParamKey::encoder(1, Module::ConvDepthwise, "weight"),
    ];
    for key in probes {
        let Some(entry) = params.get(&key) else {
            println!("{}: not in this layout", key.path());
            continue;
        };
        let loss_at = |delta: f64| {
            let mut p = params.clone();
            let mut data = entry.tensor.data().to_vec();
            data[0] += delta;
            p.set_tensor(&key, Tensor::new(entry.tensor.shape().to_vec(), data).unwrap()).unwrap();
            loss_and_grads(&p, &x, &y, NormMode::Train).unwrap().loss
        };
        let numeric = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        let analytic = out.grads[&key].data()[0];
        println!("{:<36} analytic {analytic:+.8e}  numeric {numeric:+.8e}", key.path());
    }
}
