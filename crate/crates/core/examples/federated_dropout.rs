//! Structured dropout masks aimed at ambient or critical layers: how much
//! of the encoder a client skips, and the shapes it actually trains.

use ambient::ablation::LayerClassification;
use ambient::flsim::{build_mask, extract_submodel, params_dropped_fraction, DropoutSchedule};
use ambient::model::{init_model, ModelConfig, SizePreset};

fn main() {
    let cfg = ModelConfig::preset(SizePreset::ToyL);
    let full = init_model(&cfg, 0).unwrap();
    // pretend layers 5, 6, 4 are the most ambient and 0, 1 the most critical
    let cls = LayerClassification {
        ranking: vec![5, 6, 4, 3, 7, 2, 1, 0],
        ambient: vec![5, 6, 4, 3],
        critical: vec![7, 2, 1, 0],
        epsilon: 0.1,
    };
    for label in ["none", "Flat@20%", "Amb-2@50%", "Crit-2@50%", "Amb-4@50%"] {
        let s: DropoutSchedule = label.parse().unwrap();
        let mask = build_mask(&s, &cls, &cfg, 42).unwrap();
        let frac = params_dropped_fraction(&mask, &cfg).unwrap();
        let per_layer: Vec<String> = mask
            .layers
            .iter()
            .map(|l| {
                let [fs, fe, h, c] = l.dropped();
                format!("{fs}/{fe}/{h}/{c}")
            })
            .collect();
        println!("{label:<11} dropped {:>5.1}%  per layer ffn_start/ffn_end/heads/conv: {}", 100.0 * frac, per_layer.join(" "));
    }

    let mask = build_mask(&"Crit-2@50%".parse().unwrap(), &cls, &cfg, 42).unwrap();
    let sub = extract_submodel(&full, &mask).unwrap();
    for layer in [0, 5] {
        println!("layer {layer} submodel tensors:");
        for key in sub.layer_keys(layer).take(6) {
            println!("  {:<36} {:?}", key.path(), sub.tensor(key).unwrap().shape());
        }
    }
}
