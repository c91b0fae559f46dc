//! Which layers can be reset after training without hurting accuracy?
//! Re-initialization and re-randomization sweeps on a trained toyM.

use ambient::ablation::{ablation_sweep, classify_layers, ResetMode, DEFAULT_EPSILON};
use ambient::model::{init_model, ModelConfig, SizePreset};
use ambient::train::{make_dataset, train, Split, SyntheticTaskSpec, TrainConfig};

fn main() {
    let cfg = ModelConfig::preset(SizePreset::ToyM);
    let task = SyntheticTaskSpec::default();
    let initial = init_model(&cfg, 0).unwrap();
    let trained = train(
        &initial,
        &make_dataset(&task, Split::Train, 1500, 1),
        &TrainConfig {
            total_steps: 250,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .params;
    let eval = make_dataset(&task, Split::Eval, 400, 1);

    for mode in [ResetMode::Reinit, ResetMode::Rerand] {
        let r = ablation_sweep(&trained, &initial, &eval, mode, &[11, 12]).unwrap();
        let c = classify_layers(&r, DEFAULT_EPSILON).unwrap();
        println!("{mode}: baseline {:.3}", r.baseline.error_rate);
        for (d, e) in r.errors().iter().enumerate() {
            let tag = if c.ambient.contains(&d) { "ambient" } else { "critical" };
            println!("  layer {d}  error {e:.3}  {tag}");
        }
        println!("  ranking (most ambient first) {:?}, spread {:.3}", c.ranking, r.spread());
    }
}
