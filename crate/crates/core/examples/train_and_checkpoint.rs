//! Train toyS on the synthetic task, write θ^0 and θ^T as checkpoints,
//! read them back and evaluate.

use ambient::cli::{load_checkpoint, save_checkpoint};
use ambient::model::{init_model, ModelConfig, SizePreset};
use ambient::train::{evaluate, make_dataset, train, Split, SyntheticTaskSpec, TrainConfig};

fn main() {
    let cfg = ModelConfig::preset(SizePreset::ToyS);
    let task = SyntheticTaskSpec::default();
    let train_set = make_dataset(&task, Split::Train, 1000, 1);
    let eval_set = make_dataset(&task, Split::Eval, 300, 1);

    let initial = init_model(&cfg, 0).unwrap();
    let tc = TrainConfig {
        total_steps: 150,
        snapshot_steps: vec![50, 100],
        ..TrainConfig::default()
    };
    let out = train(&initial, &train_set, &tc).unwrap();
    for (step, snap) in &out.snapshots {
        println!("step {step:>3}  eval error {:.3}", evaluate(snap, &eval_set).unwrap().error_rate);
    }
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    println!("final loss {last:.4}  eval error {:.3}", evaluate(&out.params, &eval_set).unwrap().error_rate);

    let dir = std::env::temp_dir().join("ambient_example_ckpt");
    std::fs::create_dir_all(&dir).unwrap();
    save_checkpoint(&initial, 0, &dir.join("step_0.ckpt")).unwrap();
    save_checkpoint(&out.params, 150, &dir.join("step_150.ckpt")).unwrap();
    let (back, step) = load_checkpoint(&dir.join("step_150.ckpt"), &cfg).unwrap();
    println!(
        "reloaded step {step}: eval error {:.3} (f32 on disk)",
        evaluate(&back, &eval_set).unwrap().error_rate
    );
}
