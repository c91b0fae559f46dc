//! Per-module, per-layer distance travelled from θ^0 during training,
//! normalized per module.

use ambient::churn::{churn_table, upper_minus_lower};
use ambient::model::{init_model, ModelConfig, Module, SizePreset};
use ambient::train::{make_dataset, train, Split, SyntheticTaskSpec, TrainConfig};

fn main() {
    let cfg = ModelConfig::preset(SizePreset::ToyS);
    let initial = init_model(&cfg, 0).unwrap();
    let data = make_dataset(&SyntheticTaskSpec::default(), Split::Train, 1000, 1);
    let out = train(
        &initial,
        &data,
        &TrainConfig {
            total_steps: 120,
            snapshot_steps: vec![30],
            ..TrainConfig::default()
        },
    )
    .unwrap();

    for (step, params) in [(30, &out.snapshots[&30]), (120, &out.params)] {
        let table = churn_table(params, &initial, step).unwrap();
        println!("step {step}");
        for m in table.modules() {
            let row: Vec<String> = table.row(m).iter().map(|v| format!("{v:.2}")).collect();
            println!("  {:<20} {}", m.label(), row.join(" "));
        }
        let attn = [Module::MhsaQuery, Module::MhsaKey, Module::MhsaValue, Module::MhsaPost];
        println!("  attention upper-minus-lower {:+.3}", upper_minus_lower(&table, &attn));
    }
    print!("{}", churn_table(&out.params, &initial, 120).unwrap().to_csv());
}
