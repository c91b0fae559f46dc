//! Pretrain on the source domain, rank layers by re-randomization, then
//! adapt to a shifted target domain with federated averaging under
//! several targeted-dropout schedules.

use ambient::cli::ExperimentConfig;
use ambient::flsim::{fl_csv, pretrain_base, run_schedules, DropoutSchedule};
use ambient::model::{ModelConfig, SizePreset};

fn main() {
    let mut cfg = ExperimentConfig::default();
    cfg.model = ModelConfig::preset(SizePreset::ToyS);
    cfg.train.total_steps = 150;
    cfg.train_examples = 1000;
    cfg.eval_examples = 300;
    cfg.fl.fl.num_rounds = 4;
    cfg.fl.fl.client_steps = 3;
    cfg.fl.target_train_examples = 400;
    cfg.fl.target_eval_examples = 300;
    let setup = cfg.transfer_setup();

    let base = pretrain_base(&setup).unwrap();
    println!("source baseline {:.3}", base.ablation.baseline.error_rate);
    println!("layers, most ambient first: {:?}", base.classification.ranking);

    let schedules: Vec<DropoutSchedule> = ["none", "Amb-1@50%", "Crit-1@50%", "Flat@20%"]
        .iter()
        .map(|s| s.parse().unwrap())
        .collect();
    let rows = run_schedules(&setup, &base, &schedules).unwrap();
    print!("{}", fl_csv(&rows));
}
