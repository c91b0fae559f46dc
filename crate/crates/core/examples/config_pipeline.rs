//! The file-driven path: parse a key=value config, run train, ablate and
//! churn into a run directory, then aggregate two seeds.

use ambient::cli::{cmd_report, run_pipeline, ExperimentConfig};

const CONFIG: &str = "\
# toyS, short run
model.size_preset=toyS
train.total_steps=80
train.train_examples=600
train.eval_examples=200
ablation.modes=reinit,rerand
ablation.seeds=7,8
";

fn main() {
    let cfg = ExperimentConfig::parse(CONFIG).unwrap();
    let out = std::env::temp_dir().join("ambient_example_runs");
    for seed in [0, 1] {
        let run = ExperimentConfig {
            root_seed: seed,
            ..cfg.clone()
        };
        run_pipeline(&run, &out.join(format!("seed_{seed}"))).unwrap();
    }
    for spread in cmd_report(&out).unwrap() {
        println!(
            "layer {}  min {:.3}  mean {:.3}  max {:.3}",
            spread.layer, spread.min, spread.mean, spread.max
        );
    }
    println!("outputs under {}", out.display());
}
