use std::fs;
use std::path::Path;
use std::process::Command;

use ambient::ablation::ResetMode;
use ambient::cli::{
    cmd_ablate, cmd_churn, cmd_fl, cmd_report, cmd_train, preset_experiments, run_pipeline, run_preset,
    ExperimentConfig, RunDir,
};
use ambient::flsim::DropoutSchedule;
use ambient::model::NormKind;

const TINY: &str = "\
model.size_preset=none
model.num_layers=3
model.model_dim=8
model.ffn_expansion=2
model.num_heads=2
model.conv_kernel=3
model.group_count=2
model.num_classes=3
model.feature_dim=4
model.max_frames=6
task.frames=6
task.noise_std=0.3
task.time_shift_max=1
train.total_steps=6
train.batch_size=8
train.train_examples=48
train.eval_examples=24
fl.num_clients=3
fl.clients_per_round=2
fl.num_rounds=2
fl.client_steps=2
fl.client_batch_size=4
fl.target_train_examples=24
fl.target_eval_examples=12
fl.schedules=none,Amb-1@50%,Crit-1@50%
";

fn tiny() -> ExperimentConfig {
    ExperimentConfig::parse(TINY).unwrap()
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

fn checkpoint_names(out: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn train_with_zero_steps_writes_only_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.total_steps = 0;
    cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(checkpoint_names(dir.path()), ["step_0.ckpt"]);
    assert_eq!(ExperimentConfig::parse(&read(&dir.path().join("config.txt"))).unwrap(), cfg);
}

#[test]
fn train_writes_snapshots_and_final() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.snapshot_steps = vec![2];
    cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(checkpoint_names(dir.path()), ["step_0.ckpt", "step_2.ckpt", "step_6.ckpt"]);
}

#[test]
fn ablation_csv_has_baseline_plus_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_train(&cfg, dir.path()).unwrap();
    let run = RunDir { root: dir.path().to_path_buf() };
    cmd_ablate(&cfg, &run.checkpoint(6), dir.path()).unwrap();
    let text = read(&run.csv("ablation.csv"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "mode,layer,error,baseline");
    assert_eq!(lines.len() - 1, cfg.model.num_layers + 1);
    assert!(lines[1].starts_with("rerand,baseline,"));
    for (d, l) in lines[2..].iter().enumerate() {
        assert!(l.starts_with(&format!("rerand,{d},")));
    }

    let mut both = cfg.clone();
    both.ablation.modes = vec![ResetMode::Reinit, ResetMode::Rerand];
    cmd_ablate(&both, &run.checkpoint(6), dir.path()).unwrap();
    assert_eq!(read(&run.csv("ablation.csv")).lines().count(), 1 + 2 * (cfg.model.num_layers + 1));
}

#[test]
fn churn_csv_covers_every_encoder_module_and_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_train(&cfg, dir.path()).unwrap();
    let run = RunDir { root: dir.path().to_path_buf() };
    cmd_churn(&cfg, &run.checkpoint(0), &run.checkpoint(6), dir.path()).unwrap();
    let text = read(&run.csv("churn.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("module,layer,churn,raw"));
    assert_eq!(lines.count(), 10 * cfg.model.num_layers);

    // step 0 against itself: every entry is zero
    cmd_churn(&cfg, &run.checkpoint(0), &run.checkpoint(0), dir.path()).unwrap();
    for l in read(&run.csv("churn.csv")).lines().skip(1) {
        assert!(l.ends_with(",0.00000000e0,0.00000000e0"), "{l}");
    }
}

#[test]
fn fl_csv_lists_every_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny();
    cmd_train(&cfg, dir.path()).unwrap();
    let run = RunDir { root: dir.path().to_path_buf() };
    let rows = cmd_fl(&cfg, &run.checkpoint(6), dir.path()).unwrap();
    let labels: Vec<String> = rows.iter().map(|r| r.schedule.to_string()).collect();
    assert_eq!(labels, ["none", "Amb-1@50%", "Crit-1@50%"]);
    let text = read(&run.csv("fl.csv"));
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "schedule,params_dropped,eval_error,seed");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("none,0.00000000e0,"));
}

#[test]
fn report_spread_is_ordered_across_seeds() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        let mut cfg = tiny();
        cfg.root_seed = seed;
        cfg.fl.schedules = vec![DropoutSchedule::None];
        run_pipeline(&cfg, &dir.path().join(format!("seed_{seed}"))).unwrap();
    }
    let spreads = cmd_report(dir.path()).unwrap();
    assert_eq!(spreads.len(), 3);
    for s in &spreads {
        assert!(s.min <= s.mean && s.mean <= s.max, "{s:?}");
    }
    let text = read(&dir.path().join("csv/stability.csv"));
    assert_eq!(text.lines().next(), Some("layer,min,mean,max"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn report_without_runs_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_report(dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn pipeline_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny();
    run_pipeline(&cfg, a.path()).unwrap();
    run_pipeline(&cfg, b.path()).unwrap();
    for sub in ["checkpoints", "csv"] {
        let names: Vec<_> = fs::read_dir(a.path().join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert!(!names.is_empty());
        for n in names {
            let x = fs::read(a.path().join(sub).join(&n)).unwrap();
            let y = fs::read(b.path().join(sub).join(&n)).unwrap();
            assert!(x == y, "{sub}/{n:?} differs");
        }
    }
}

#[test]
fn bn_vs_gn_pairs_differ_only_in_norm_kind() {
    let p = preset_experiments("bn_vs_gn", 0).unwrap();
    assert_eq!(p.runs.len(), 6);
    for pair in p.runs.chunks(2) {
        let (g, b) = (&pair[0].1, &pair[1].1);
        assert_eq!(g.model.norm_kind, NormKind::Group);
        assert_eq!(b.model.norm_kind, NormKind::Batch);
        let mut g2 = g.clone();
        g2.model.norm_kind = NormKind::Batch;
        assert_eq!(&g2, b);
    }
}

#[test]
fn stability5_has_five_root_seeds() {
    let p = preset_experiments("stability5", 0).unwrap();
    let seeds: Vec<u64> = p.runs.iter().map(|r| r.1.root_seed).collect();
    assert_eq!(seeds, [0, 1, 2, 3, 4]);
    for (_, c) in &p.runs {
        let mut c = c.clone();
        c.root_seed = 0;
        assert_eq!(c, p.runs[0].1);
    }
}

#[test]
fn table3_analog_schedule_set() {
    let p = preset_experiments("table3_analog", 0).unwrap();
    assert_eq!(p.runs.len(), 3);
    let expected = [
        "Crit-2@50%", "Amb-2@50%", "Crit-3@50%", "Amb-3@50%", "Crit-4@50%", "Flat@20%", "Amb-4@50%", "none",
    ];
    for (_, c) in &p.runs {
        let got: Vec<String> = c.fl.schedules.iter().map(|s| s.to_string()).collect();
        assert_eq!(got, expected);
    }
}

#[test]
fn reinit_vs_rerand_spans_sizes_with_both_modes() {
    let p = preset_experiments("reinit_vs_rerand", 0).unwrap();
    let dims: Vec<(usize, usize)> = p.runs.iter().map(|r| (r.1.model.num_layers, r.1.model.model_dim)).collect();
    assert_eq!(dims, [(4, 16), (6, 24), (8, 32)]);
    for (_, c) in &p.runs {
        assert_eq!(c.ablation.modes, [ResetMode::Reinit, ResetMode::Rerand]);
    }
}

#[test]
fn unknown_preset_is_a_config_error() {
    let err = preset_experiments("table4", 0).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn shrunk_preset_runs_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = preset_experiments("stability5", 0).unwrap();
    let base = tiny();
    for (_, c) in &mut p.runs {
        *c = ExperimentConfig {
            root_seed: c.root_seed,
            fl: ambient::cli::FlSettings {
                schedules: vec![DropoutSchedule::None],
                ..base.fl.clone()
            },
            ..base.clone()
        };
    }
    run_preset(&p, dir.path()).unwrap();
    for s in 0..5 {
        assert!(dir.path().join(format!("seed_{s}/csv/ablation.csv")).is_file());
    }
    assert_eq!(read(&dir.path().join("csv/stability.csv")).lines().count(), 4);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ambient"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.txt");
    fs::write(&cfg_path, TINY).unwrap();
    let out = dir.path().join("run");

    let ok = bin().args(["train", "--config"]).arg(&cfg_path).arg("--out").arg(&out).args(["--seed", "5"]).output().unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(read(&out.join("config.txt")).starts_with("seed=5\n"));

    let ck = out.join("checkpoints/step_6.ckpt");
    let ab = bin().arg("ablate").arg("--config").arg(&cfg_path).arg("--out").arg(&out).args(["--seed", "5"]).arg("--checkpoint").arg(&ck).output().unwrap();
    assert!(ab.status.success(), "{}", String::from_utf8_lossy(&ab.stderr));
    assert!(String::from_utf8_lossy(&ab.stdout).starts_with("mode,layer,error,baseline"));

    let bad_cfg = dir.path().join("bad.txt");
    fs::write(&bad_cfg, "model.num_layerz=3\n").unwrap();
    let e = bin().arg("train").arg("--config").arg(&bad_cfg).arg("--out").arg(&out).output().unwrap();
    assert_eq!(e.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&e.stderr).contains("num_layerz"));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"AMBP\x01").unwrap();
    let e = bin().arg("ablate").arg("--config").arg(&cfg_path).arg("--out").arg(&out).arg("--checkpoint").arg(&junk).output().unwrap();
    assert_eq!(e.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&e.stderr).contains("offset 4"));

    let e = bin().args(["preset", "nope", "--out"]).arg(&out).output().unwrap();
    assert_eq!(e.status.code(), Some(2));
}
