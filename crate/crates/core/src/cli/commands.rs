//! Experiment commands. Each writes into a run directory:
//!
//! ```text
//! <run>/config.txt        effective configuration
//! <run>/checkpoints/      step_<t>.ckpt
//! <run>/csv/              ablation.csv, churn.csv, fl.csv, stability.csv
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::{CliError, ExperimentConfig};
use crate::ablation::{ablation_sweep, AblationResult};
use crate::churn::{churn_table, sig9};
use crate::flsim::{base_from_trained, fl_csv, run_schedules, TransferRow};
use crate::model::{init_model, ParamStore};
use crate::train::{make_dataset, train, Split};

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("csv"))?;
        fs::write(root.join("config.txt"), cfg.to_text())?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step}.ckpt"))
    }

    pub fn csv(&self, name: &str) -> PathBuf {
        self.root.join("csv").join(name)
    }
}

/// Trains from `init_model(cfg.model, cfg.root_seed)` and saves step 0,
/// every snapshot step and the final step.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let run = RunDir::create(out, cfg)?;
    let initial = init_model(&cfg.model, cfg.root_seed)?;
    let data = make_dataset(&cfg.source_task(), Split::Train, cfg.train_examples, cfg.data_seed);
    let mut train_cfg = cfg.train_config();
    if cfg.churn_step > 0 && !train_cfg.snapshot_steps.contains(&cfg.churn_step) {
        train_cfg.snapshot_steps.push(cfg.churn_step);
    }
    let outcome = train(&initial, &data, &train_cfg)?;
    let mut snapshots = outcome.snapshots;
    snapshots.insert(cfg.train.total_steps, outcome.params);
    let mut written = Vec::new();
    for (step, params) in &snapshots {
        let path = run.checkpoint(*step);
        save_checkpoint(params, *step as u64, &path)?;
        written.push(path);
    }
    Ok(written)
}

/// `mode,layer,error,baseline`: per mode one `baseline` row, then one row
/// per layer.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("mode,layer,error,baseline\n");
    for r in results {
        let b = sig9(r.baseline.error_rate);
        writeln!(s, "{},baseline,{b},{b}", r.mode).unwrap();
        for (d, rep) in r.per_layer.iter().enumerate() {
            writeln!(s, "{},{d},{},{b}", r.mode, sig9(rep.error_rate)).unwrap();
        }
    }
    s
}

/// Runs every configured reset mode on a trained checkpoint. The initial
/// model is regenerated from the checkpoint's root seed.
pub fn cmd_ablate(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<AblationResult>, CliError> {
    let run = RunDir::create(out, cfg)?;
    let (trained, _) = load_checkpoint(checkpoint, &cfg.model)?;
    let initial = init_model(&cfg.model, trained.root_seed())?;
    let eval = make_dataset(&cfg.source_task(), Split::Eval, cfg.eval_examples, cfg.data_seed);
    let results = cfg
        .ablation
        .modes
        .iter()
        .map(|&mode| ablation_sweep(&trained, &initial, &eval, mode, &cfg.ablation.seeds))
        .collect::<Result<Vec<_>, _>>()?;
    fs::write(run.csv("ablation.csv"), ablation_csv(&results))?;
    Ok(results)
}

pub fn cmd_churn(cfg: &ExperimentConfig, initial: &Path, later: &Path, out: &Path) -> Result<(), CliError> {
    let run = RunDir::create(out, cfg)?;
    let (p0, _) = load_checkpoint(initial, &cfg.model)?;
    let (pt, step) = load_checkpoint(later, &cfg.model)?;
    let table = churn_table(&pt, &p0, step as usize)?;
    fs::write(run.csv("churn.csv"), table.to_csv())?;
    Ok(())
}

/// Federated training on the target domain from a source-domain
/// checkpoint, once per configured schedule.
pub fn cmd_fl(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<Vec<TransferRow>, CliError> {
    let run = RunDir::create(out, cfg)?;
    let (trained, _) = load_checkpoint(checkpoint, &cfg.model)?;
    let initial = init_model(&cfg.model, trained.root_seed())?;
    let setup = cfg.transfer_setup();
    let base = base_from_trained(&setup, initial, trained)?;
    let rows = run_schedules(&setup, &base, &cfg.fl.schedules)?;
    fs::write(run.csv("fl.csv"), fl_csv(&rows))?;
    Ok(rows)
}

/// Per-layer statistics of one value across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpread {
    pub layer: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

fn run_dirs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("csv").join("ablation.csv").is_file())
        .collect();
    runs.sort();
    if runs.is_empty() && dir.join("csv").join("ablation.csv").is_file() {
        runs.push(dir.to_path_buf());
    }
    Ok(runs)
}

fn parse_ablation_rows(text: &str, path: &Path) -> Result<Vec<(String, String, f64)>, CliError> {
    let bad = |m: &str| CliError::Runtime(format!("{}: {m}", path.display()));
    let mut lines = text.lines();
    if lines.next() != Some("mode,layer,error,baseline") {
        return Err(bad("unexpected header"));
    }
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let err: f64 = f[2].parse().map_err(|_| bad("bad error value"))?;
            Ok((f[0].to_string(), f[1].to_string(), err))
        })
        .collect()
}

/// Aggregates the ablation CSVs of every run directory under `dir` (or of
/// `dir` itself) into `dir/csv/stability.csv`, using the re-randomization
/// rows when present. Any `fl.csv` files are concatenated into
/// `dir/csv/fl.csv`.
pub fn cmd_report(dir: &Path) -> Result<Vec<LayerSpread>, CliError> {
    let runs = run_dirs(dir)?;
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("no ablation results under {}", dir.display())));
    }
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut fl_rows = Vec::new();
    for run in &runs {
        let path = run.join("csv").join("ablation.csv");
        let rows = parse_ablation_rows(&fs::read_to_string(&path)?, &path)?;
        let mode = if rows.iter().any(|r| r.0 == "rerand") {
            "rerand"
        } else {
            "reinit"
        };
        for (m, layer, err) in rows {
            if m == mode {
                if let Ok(l) = layer.parse::<usize>() {
                    per_layer.entry(l).or_default().push(err);
                }
            }
        }
        let fl = run.join("csv").join("fl.csv");
        if fl.is_file() {
            fl_rows.extend(fs::read_to_string(&fl)?.lines().skip(1).map(str::to_string));
        }
    }
    let spreads: Vec<LayerSpread> = per_layer
        .into_iter()
        .map(|(layer, v)| LayerSpread {
            layer,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    fs::create_dir_all(dir.join("csv"))?;
    let mut s = String::from("layer,min,mean,max\n");
    for r in &spreads {
        writeln!(s, "{},{},{},{}", r.layer, sig9(r.min), sig9(r.mean), sig9(r.max)).unwrap();
    }
    fs::write(dir.join("csv").join("stability.csv"), s)?;
    if !fl_rows.is_empty() {
        let mut s = String::from("schedule,params_dropped,eval_error,seed\n");
        for r in fl_rows {
            s.push_str(&r);
            s.push('\n');
        }
        fs::write(dir.join("csv").join("fl.csv"), s)?;
    }
    Ok(spreads)
}

/// Train, ablate, churn and, when schedules beyond `none` are configured,
/// federated training, all in one run directory.
pub fn run_pipeline(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    let run = RunDir::create(out, cfg)?;
    cmd_train(cfg, out)?;
    let last = run.checkpoint(cfg.train.total_steps);
    cmd_ablate(cfg, &last, out)?;
    let churn_at = if cfg.churn_step == 0 {
        cfg.train.total_steps
    } else {
        cfg.churn_step
    };
    cmd_churn(cfg, &run.checkpoint(0), &run.checkpoint(churn_at), out)?;
    if cfg.fl.schedules.iter().any(|s| !s.is_none()) {
        cmd_fl(cfg, &last, out)?;
    }
    Ok(())
}

/// Reads a run directory's trained checkpoint back for inspection.
pub fn load_run(cfg: &ExperimentConfig, out: &Path, step: usize) -> Result<ParamStore, CliError> {
    let run = RunDir { root: out.to_path_buf() };
    Ok(load_checkpoint(&run.checkpoint(step), &cfg.model)?.0)
}
