//! Named experiment bundles. Each bundle is a list of labelled configs that
//! differ only in the variable under study.

use std::path::Path;

use super::{cmd_report, run_pipeline, CliError, ExperimentConfig};
use crate::ablation::ResetMode;
use crate::flsim::DropoutSchedule;
use crate::model::{ModelConfig, NormKind, SizePreset};

pub const PRESET_NAMES: [&str; 4] = ["bn_vs_gn", "reinit_vs_rerand", "stability5", "table3_analog"];

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    /// `(run label, config)`; each label becomes a subdirectory.
    pub runs: Vec<(String, ExperimentConfig)>,
}

fn seeded(base: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        root_seed: seed,
        ..base.clone()
    }
}

pub fn table3_schedules() -> Vec<DropoutSchedule> {
    use DropoutSchedule::*;
    vec![
        Critical { n: 2, rate: 0.5 },
        Ambient { n: 2, rate: 0.5 },
        Critical { n: 3, rate: 0.5 },
        Ambient { n: 3, rate: 0.5 },
        Critical { n: 4, rate: 0.5 },
        Flat { rate: 0.2 },
        Ambient { n: 4, rate: 0.5 },
        None,
    ]
}

/// Builds the named bundle. `base_seed` shifts every root seed.
pub fn preset_experiments(name: &str, base_seed: u64) -> Result<Preset, CliError> {
    let base = ExperimentConfig::default();
    let runs = match name {
        "bn_vs_gn" => {
            let mut runs = Vec::new();
            for s in 0..3 {
                for norm in [NormKind::Group, NormKind::Batch] {
                    let mut cfg = seeded(&base, base_seed + s);
                    cfg.model.norm_kind = norm;
                    runs.push((format!("{norm}_seed_{}", base_seed + s), cfg));
                }
            }
            runs
        }
        "reinit_vs_rerand" => [SizePreset::ToyS, SizePreset::ToyM, SizePreset::ToyL]
            .into_iter()
            .map(|size| {
                let mut cfg = seeded(&base, base_seed);
                cfg.model = ModelConfig::preset(size);
                cfg.ablation.modes = vec![ResetMode::Reinit, ResetMode::Rerand];
                (format!("{size}_seed_{base_seed}"), cfg)
            })
            .collect(),
        "stability5" => (0..5)
            .map(|s| (format!("seed_{}", base_seed + s), seeded(&base, base_seed + s)))
            .collect(),
        "table3_analog" => (0..3)
            .map(|s| {
                let mut cfg = seeded(&base, base_seed + s);
                cfg.fl.schedules = table3_schedules();
                (format!("seed_{}", base_seed + s), cfg)
            })
            .collect(),
        other => return Err(CliError::UnknownPreset(other.to_string())),
    };
    Ok(Preset {
        name: name.to_string(),
        runs,
    })
}

/// Runs every config of a preset into `out/<label>`, then aggregates.
pub fn run_preset(preset: &Preset, out: &Path) -> Result<(), CliError> {
    for (label, cfg) in &preset.runs {
        cfg.validate()?;
        run_pipeline(cfg, &out.join(label))?;
    }
    cmd_report(out)?;
    Ok(())
}
