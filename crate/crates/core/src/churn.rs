//! Churn: how far each module's weights have moved since initialization,
//! relative to the same module in the other layers.
//!
//! For module `m` at layer `l` the raw value is `‖W(t) − W(0)‖_F` over every
//! weight tensor labeled `(m, l)`; the churn is that value divided by its
//! maximum over layers. Running-statistic buffers are not weights and are
//! skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use crate::model::{Module, ModelError, ParamStore, Role};

/// `‖W^{m,l}(t) − W^{m,l}(0)‖_F` over every weight tensor labeled `(m, l)`.
pub fn weight_delta_norm(
    params_t: &ParamStore,
    params_0: &ParamStore,
    module: Module,
    layer: usize,
) -> Result<f64, ModelError> {
    params_t.check_compatible(params_0)?;
    let mut sq = 0.0;
    for (key, entry) in params_t.iter() {
        if entry.role != Role::Weight || key.module != module || key.slot.encoder_index() != Some(layer) {
            continue;
        }
        let before = params_0.tensor(key)?;
        sq += entry
            .tensor
            .data()
            .iter()
            .zip(before.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sq.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChurnTable {
    pub step: usize,
    pub num_layers: usize,
    pub churn: BTreeMap<(Module, usize), f64>,
    pub raw: BTreeMap<(Module, usize), f64>,
}

impl ChurnTable {
    /// Builds the normalized table from raw deltas. Rows whose maximum is
    /// zero are reported as all 0.0.
    pub fn from_raw(step: usize, num_layers: usize, raw: BTreeMap<(Module, usize), f64>) -> Self {
        let mut max: BTreeMap<Module, f64> = BTreeMap::new();
        for (&(m, _), &v) in &raw {
            let e = max.entry(m).or_insert(0.0);
            *e = e.max(v);
        }
        let churn = raw
            .iter()
            .map(|(&(m, l), &v)| {
                let denom = max[&m];
                ((m, l), if denom > 0.0 { v / denom } else { 0.0 })
            })
            .collect();
        Self {
            step,
            num_layers,
            churn,
            raw,
        }
    }

    pub fn modules(&self) -> Vec<Module> {
        let mut out: Vec<Module> = self.churn.keys().map(|(m, _)| *m).collect();
        out.dedup();
        out
    }

    /// Normalized values for `module`, indexed by layer.
    pub fn row(&self, module: Module) -> Vec<f64> {
        (0..self.num_layers).map(|l| self.churn.get(&(module, l)).copied().unwrap_or(0.0)).collect()
    }

    pub fn raw_row(&self, module: Module) -> Vec<f64> {
        (0..self.num_layers).map(|l| self.raw.get(&(module, l)).copied().unwrap_or(0.0)).collect()
    }

    /// Rows sorted by module label, then layer.
    pub fn sorted_rows(&self) -> Vec<(Module, usize, f64, f64)> {
        let mut rows: Vec<_> = self.churn.iter().map(|(&(m, l), &c)| (m, l, c, self.raw[&(m, l)])).collect();
        rows.sort_by(|a, b| a.0.label().cmp(b.0.label()).then(a.1.cmp(&b.1)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("module,layer,churn,raw\n");
        for (m, l, c, r) in self.sorted_rows() {
            writeln!(s, "{},{},{},{}", m.label(), l, sig9(c), sig9(r)).unwrap();
        }
        s
    }
}

/// Churn for every encoder module label at every layer.
pub fn churn_table(params_t: &ParamStore, params_0: &ParamStore, step: usize) -> Result<ChurnTable, ModelError> {
    churn_table_for(params_t, params_0, step, &Module::ENCODER)
}

/// Churn restricted to the given module labels.
pub fn churn_table_for(
    params_t: &ParamStore,
    params_0: &ParamStore,
    step: usize,
    modules: &[Module],
) -> Result<ChurnTable, ModelError> {
    let layers = params_t.config().num_layers;
    let mut raw = BTreeMap::new();
    for &m in modules {
        for l in 0..layers {
            raw.insert((m, l), weight_delta_norm(params_t, params_0, m, l)?);
        }
    }
    Ok(ChurnTable::from_raw(step, layers, raw))
}

/// Nine significant digits in scientific notation.
pub fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn emit_churn_csv(table: &ChurnTable, path: &Path) -> io::Result<()> {
    std::fs::write(path, table.to_csv())
}

/// Mean churn of `modules` over the upper half of the layers minus the mean
/// over the lower half. With an odd layer count the middle layer is left out.
pub fn upper_minus_lower(table: &ChurnTable, modules: &[Module]) -> f64 {
    let d = table.num_layers;
    let half = d / 2;
    let mean = |range: std::ops::Range<usize>| {
        let mut sum = 0.0;
        let mut n = 0;
        for &m in modules {
            for l in range.clone() {
                sum += table.churn.get(&(m, l)).copied().unwrap_or(0.0);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    mean(d - half..d) - mean(0..half)
}
