use std::fmt;
use std::str::FromStr;

use super::FlError;
use crate::ablation::LayerClassification;

/// Per-layer dropout rates. `Ambient` and `Critical` apply `rate` to the
/// `n` most ambient or most critical layers of a classification and leave
/// the rest whole; `Flat` applies `rate` everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DropoutSchedule {
    None,
    Flat { rate: f64 },
    Ambient { n: usize, rate: f64 },
    Critical { n: usize, rate: f64 },
}

fn check_rate(rate: f64) -> Result<(), FlError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FlError::InvalidSchedule(format!("rate {rate} outside [0, 1)")));
    }
    Ok(())
}

impl DropoutSchedule {
    pub fn validate(&self, num_layers: usize) -> Result<(), FlError> {
        match *self {
            DropoutSchedule::None => Ok(()),
            DropoutSchedule::Flat { rate } => check_rate(rate),
            DropoutSchedule::Ambient { n, rate } | DropoutSchedule::Critical { n, rate } => {
                if n > num_layers {
                    return Err(FlError::InvalidSchedule(format!(
                        "{n} targeted layers but the model has {num_layers}"
                    )));
                }
                check_rate(rate)
            }
        }
    }

    /// Rate for each encoder layer.
    pub fn layer_rates(&self, classification: &LayerClassification, num_layers: usize) -> Result<Vec<f64>, FlError> {
        self.validate(num_layers)?;
        if classification.num_layers() != num_layers {
            return Err(FlError::InvalidSchedule(format!(
                "classification covers {} layers, model has {num_layers}",
                classification.num_layers()
            )));
        }
        let mut rates = vec![0.0; num_layers];
        match *self {
            DropoutSchedule::None => {}
            DropoutSchedule::Flat { rate } => rates.fill(rate),
            DropoutSchedule::Ambient { n, rate } => {
                for &d in classification.most_ambient(n) {
                    rates[d] = rate;
                }
            }
            DropoutSchedule::Critical { n, rate } => {
                for d in classification.most_critical(n) {
                    rates[d] = rate;
                }
            }
        }
        Ok(rates)
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DropoutSchedule::None)
    }
}

fn percent(rate: f64) -> String {
    let p = rate * 100.0;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round() as i64)
    } else {
        format!("{p}%")
    }
}

impl fmt::Display for DropoutSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DropoutSchedule::None => f.write_str("none"),
            DropoutSchedule::Flat { rate } => write!(f, "Flat@{}", percent(rate)),
            DropoutSchedule::Ambient { n, rate } => write!(f, "Amb-{n}@{}", percent(rate)),
            DropoutSchedule::Critical { n, rate } => write!(f, "Crit-{n}@{}", percent(rate)),
        }
    }
}

/// Parses `none`, `Flat@20%`, `Amb-2@50%` or `Crit-3@50%` (case-insensitive).
impl FromStr for DropoutSchedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "none" {
            return Ok(DropoutSchedule::None);
        }
        let bad = || format!("unrecognized dropout schedule `{s}`");
        let (head, pct) = lower.split_once('@').ok_or_else(bad)?;
        let pct: f64 = pct.strip_suffix('%').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let rate = pct / 100.0;
        if head == "flat" {
            return Ok(DropoutSchedule::Flat { rate });
        }
        let (kind, n) = head.split_once('-').ok_or_else(bad)?;
        let n: usize = n.parse().map_err(|_| bad())?;
        match kind {
            "amb" => Ok(DropoutSchedule::Ambient { n, rate }),
            "crit" => Ok(DropoutSchedule::Critical { n, rate }),
            _ => Err(bad()),
        }
    }
}
