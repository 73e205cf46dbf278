use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const HEADER: &str = "step,loss_total,loss_rec,loss_vq,loss_ac,loss_proprio,mean_z_norm,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Collapse,
    Explode,
}

impl Stability {
    pub fn as_str(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Collapse => "collapse",
            Stability::Explode => "explode",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stable" => Some(Stability::Stable),
            "collapse" => Some(Stability::Collapse),
            "explode" => Some(Stability::Explode),
            _ => None,
        }
    }
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityThresholds {
    /// Explode when mean ‖z‖ exceeds this multiple of the first logged value.
    pub explode_factor: f64,
    /// Collapse when the final-window mean ‖z‖ drops below this fraction.
    pub collapse_fraction: f64,
    /// Final window as a fraction of logged steps.
    pub final_window: f64,
}

impl Default for StabilityThresholds {
    fn default() -> Self {
        StabilityThresholds {
            explode_factor: 10.0,
            collapse_fraction: 0.05,
            final_window: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss_total: f64,
    pub loss_rec: f64,
    pub loss_vq: f64,
    pub loss_ac: f64,
    pub loss_proprio: f64,
    pub mean_z_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub records: Vec<StepRecord>,
    pub status: Option<Stability>,
}

impl StepLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.step, r.loss_total, r.loss_rec, r.loss_vq, r.loss_ac, r.loss_proprio, r.mean_z_norm, r.lr
            );
        }
        if let Some(st) = self.status {
            let _ = writeln!(s, "status,{st}");
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<StepLog, String> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err("missing step-log header".into());
        }
        let mut log = StepLog::default();
        for (n, line) in lines.enumerate() {
            if let Some(st) = line.strip_prefix("status,") {
                log.status = Some(Stability::parse(st).ok_or(format!("bad status {st:?}"))?);
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields", n + 2));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|e| format!("line {}: {e}", n + 2))
            };
            log.records.push(StepRecord {
                step: f[0].parse().map_err(|e| format!("line {}: {e}", n + 2))?,
                loss_total: num(1)?,
                loss_rec: num(2)?,
                loss_vq: num(3)?,
                loss_ac: num(4)?,
                loss_proprio: num(5)?,
                mean_z_norm: num(6)?,
                lr: num(7)?,
            });
        }
        Ok(log)
    }
}

/// Labels a run from its mean-‖z‖ series and losses. `None` for an empty log.
pub fn classify_stability(log: &StepLog, th: &StabilityThresholds) -> Option<Stability> {
    let first = log.records.first()?.mean_z_norm;
    let finite = log.records.iter().all(|r| {
        [r.loss_total, r.loss_rec, r.loss_vq, r.loss_ac, r.loss_proprio, r.mean_z_norm]
            .iter()
            .all(|v| v.is_finite())
    });
    if !finite || log.records.iter().any(|r| r.mean_z_norm > th.explode_factor * first) {
        return Some(Stability::Explode);
    }
    let n = log.records.len();
    let w = ((n as f64 * th.final_window).ceil() as usize).clamp(1, n);
    let tail = log.records[n - w..].iter().map(|r| r.mean_z_norm).sum::<f64>() / w as f64;
    if tail < th.collapse_fraction * first {
        return Some(Stability::Collapse);
    }
    Some(Stability::Stable)
}
