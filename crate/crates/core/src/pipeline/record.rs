//! Stage-tagged metric time series and run summaries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::criteria::PruneDecision;
use crate::error::{Error, Result};
use crate::surgery::SurgeryPlan;

pub const CSV_HEADER: [&str; 5] = ["stage", "step", "layer", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub stage: String,
    pub step: u64,
    /// Empty for model-level metrics.
    pub layer: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Everything a run measured. `points` feed the CSV export; the remaining
/// fields form the JSON summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub architecture: String,
    pub dataset: String,
    pub criterion: String,
    pub pipeline: String,
    /// Fraction of all conv filters removed (0 before pruning).
    pub pruned_fraction: f64,
    /// Nominal uniform prune rate of the config (for tables).
    pub prune_rate: f64,
    pub seed: u64,
    pub status: RunStatus,
    pub points: Vec<MetricPoint>,
    pub decisions: Vec<PruneDecision>,
    pub surgery: Option<SurgeryPlan>,
    /// Accuracy milestones keyed by name (`pretrain`, `admm`, `pruned`, `final`, ...).
    pub accuracy: BTreeMap<String, f64>,
    pub final_accuracy: Option<f64>,
    pub admm_converged: Option<bool>,
    pub admm_iterations: Option<u64>,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per stage; summary only, never part of the CSV.
    pub stage_seconds: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            architecture: String::new(),
            dataset: String::new(),
            criterion: String::new(),
            pipeline: String::new(),
            pruned_fraction: 0.0,
            prune_rate: 0.0,
            seed: 0,
            status: RunStatus::Running,
            points: Vec::new(),
            decisions: Vec::new(),
            surgery: None,
            accuracy: BTreeMap::new(),
            final_accuracy: None,
            admm_converged: None,
            admm_iterations: None,
            warnings: Vec::new(),
            stage_seconds: BTreeMap::new(),
            error: None,
        }
    }

    pub fn push(&mut self, stage: &str, step: u64, layer: &str, metric: &str, value: f64) {
        self.points.push(MetricPoint {
            stage: stage.into(),
            step,
            layer: layer.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let m = message.into();
        log::warn!("{m}");
        self.warnings.push(m);
    }

    /// Points of one `(stage, metric, layer)` series in recording order.
    pub fn series(&self, stage: &str, metric: &str, layer: &str) -> Vec<(u64, f64)> {
        self.points
            .iter()
            .filter(|p| p.stage == stage && p.metric == metric && p.layer == layer)
            .map(|p| (p.step, p.value))
            .collect()
    }

    /// Checks that steps strictly increase within every series, values are
    /// finite and accuracies lie in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let mut last: HashMap<(&str, &str, &str), u64> = HashMap::new();
        for p in &self.points {
            if !p.value.is_finite() {
                return Err(Error::Numeric { layer: p.layer.clone(), detail: format!("non-finite {}", p.metric) });
            }
            if p.metric.ends_with("accuracy") && !(0.0..=1.0).contains(&p.value) {
                return Err(Error::Integrity(format!("{} = {} outside [0, 1]", p.metric, p.value)));
            }
            let key = (p.stage.as_str(), p.metric.as_str(), p.layer.as_str());
            if let Some(&prev) = last.get(&key) {
                if p.step <= prev {
                    return Err(Error::Integrity(format!(
                        "step {} after {prev} in series {}/{}/{}",
                        p.step, p.stage, p.metric, p.layer
                    )));
                }
            }
            last.insert(key, p.step);
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.stage.as_str(), &p.step.to_string(), &p.layer, &p.metric, &format_value(p.value)])
                .map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Integrity(e.to_string()))
    }

    /// Parses CSV produced by [`Self::to_csv`].
    pub fn points_from_csv(bytes: &[u8]) -> Result<Vec<MetricPoint>> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(Error::Integrity(format!("unexpected CSV header {header:?}")));
        }
        let mut out = Vec::new();
        for row in r.records() {
            let row = row.map_err(csv_err)?;
            let parse_err = |what: &str| Error::Integrity(format!("bad {what} in CSV row {row:?}"));
            out.push(MetricPoint {
                stage: row[0].to_string(),
                step: row[1].parse().map_err(|_| parse_err("step"))?,
                layer: row[2].to_string(),
                metric: row[3].to_string(),
                value: row[4].parse().map_err(|_| parse_err("value"))?,
            });
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Integrity(format!("run record: {e}")))
    }

    /// Compact summary without the per-step points.
    pub fn summary_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("points");
            obj.remove("decisions");
            obj.insert("points_recorded".into(), self.points.len().into());
        }
        serde_json::to_string_pretty(&v).expect("summary serializes")
    }

    /// Loads `record.json` from a run directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("record.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

/// Shortest round-trip decimal form; identical values give identical bytes.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Integrity(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut r = RunRecord::new("a");
        r.push("pretrain", 1, "", "test_accuracy", 0.5);
        r.push("admm", 1, "conv1", "wz_distance", 1.0 / 3.0);
        let bytes = r.to_csv().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("stage,step,layer,metric,value\n"));
        assert_eq!(RunRecord::points_from_csv(&bytes).unwrap(), r.points);
    }

    #[test]
    fn validate_catches_bad_series() {
        let mut r = RunRecord::new("a");
        r.push("ft", 1, "", "loss", 1.0);
        r.push("ft", 1, "conv1", "loss", 1.0);
        r.validate().unwrap();
        r.push("ft", 1, "", "loss", 0.5);
        assert!(r.validate().is_err());
        let mut r = RunRecord::new("b");
        r.push("ft", 1, "", "test_accuracy", 1.5);
        assert!(r.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut r = RunRecord::new("x");
        r.accuracy.insert("final".into(), 0.9);
        r.push("s", 0, "", "m", 2.0);
        assert_eq!(RunRecord::from_json(&r.to_json()).unwrap(), r);
        assert!(!r.summary_json().contains("\"points\""));
    }
}
