//! Training diagnostics and report export.
//!
//! Report bundle layout (all names derive from run ids):
//!
//! ```text
//! <out>/metrics/<run_id>/<metric>.csv   one file per metric, `stage,step,layer,metric,value`
//! <out>/comparison.csv                  ratio × method → final accuracy
//! <out>/comparison.md                   the same table in markdown
//! <out>/plots/wz_<run_id>.png           ‖W−Z‖_F per layer over outer ADMM iterations
//! <out>/plots/l1_<run_id>.png           per-layer filter l1 histograms before pruning
//! <out>/plots/accuracy_<run_id>.png     test accuracy across all stages
//! <out>/plots/comparison.png            accuracy against prune ratio, one line per method
//! ```
//!
//! For `filter_l1` points the `step` column holds the filter index.

mod plot;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::admm::{filter_norms, AdmmState, Norm};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{MetricPoint, RunRecord, RunStatus, CSV_HEADER};

/// Bins of the l1 histograms, spread uniformly over `[0, layer max]`.
pub const HISTOGRAM_BINS: usize = 50;

/// `‖W_i − Z_i‖_F` for every constrained layer.
pub fn wz_distance_snapshot(model: &Model, state: &AdmmState) -> Result<Vec<(String, f64)>> {
    state
        .specs
        .iter()
        .zip(&state.z)
        .map(|(spec, z)| {
            let w = model.get_weights(&spec.layer_id)?;
            Ok((spec.layer_id.clone(), w.distance_sq(z)?.sqrt()))
        })
        .collect()
}

/// Per-filter l1 norms of every conv layer.
pub fn l1_snapshot(model: &Model) -> Vec<(String, Vec<f64>)> {
    model.conv_layers().iter().map(|l| (l.id().to_string(), filter_norms(l.weight(), Norm::L1))).collect()
}

/// Fraction of filters whose l1 norm is at most `rel` times the layer maximum.
pub fn near_zero_fraction(norms: &[f64], rel: f64) -> f64 {
    let max = norms.iter().copied().fold(0.0f64, f64::max);
    if norms.is_empty() {
        return 0.0;
    }
    norms.iter().filter(|&&v| v <= rel * max).count() as f64 / norms.len() as f64
}

/// Counts per bin of `values` over `[0, max]`; the maximum lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> (f64, Vec<usize>) {
    let bins = bins.max(1);
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = if max > 0.0 { ((v / max) * bins as f64).floor() as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    (max, counts)
}

/// Column label of a record in comparison tables.
pub fn method_labels(record: &RunRecord) -> Vec<(String, Option<f64>)> {
    if record.pipeline == "iterative_te" {
        let mut out = vec![("iterative_te".to_string(), record.accuracy.get("iterative").copied())];
        if let Some(&acc) = record.accuracy.get("extra_finetune") {
            out.push(("iterative_te_extra_ft".to_string(), Some(acc)));
        }
        out
    } else {
        vec![(record.criterion.clone(), record.final_accuracy)]
    }
}

fn ratio_label(rate: f64) -> String {
    format!("{}%", (rate * 1000.0).round() / 10.0)
}

/// Mean final accuracy per (ratio, method).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub methods: Vec<String>,
    /// `(ratio, cells)` sorted by ratio; cells align with `methods`.
    pub rows: Vec<(f64, Vec<Option<f64>>)>,
}

pub fn comparison_table(records: &[RunRecord]) -> ComparisonTable {
    let mut methods = Vec::<String>::new();
    let mut cells: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    let mut ratios = BTreeMap::<u64, f64>::new();
    for r in records {
        let key = r.prune_rate.to_bits();
        ratios.insert(key, r.prune_rate);
        for (label, acc) in method_labels(r) {
            if !methods.contains(&label) {
                methods.push(label.clone());
            }
            if let Some(a) = acc {
                cells.entry((key, label)).or_default().push(a);
            }
        }
    }
    let mut rows: Vec<(f64, Vec<Option<f64>>)> = ratios
        .iter()
        .map(|(&k, &ratio)| {
            let row = methods
                .iter()
                .map(|m| cells.get(&(k, m.clone())).map(|v| v.iter().sum::<f64>() / v.len() as f64))
                .collect();
            (ratio, row)
        })
        .collect();
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    ComparisonTable { methods, rows }
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["ratio".to_string()];
        header.extend(self.methods.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Integrity(e.to_string()))?;
        for (ratio, row) in &self.rows {
            let mut rec = vec![format!("{ratio:?}")];
            rec.extend(row.iter().map(|c| c.map(|v| format!("{v:?}")).unwrap_or_default()));
            w.write_record(&rec).map_err(|e| Error::Integrity(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::Integrity(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| Pruning ratio | {} |\n", self.methods.join(" | "));
        s.push_str(&format!("|---|{}\n", "---|".repeat(self.methods.len())));
        for (ratio, row) in &self.rows {
            let cells: Vec<String> =
                row.iter().map(|c| c.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "-".into())).collect();
            s.push_str(&format!("| {} | {} |\n", ratio_label(*ratio), cells.join(" | ")));
        }
        s
    }
}

/// Files written by [`export_report`], relative to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportBundle {
    pub root: PathBuf,
    pub files: Vec<PathBuf>,
}

fn safe_name(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn metric_csv(points: &[&MetricPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(|e| Error::Integrity(e.to_string()))?;
    for p in points {
        w.write_record([
            p.stage.as_str(),
            &p.step.to_string(),
            &p.layer,
            &p.metric,
            &crate::pipeline::record::format_value(p.value),
        ])
        .map_err(|e| Error::Integrity(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Integrity(e.to_string()))
}

/// Writes per-metric CSVs, the comparison table and plots for `records`.
pub fn export_report(records: &[RunRecord], out: &Path) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(Error::Usage("no run records to report".into()));
    }
    let mut ids = BTreeSet::new();
    for r in records {
        if r.status != RunStatus::Complete {
            return Err(Error::Usage(format!("run `{}` is not complete", r.run_id)));
        }
        if !ids.insert(r.run_id.as_str()) {
            return Err(Error::Usage(format!("run id `{}` appears twice", r.run_id)));
        }
    }
    let mut bundle = ReportBundle { root: out.to_path_buf(), files: Vec::new() };
    let mut write = |rel: PathBuf, bytes: &[u8]| -> Result<()> {
        let p = out.join(&rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        bundle.files.push(rel);
        Ok(())
    };
    for r in records {
        let metrics: BTreeSet<&str> = r.points.iter().map(|p| p.metric.as_str()).collect();
        for m in metrics {
            let pts: Vec<&MetricPoint> = r.points.iter().filter(|p| p.metric == m).collect();
            let rel = PathBuf::from("metrics").join(safe_name(&r.run_id)).join(format!("{}.csv", safe_name(m)));
            write(rel, &metric_csv(&pts)?)?;
        }
    }
    let table = comparison_table(records);
    write("comparison.csv".into(), &table.to_csv()?)?;
    write("comparison.md".into(), table.to_markdown().as_bytes())?;

    let plots = out.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut images = Vec::new();
    for r in records {
        let id = safe_name(&r.run_id);
        let wz = plot::layer_series(r, "admm", "wz_distance");
        if !wz.is_empty() {
            let rel = PathBuf::from("plots").join(format!("wz_{id}.png"));
            plot::lines(&out.join(&rel), &wz)?;
            images.push(rel);
        }
        let stage = if r.points.iter().any(|p| p.stage == "admm" && p.metric == "filter_l1") { "admm" } else { "pretrain" };
        let l1 = plot::l1_by_layer(r, stage);
        if !l1.is_empty() {
            let rel = PathBuf::from("plots").join(format!("l1_{id}.png"));
            plot::histograms(&out.join(&rel), &l1)?;
            images.push(rel);
        }
        let acc = plot::accuracy_curve(r);
        if !acc.is_empty() {
            let rel = PathBuf::from("plots").join(format!("accuracy_{id}.png"));
            plot::lines(&out.join(&rel), &[("accuracy".to_string(), acc)])?;
            images.push(rel);
        }
    }
    let lines: Vec<(String, Vec<(f64, f64)>)> = table
        .methods
        .iter()
        .enumerate()
        .map(|(mi, m)| (m.clone(), table.rows.iter().filter_map(|(x, row)| row[mi].map(|v| (*x, v))).collect()))
        .collect();
    let rel = PathBuf::from("plots").join("comparison.png");
    plot::lines(&out.join(&rel), &lines)?;
    images.push(rel);
    bundle.files.extend(images);
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::{init_state, LayerSparsitySpec};
    use crate::arch::{build_model, ArchitectureSpec};
    use crate::tensor::FilterTensor;

    #[test]
    fn wz_scalar_hand_case() {
        let mut model = build_model(&ArchitectureSpec::toy(), 1).unwrap();
        let specs: Vec<_> = model
            .list_conv_layers()
            .unwrap()
            .iter()
            .map(|h| LayerSparsitySpec::with_keep(&h.layer_id, h.n_filters, h.n_filters, 1.0, 1.0))
            .collect();
        let mut state = init_state(&model, &specs, Norm::L1).unwrap();
        for (l, d) in wz_distance_snapshot(&model, &state).unwrap() {
            assert_eq!(d, 0.0, "{l}");
        }
        let mut w = model.get_weights("conv1").unwrap();
        w.as_mut_slice().fill(0.0);
        w.as_mut_slice()[0] = 3.0;
        model.set_weights("conv1", w.clone()).unwrap();
        let mut z = w.zeros_like();
        z.as_mut_slice()[0] = 1.0;
        state.z[0] = z;
        assert_eq!(wz_distance_snapshot(&model, &state).unwrap()[0].1, 2.0);
        state.z[0] = FilterTensor::zeros("conv1", [1, 1, 3, 3]).unwrap();
        assert!(matches!(wz_distance_snapshot(&model, &state), Err(Error::Dimension { .. })));
    }

    #[test]
    fn histogram_bins_cover_range() {
        let (max, c) = histogram(&[0.0, 0.5, 1.0, 1.0], 4);
        assert_eq!(max, 1.0);
        assert_eq!(c, [1, 0, 1, 2]);
        assert_eq!(histogram(&[0.0, 0.0], 3).1, [2, 0, 0]);
        assert_eq!(near_zero_fraction(&[0.0, 0.005, 1.0, 0.5], 0.01), 0.5);
    }

    #[test]
    fn table_layout() {
        let mk = |id: &str, crit: &str, rate: f64, acc: f64| {
            let mut r = RunRecord::new(id);
            r.status = RunStatus::Complete;
            r.criterion = crit.into();
            r.pipeline = "single_shot".into();
            r.prune_rate = rate;
            r.final_accuracy = Some(acc);
            r
        };
        let t = comparison_table(&[mk("a", "admm", 0.5, 0.8), mk("b", "admm", 0.75, 0.7), mk("c", "taylor", 0.5, 0.6)]);
        assert_eq!(t.methods, ["admm", "taylor"]);
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[1].1, vec![Some(0.7), None]);
        let md = t.to_markdown();
        assert!(md.contains("| 50% | 80.00% | 60.00% |"), "{md}");
        assert!(md.contains("| 75% | 70.00% | - |"));
    }
}
