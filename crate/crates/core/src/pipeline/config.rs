//! Declarative run configuration (TOML) with dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::admm::{Norm, StopRule, DEFAULT_EPS_PER_ELEMENT, DEFAULT_RHO};
use crate::arch::ArchitectureSpec;
use crate::criteria::Criterion;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every random choice of a run derives from this value.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterative: Option<IterativeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `lenet5`, `alexnet` or `toy`.
    pub architecture: String,
    /// Optional per-layer filter counts replacing the preset widths.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `synthetic`, `mnist` or `cifar10`.
    pub dataset: String,
    #[serde(default = "one")]
    pub subset: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Synthetic only: training samples per class.
    #[serde(default = "default_n_per_class")]
    pub n_per_class: usize,
    /// Synthetic only: test samples per class.
    #[serde(default = "default_n_test")]
    pub n_test_per_class: usize,
    /// Synthetic only: pixel noise standard deviation.
    #[serde(default = "default_difficulty")]
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_pretrain")]
    pub pretrain_epochs: usize,
    /// Cap on the ADMM stage.
    #[serde(default = "default_admm_epochs")]
    pub admm_epochs: usize,
    #[serde(default = "default_finetune")]
    pub finetune_epochs: usize,
    /// Skip pretraining and start ADMM from the initial weights.
    #[serde(default)]
    pub admm_from_scratch: bool,
    /// Start from this checkpoint instead of pretraining.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    /// Record the loss of every minibatch step in addition to epoch means.
    #[serde(default)]
    pub record_step_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmmConfig {
    /// Uniform fraction of filters removed from every conv layer.
    #[serde(default = "default_rate")]
    pub prune_rate: f64,
    /// Per-layer rates; overrides `prune_rate` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_rates: Option<Vec<f64>>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_rho: Option<Vec<f64>>,
    /// `ε_i = eps_per_element · numel(W_i)` unless `layer_eps` is given.
    #[serde(default = "default_eps")]
    pub eps_per_element: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_eps: Option<Vec<f64>>,
    #[serde(default)]
    pub norm: Norm,
    /// Minibatch steps per outer iteration; 0 means one epoch.
    #[serde(default)]
    pub update_interval: usize,
    #[serde(default)]
    pub stop_rule: StopRule,
    /// Leave the loop as soon as every layer passes the stop test.
    #[serde(default = "yes")]
    pub stop_on_convergence: bool,
    /// Outer iterations without a new minimum of `‖W − Z‖` before warning.
    #[serde(default = "default_patience")]
    pub patience: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    /// Filter-cardinality ADMM training, then l1 removal.
    #[default]
    Admm,
    /// Element-cardinality ADMM training, then l1 filter removal.
    AdmmWeight,
    MinWeight,
    MeanActivation,
    Taylor,
    Random,
}

impl PruneMethod {
    pub fn uses_admm(self) -> bool {
        matches!(self, PruneMethod::Admm | PruneMethod::AdmmWeight)
    }

    pub fn criterion(self) -> Criterion {
        match self {
            PruneMethod::Admm | PruneMethod::AdmmWeight => Criterion::AdmmL1,
            PruneMethod::MinWeight => Criterion::MinWeight,
            PruneMethod::MeanActivation => Criterion::MeanActivation,
            PruneMethod::Taylor => Criterion::Taylor,
            PruneMethod::Random => Criterion::Random,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PruneMethod::Admm => "admm",
            PruneMethod::AdmmWeight => "admm_weight",
            PruneMethod::MinWeight => "min_weight",
            PruneMethod::MeanActivation => "mean_activation",
            PruneMethod::Taylor => "taylor",
            PruneMethod::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    #[serde(default)]
    pub criterion: PruneMethod,
    /// Minibatches fed to the data-dependent criteria.
    #[serde(default = "default_stat_batches")]
    pub stat_batches: usize,
    #[serde(default = "default_stat_batch_size")]
    pub stat_batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    #[default]
    SingleShot,
    IterativeTe,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub kind: PipelineKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterativeConfig {
    #[serde(default = "default_per_round")]
    pub filters_per_round: usize,
    #[serde(default = "default_updates")]
    pub updates_per_round: usize,
    #[serde(default = "default_stat_batch_size")]
    pub batch_size: usize,
    #[serde(default = "yes")]
    pub extra_finetune: bool,
    #[serde(default = "default_finetune")]
    pub extra_finetune_epochs: usize,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn default_batch() -> usize {
    64
}
fn default_n_per_class() -> usize {
    300
}
fn default_n_test() -> usize {
    200
}
fn default_difficulty() -> f64 {
    0.5
}
fn default_lr() -> f64 {
    1e-4
}
fn default_wd() -> f64 {
    5e-4
}
fn default_pretrain() -> usize {
    30
}
fn default_admm_epochs() -> usize {
    60
}
fn default_finetune() -> usize {
    100
}
fn default_rate() -> f64 {
    0.5
}
fn default_rho() -> f64 {
    DEFAULT_RHO
}
fn default_eps() -> f64 {
    DEFAULT_EPS_PER_ELEMENT
}
fn default_patience() -> usize {
    5
}
fn default_stat_batches() -> usize {
    10
}
fn default_stat_batch_size() -> usize {
    50
}
fn default_per_round() -> usize {
    10
}
fn default_updates() -> usize {
    500
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            weight_decay: default_wd(),
            pretrain_epochs: default_pretrain(),
            admm_epochs: default_admm_epochs(),
            finetune_epochs: default_finetune(),
            admm_from_scratch: false,
            init_checkpoint: None,
            record_step_loss: false,
        }
    }
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            prune_rate: default_rate(),
            layer_rates: None,
            rho: default_rho(),
            layer_rho: None,
            eps_per_element: default_eps(),
            layer_eps: None,
            norm: Norm::L1,
            update_interval: 0,
            stop_rule: StopRule::Both,
            stop_on_convergence: true,
            patience: default_patience(),
        }
    }
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            criterion: PruneMethod::Admm,
            stat_batches: default_stat_batches(),
            stat_batch_size: default_stat_batch_size(),
        }
    }
}

impl Default for IterativeConfig {
    fn default() -> Self {
        Self {
            filters_per_round: default_per_round(),
            updates_per_round: default_updates(),
            batch_size: default_stat_batch_size(),
            extra_finetune: true,
            extra_finetune_epochs: default_finetune(),
        }
    }
}

impl RunConfig {
    /// Parses TOML text, applies `overrides` (dotted `key=value` pairs) and
    /// validates the result.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table = parse_table(text)?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        Self::from_table(table)
    }

    /// Deserializes and validates an already merged table.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        Ok(config)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec::by_name(&self.model.architecture)?;
        match &self.model.filters {
            Some(f) => spec.with_filters(f),
            None => Ok(spec),
        }
    }

    /// Per-layer prune rates for `layers` conv layers.
    pub fn layer_rates(&self, layers: usize) -> Result<Vec<f64>> {
        per_layer(&self.admm.layer_rates, self.admm.prune_rate, layers, "admm.layer_rates")
    }

    pub fn layer_rho(&self, layers: usize) -> Result<Vec<f64>> {
        per_layer(&self.admm.layer_rho, self.admm.rho, layers, "admm.layer_rho")
    }

    /// Every validation failure, empty when the config is usable.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let t = &self.train;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            out.push(format!("train.learning_rate must be positive, got {}", t.learning_rate));
        }
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            out.push("train.weight_decay must be non-negative".into());
        }
        if !(self.data.subset > 0.0 && self.data.subset <= 1.0) {
            out.push(format!("data.subset {} must lie in (0, 1]", self.data.subset));
        }
        if self.data.batch_size == 0 {
            out.push("data.batch_size must be at least 1".into());
        }
        if !["synthetic", "mnist", "cifar10"].contains(&self.data.dataset.as_str()) {
            out.push(format!("unknown data.dataset `{}`", self.data.dataset));
        }
        if self.data.dataset == "synthetic" && (self.data.n_per_class == 0 || self.data.n_test_per_class == 0) {
            out.push("synthetic data needs n_per_class and n_test_per_class ≥ 1".into());
        }
        let layers = match self.architecture() {
            Ok(a) => Some(a.convs.len()),
            Err(e) => {
                out.push(e.to_string());
                None
            }
        };
        let a = &self.admm;
        let rates = match (&a.layer_rates, layers) {
            (Some(r), Some(n)) if r.len() != n => {
                out.push(format!("admm.layer_rates has {} entries for {n} conv layers", r.len()));
                r.clone()
            }
            (Some(r), _) => r.clone(),
            (None, _) => vec![a.prune_rate],
        };
        for r in rates {
            if !(0.0..1.0).contains(&r) {
                out.push(format!("prune rate {r} must lie in [0, 1)"));
            }
        }
        for (name, v) in [("admm.layer_rho", &a.layer_rho), ("admm.layer_eps", &a.layer_eps)] {
            if let (Some(v), Some(n)) = (v, layers) {
                if v.len() != n {
                    out.push(format!("{name} has {} entries for {n} conv layers", v.len()));
                }
            }
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(a.rho) || a.layer_rho.iter().flatten().any(|&x| !positive(x)) {
            out.push("admm rho must be positive".into());
        }
        if !positive(a.eps_per_element) || a.layer_eps.iter().flatten().any(|&x| !positive(x)) {
            out.push("admm tolerances must be positive".into());
        }
        if self.prune.stat_batches == 0 || self.prune.stat_batch_size == 0 {
            out.push("prune.stat_batches and prune.stat_batch_size must be at least 1".into());
        }
        match (self.pipeline.kind, &self.iterative) {
            (PipelineKind::IterativeTe, None) => out.push("pipeline.kind = iterative_te needs an [iterative] section".into()),
            (PipelineKind::SingleShot, Some(_)) => {
                out.push("[iterative] section given but pipeline.kind is single_shot".into())
            }
            (PipelineKind::IterativeTe, Some(it)) => {
                if it.filters_per_round == 0 || it.batch_size == 0 {
                    out.push("iterative.filters_per_round and iterative.batch_size must be at least 1".into());
                }
                if self.prune.criterion != PruneMethod::Taylor {
                    out.push("iterative_te requires prune.criterion = taylor".into());
                }
            }
            _ => {}
        }
        out
    }
}

pub fn parse_table(text: &str) -> Result<toml::Table> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

fn per_layer(explicit: &Option<Vec<f64>>, uniform: f64, layers: usize, key: &str) -> Result<Vec<f64>> {
    match explicit {
        Some(v) if v.len() == layers => Ok(v.clone()),
        Some(v) => Err(Error::Config(format!("{key} has {} entries for {layers} conv layers", v.len()))),
        None => Ok(vec![uniform; layers]),
    }
}

/// Sets `a.b.c = value` in `table`; the value is read as TOML, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
