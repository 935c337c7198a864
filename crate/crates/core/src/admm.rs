//! ADMM machinery for filter-cardinality constrained training.
//!
//! The constrained problem `min C(W) s.t. W_i ∈ S_i` is split into a
//! differentiable W-step on `C(W) + Σ (ρ_i/2)‖W_i − Z_i + U_i‖²` and a Z-step
//! `Z_i = Π_{S_i}(W_i + U_i)`, followed by the scaled dual update
//! `U_i ← U_i + W_i − Z_i`. Everything here is a pure function of tensors;
//! the training loop lives in [`crate::pipeline`].

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoadedCheckpoint, Model};
use crate::tensor::FilterTensor;

pub const DEFAULT_RHO: f64 = 1e-2;
/// Default tolerance per weight element; `ε_i = DEFAULT_EPS_PER_ELEMENT · numel(W_i)`.
pub const DEFAULT_EPS_PER_ELEMENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// At most `keep_count` nonzero filters.
    #[default]
    Filter,
    /// At most `keep_count` nonzero elements.
    Weight,
}

/// How the two squared distances of the stopping test combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once both `‖W − Z‖²` and `‖Z − Z_prev‖²` are within tolerance.
    #[default]
    Both,
    /// Stop once either distance is within tolerance.
    Either,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsitySpec {
    pub layer_id: String,
    pub prune_rate: f64,
    /// Filters (or elements, for weight granularity) that may stay nonzero.
    pub keep_count: usize,
    pub tolerance: f64,
    pub penalty: f64,
    pub granularity: Granularity,
}

/// `units − round(rate · units)`, clamped to at least one.
pub fn keep_count(units: usize, prune_rate: f64) -> usize {
    let pruned = (prune_rate * units as f64).round() as usize;
    units.saturating_sub(pruned).max(1)
}

impl LayerSparsitySpec {
    /// Builds a spec for a layer whose weights are `weights`; the keep count is
    /// derived from the prune rate over filters or elements.
    pub fn from_rate(
        weights: &FilterTensor,
        prune_rate: f64,
        tolerance: f64,
        penalty: f64,
        granularity: Granularity,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&prune_rate) {
            return Err(Error::Spec(format!("prune rate {prune_rate} must lie in [0, 1)")));
        }
        let units = match granularity {
            Granularity::Filter => weights.n_filters(),
            Granularity::Weight => weights.numel(),
        };
        let spec = Self {
            layer_id: weights.layer_id().to_string(),
            prune_rate,
            keep_count: keep_count(units, prune_rate),
            tolerance,
            penalty,
            granularity,
        };
        spec.validate(weights)?;
        Ok(spec)
    }

    /// Filter-granularity spec with an explicit keep count.
    pub fn with_keep(layer_id: impl Into<String>, n_filters: usize, keep: usize, tolerance: f64, penalty: f64) -> Self {
        Self {
            layer_id: layer_id.into(),
            prune_rate: if n_filters == 0 { 0.0 } else { (n_filters - keep.min(n_filters)) as f64 / n_filters as f64 },
            keep_count: keep,
            tolerance,
            penalty,
            granularity: Granularity::Filter,
        }
    }

    pub fn validate(&self, weights: &FilterTensor) -> Result<()> {
        let units = match self.granularity {
            Granularity::Filter => weights.n_filters(),
            Granularity::Weight => weights.numel(),
        };
        if self.keep_count == 0 || self.keep_count > units {
            return Err(Error::Spec(format!(
                "layer `{}`: keep count {} outside [1, {units}]",
                self.layer_id, self.keep_count
            )));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Spec(format!("layer `{}`: tolerance must be positive", self.layer_id)));
        }
        if !(self.penalty.is_finite() && self.penalty > 0.0) {
            return Err(Error::Spec(format!("layer `{}`: penalty must be positive", self.layer_id)));
        }
        Ok(())
    }
}

/// Per-filter l1 (`Σ|w|`) or l2 (`√Σw²`) norm, accumulated in `f64`.
pub fn filter_norms(t: &FilterTensor, norm: Norm) -> Vec<f64> {
    t.filters()
        .map(|f| match norm {
            Norm::L1 => f.iter().map(|&v| f64::from(v).abs()).sum(),
            Norm::L2 => f.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt(),
        })
        .collect()
}

/// Indices of the `keep` largest scores, ties resolved toward the lower
/// index, returned in ascending order.
pub(crate) fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..keep.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Filters kept by [`project_cardinality`] under filter granularity.
pub fn keep_set(t: &FilterTensor, keep: usize, norm: Norm) -> Vec<usize> {
    top_k_indices(&filter_norms(t, norm), keep)
}

/// Projection onto the cardinality set of `spec`: keeps the `keep_count`
/// largest filters (by `norm`) or elements (by magnitude) bit-exactly and
/// zeroes the rest.
pub fn project_cardinality(t: &FilterTensor, spec: &LayerSparsitySpec, norm: Norm) -> Result<FilterTensor> {
    let mut out = t.zeros_like();
    match spec.granularity {
        Granularity::Filter => {
            if spec.keep_count > t.n_filters() {
                return Err(Error::Spec(format!(
                    "layer `{}`: keep count {} exceeds {} filters",
                    spec.layer_id,
                    spec.keep_count,
                    t.n_filters()
                )));
            }
            for j in keep_set(t, spec.keep_count, norm) {
                out.filter_mut(j).copy_from_slice(t.filter(j));
            }
        }
        Granularity::Weight => {
            if spec.keep_count > t.numel() {
                return Err(Error::Spec(format!(
                    "layer `{}`: keep count {} exceeds {} elements",
                    spec.layer_id,
                    spec.keep_count,
                    t.numel()
                )));
            }
            let mags: Vec<f64> = t.as_slice().iter().map(|&v| f64::from(v).abs()).collect();
            let src = t.as_slice();
            let dst = out.as_mut_slice();
            for i in top_k_indices(&mags, spec.keep_count) {
                dst[i] = src[i];
            }
        }
    }
    Ok(out)
}

/// Gradient `ρ(W − Z + U)` and value `(ρ/2)‖W − Z + U‖_F²` of the ADMM penalty.
pub fn admm_regularizer(w: &FilterTensor, z: &FilterTensor, u: &FilterTensor, rho: f64) -> Result<(FilterTensor, f64)> {
    w.ensure_same_shape(z)?;
    w.ensure_same_shape(u)?;
    let r = rho as f32;
    let mut penalty = 0.0f64;
    let grad: Vec<f32> = w
        .as_slice()
        .iter()
        .zip(z.as_slice())
        .zip(u.as_slice())
        .map(|((&w, &z), &u)| {
            let d = f64::from(w) - f64::from(z) + f64::from(u);
            penalty += d * d;
            r * (w - z + u)
        })
        .collect();
    Ok((w.with_data(grad), 0.5 * rho * penalty))
}

/// `Z_next = Π(W + U)`.
pub fn step_z(w: &FilterTensor, u: &FilterTensor, spec: &LayerSparsitySpec, norm: Norm) -> Result<FilterTensor> {
    let sum = w.zip_map(u, |a, b| a + b)?;
    project_cardinality(&sum, spec, norm)
}

/// `U_next = U + W_next − Z_next`, elementwise.
pub fn step_u(u: &FilterTensor, w_next: &FilterTensor, z_next: &FilterTensor) -> Result<FilterTensor> {
    u.ensure_same_shape(w_next)?;
    u.ensure_same_shape(z_next)?;
    Ok(u.with_data(
        u.as_slice()
            .iter()
            .zip(w_next.as_slice())
            .zip(z_next.as_slice())
            .map(|((&u, &w), &z)| u + w - z)
            .collect(),
    ))
}

/// Squared primal residual `‖W − Z‖²` and squared Z-change `‖Z − Z_prev‖²`.
pub fn residuals(w: &FilterTensor, z: &FilterTensor, z_prev: &FilterTensor) -> Result<(f64, f64)> {
    Ok((w.distance_sq(z)?, z.distance_sq(z_prev)?))
}

/// Stopping test with non-strict comparisons against `eps`.
pub fn converged(w: &FilterTensor, z: &FilterTensor, z_prev: &FilterTensor, eps: f64, rule: StopRule) -> Result<bool> {
    let (primal, change) = residuals(w, z, z_prev)?;
    Ok(match rule {
        StopRule::Both => primal <= eps && change <= eps,
        StopRule::Either => primal <= eps || change <= eps,
    })
}

/// Named `(shape, data)` tensors as stored in a checkpoint.
pub type CheckpointTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Per-layer outcome of one outer ADMM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProgress {
    pub layer_id: String,
    /// `‖W − Z‖_F` (not squared).
    pub wz_distance: f64,
    pub primal_sq: f64,
    pub z_change_sq: f64,
    pub converged: bool,
}

/// Auxiliary and scaled dual variables for every constrained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: Vec<FilterTensor>,
    pub u: Vec<FilterTensor>,
    pub k: u64,
    pub specs: Vec<LayerSparsitySpec>,
    pub norm: Norm,
    pub stop_rule: StopRule,
}

/// `Z_i = Π(W_i)`, `U_i = 0`, `k = 0` for every conv layer of `model`.
pub fn init_state(model: &Model, specs: &[LayerSparsitySpec], norm: Norm) -> Result<AdmmState> {
    let layers = model.list_conv_layers()?;
    if specs.len() != layers.len() {
        return Err(Error::Config(format!(
            "{} sparsity specs for {} conv layers",
            specs.len(),
            layers.len()
        )));
    }
    let mut z = Vec::with_capacity(specs.len());
    let mut u = Vec::with_capacity(specs.len());
    for (spec, layer) in specs.iter().zip(&layers) {
        if spec.layer_id != layer.layer_id {
            return Err(Error::Config(format!(
                "sparsity spec `{}` does not match conv layer `{}`",
                spec.layer_id, layer.layer_id
            )));
        }
        let w = model.get_weights(&layer.layer_id)?;
        spec.validate(&w)?;
        z.push(project_cardinality(&w, spec, norm)?);
        u.push(w.zeros_like());
    }
    Ok(AdmmState { z, u, k: 0, specs: specs.to_vec(), norm, stop_rule: StopRule::Both })
}

impl AdmmState {
    pub fn with_stop_rule(mut self, rule: StopRule) -> Self {
        self.stop_rule = rule;
        self
    }

    /// Extra gradient terms `ρ_i(W_i − Z_i + U_i)` keyed by layer id, plus the
    /// summed penalty value.
    pub fn regularizer(&self, model: &Model) -> Result<(HashMap<String, FilterTensor>, f64)> {
        let mut grads = HashMap::with_capacity(self.specs.len());
        let mut total = 0.0;
        for ((spec, z), u) in self.specs.iter().zip(&self.z).zip(&self.u) {
            let w = model.get_weights(&spec.layer_id)?;
            let (g, p) = admm_regularizer(&w, z, u, spec.penalty)?;
            grads.insert(spec.layer_id.clone(), g);
            total += p;
        }
        Ok((grads, total))
    }

    /// Z- and U-updates after an inner W loop; increments `k`.
    pub fn update(&mut self, model: &Model) -> Result<Vec<LayerProgress>> {
        let mut progress = Vec::with_capacity(self.specs.len());
        for i in 0..self.specs.len() {
            let spec = &self.specs[i];
            let w = model.get_weights(&spec.layer_id)?;
            let z_next = step_z(&w, &self.u[i], spec, self.norm)?;
            let u_next = step_u(&self.u[i], &w, &z_next)?;
            let (primal_sq, z_change_sq) = residuals(&w, &z_next, &self.z[i])?;
            let done = match self.stop_rule {
                StopRule::Both => primal_sq <= spec.tolerance && z_change_sq <= spec.tolerance,
                StopRule::Either => primal_sq <= spec.tolerance || z_change_sq <= spec.tolerance,
            };
            progress.push(LayerProgress {
                layer_id: spec.layer_id.clone(),
                wz_distance: primal_sq.sqrt(),
                primal_sq,
                z_change_sq,
                converged: done,
            });
            self.z[i] = z_next;
            self.u[i] = u_next;
        }
        self.k += 1;
        Ok(progress)
    }

    /// Tensors and manifest entries for storing the state in a checkpoint.
    pub fn to_checkpoint_parts(&self) -> (CheckpointTensors, BTreeMap<String, String>) {
        let mut tensors = BTreeMap::new();
        for ((spec, z), u) in self.specs.iter().zip(&self.z).zip(&self.u) {
            tensors.insert(format!("admm.{}.z", spec.layer_id), (z.shape().to_vec(), z.as_slice().to_vec()));
            tensors.insert(format!("admm.{}.u", spec.layer_id), (u.shape().to_vec(), u.as_slice().to_vec()));
        }
        let mut manifest = BTreeMap::new();
        manifest.insert("admm.k".to_string(), self.k.to_string());
        (tensors, manifest)
    }

    /// Restores a state saved with [`Self::to_checkpoint_parts`].
    pub fn from_checkpoint(
        loaded: &LoadedCheckpoint,
        specs: &[LayerSparsitySpec],
        norm: Norm,
        stop_rule: StopRule,
    ) -> Result<Self> {
        let k = loaded
            .metadata
            .extra
            .get("admm.k")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Integrity("checkpoint has no ADMM state".into()))?;
        let mut z = Vec::new();
        let mut u = Vec::new();
        for spec in specs {
            for (suffix, out) in [("z", &mut z), ("u", &mut u)] {
                let name = format!("admm.{}.{suffix}", spec.layer_id);
                let (shape, data) = loaded
                    .extra_tensors
                    .get(&name)
                    .ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))?;
                let shape: [usize; 4] =
                    shape.clone().try_into().map_err(|_| Error::Integrity(format!("`{name}` must be 4-D")))?;
                out.push(FilterTensor::new(spec.layer_id.clone(), shape, data.clone())?);
            }
        }
        Ok(Self { z, u, k, specs: specs.to_vec(), norm, stop_rule })
    }
}
