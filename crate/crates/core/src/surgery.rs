//! Physical filter removal and the shape bookkeeping that goes with it.
//!
//! Removing filter `j` of a conv layer drops row `j` of its weight tensor and
//! bias, input channel `j` of the next conv layer, or, at the flatten
//! boundary, the `h · w` dense-input columns of map `j`. Flattening is
//! row-major over `(channel, height, width)`. The dense bias is never touched.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::conv_output_size;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::FilterTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer_id: String,
    pub prune_indices: Vec<usize>,
    pub original_filters: usize,
    pub resulting_filters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurgeryPlan {
    pub layers: Vec<LayerPlan>,
    /// Old dense-input index → new index, `None` when the column is dropped.
    /// Empty when the last conv layer is untouched or feeds no dense layer.
    pub flatten_remap: Vec<Option<usize>>,
}

impl SurgeryPlan {
    pub fn dropped_dense_columns(&self) -> usize {
        self.flatten_remap.iter().filter(|m| m.is_none()).count()
    }
}

/// Checks the prune sets against `model` and derives the flatten remap.
pub fn plan_surgery(model: &Model, prune: &[(String, Vec<usize>)]) -> Result<SurgeryPlan> {
    let mut layers = Vec::with_capacity(prune.len());
    let mut seen = BTreeSet::new();
    for (layer_id, indices) in prune {
        if !seen.insert(layer_id.as_str()) {
            return Err(Error::Usage(format!("layer `{layer_id}` listed twice")));
        }
        let idx = model.conv_index(layer_id)?;
        let n = model.conv_layers()[idx].weight().n_filters();
        let set: BTreeSet<usize> = indices.iter().copied().collect();
        if set.len() != indices.len() {
            return Err(Error::Usage(format!("duplicate prune index for `{layer_id}`")));
        }
        if let Some(&bad) = set.iter().find(|&&j| j >= n) {
            return Err(Error::Usage(format!("filter index {bad} out of range for `{layer_id}` ({n} filters)")));
        }
        if set.len() >= n {
            return Err(Error::Spec(format!("pruning all {n} filters of `{layer_id}`")));
        }
        if !set.is_empty() && idx + 1 == model.conv_layers().len() && model.dense_layers().is_empty() {
            return Err(Error::Structural(format!(
                "`{layer_id}` feeds the logits directly; removing its filters would change the class count"
            )));
        }
        layers.push(LayerPlan {
            layer_id: layer_id.clone(),
            prune_indices: set.into_iter().collect(),
            original_filters: n,
            resulting_filters: n - indices.len(),
        });
    }
    let last = model.conv_layers().last().expect("model has conv layers");
    let mut flatten_remap = Vec::new();
    if let Some(plan) = layers.iter().find(|p| p.layer_id == last.id()) {
        if !plan.prune_indices.is_empty() && !model.dense_layers().is_empty() {
            let (h, w) = *model.feature_sizes().last().expect("non-empty");
            let hw = h * w;
            let dropped: BTreeSet<usize> = plan.prune_indices.iter().copied().collect();
            let mut next = 0;
            for c in 0..plan.original_filters {
                for _ in 0..hw {
                    if dropped.contains(&c) {
                        flatten_remap.push(None);
                    } else {
                        flatten_remap.push(Some(next));
                        next += 1;
                    }
                }
            }
        }
    }
    Ok(SurgeryPlan { layers, flatten_remap })
}

fn keep_rows(data: &[f32], row_len: usize, drop: &BTreeSet<usize>) -> Vec<f32> {
    data.chunks_exact(row_len)
        .enumerate()
        .filter(|(j, _)| !drop.contains(j))
        .flat_map(|(_, row)| row.iter().copied())
        .collect()
}

/// Applies a plan and returns the pruned model; `model` is left untouched.
pub fn apply_plan(model: &Model, plan: &SurgeryPlan) -> Result<Model> {
    let mut out = model.clone();
    let n_convs = out.convs.len();
    for lp in &plan.layers {
        if lp.prune_indices.is_empty() {
            continue;
        }
        let idx = out.conv_index(&lp.layer_id)?;
        let drop: BTreeSet<usize> = lp.prune_indices.iter().copied().collect();
        {
            let layer = &mut out.convs[idx];
            let [n, c, kh, kw] = layer.weight.shape();
            if n != lp.original_filters {
                return Err(Error::Structural(format!("plan for `{}` expects {} filters, found {n}", lp.layer_id, lp.original_filters)));
            }
            let data = keep_rows(layer.weight.as_slice(), c * kh * kw, &drop);
            layer.weight = FilterTensor::new(layer.id.clone(), [n - drop.len(), c, kh, kw], data)?;
            layer.bias = layer.bias.iter().enumerate().filter(|(j, _)| !drop.contains(j)).map(|(_, &b)| b).collect();
        }
        if idx + 1 < n_convs {
            let next = &mut out.convs[idx + 1];
            let [n, c, kh, kw] = next.weight.shape();
            let mut data = Vec::with_capacity(n * (c - drop.len()) * kh * kw);
            for f in 0..n {
                data.extend(keep_rows(next.weight.filter(f), kh * kw, &drop));
            }
            next.weight = FilterTensor::new(next.id.clone(), [n, c - drop.len(), kh, kw], data)?;
        } else if let Some(dense) = out.dense.first_mut() {
            if plan.flatten_remap.len() != dense.in_features {
                return Err(Error::Structural(format!(
                    "flatten remap covers {} columns but `{}` has {}",
                    plan.flatten_remap.len(),
                    dense.id,
                    dense.in_features
                )));
            }
            let new_in = plan.flatten_remap.iter().filter(|m| m.is_some()).count();
            let mut data = vec![0.0f32; dense.out_features * new_in];
            for o in 0..dense.out_features {
                let row = &dense.weight[o * dense.in_features..(o + 1) * dense.in_features];
                for (old, target) in plan.flatten_remap.iter().enumerate() {
                    if let Some(new) = target {
                        data[o * new_in + new] = row[old];
                    }
                }
            }
            dense.weight = data;
            dense.in_features = new_in;
        }
    }
    Ok(out)
}

/// Removes `prune_indices` from conv layer `layer_id` and reconciles its successor.
pub fn prune_conv_layer(model: &Model, layer_id: &str, prune_indices: &[usize]) -> Result<Model> {
    let plan = plan_surgery(model, &[(layer_id.to_string(), prune_indices.to_vec())])?;
    apply_plan(model, &plan)
}

/// Sets the listed filters' weights and biases to exactly zero; shapes are unchanged.
pub fn zero_out_filters(model: &Model, layer_id: &str, prune_indices: &[usize]) -> Result<Model> {
    let idx = model.conv_index(layer_id)?;
    let n = model.conv_layers()[idx].weight().n_filters();
    let set: BTreeSet<usize> = prune_indices.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&j| j >= n) {
        return Err(Error::Usage(format!("filter index {bad} out of range for `{layer_id}` ({n} filters)")));
    }
    if set.len() >= n {
        return Err(Error::Spec(format!("zeroing all {n} filters of `{layer_id}`")));
    }
    let mut out = model.clone();
    let layer = &mut out.convs[idx];
    for &j in &set {
        layer.weight.filter_mut(j).fill(0.0);
        layer.bias[j] = 0.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub upstream: String,
    pub downstream: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureReport {
    pub violations: Vec<Violation>,
}

impl StructureReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for StructureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.violations.iter().map(|v| format!("{} → {}: {}", v.upstream, v.downstream, v.detail)).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks channel agreement between consecutive layers and the flatten boundary.
pub fn validate_structure(model: &Model) -> StructureReport {
    let mut violations = Vec::new();
    let mut push = |up: &str, down: &str, detail: String| {
        violations.push(Violation { upstream: up.into(), downstream: down.into(), detail })
    };
    let [mut ch, mut h, mut w] = model.input;
    let mut prev = "input".to_string();
    for layer in &model.convs {
        let [n, c, k, _] = layer.weight.shape();
        if c != ch {
            push(&prev, &layer.id, format!("{ch} channels feed a layer expecting {c}"));
        }
        if layer.bias.len() != n {
            push(&layer.id, &layer.id, format!("{} biases for {n} filters", layer.bias.len()));
        }
        match conv_output_size(h, w, k, layer.padding) {
            Some((ho, wo)) => {
                (h, w) = match layer.pool {
                    Some(p) => (ho / p.window(), wo / p.window()),
                    None => (ho, wo),
                };
                if h == 0 || w == 0 {
                    push(&prev, &layer.id, "pooling collapses the feature map".into());
                }
            }
            None => push(&prev, &layer.id, format!("kernel {k} does not fit a {h}×{w} map")),
        }
        ch = n;
        prev = layer.id.clone();
    }
    let mut width = ch * h * w;
    for d in &model.dense {
        if d.in_features != width {
            push(&prev, &d.id, format!("{width} features feed a layer expecting {}", d.in_features));
        }
        if d.weight.len() != d.in_features * d.out_features || d.bias.len() != d.out_features {
            push(&d.id, &d.id, "parameter buffers disagree with declared shape".into());
        }
        width = d.out_features;
        prev = d.id.clone();
    }
    if width != model.classes {
        push(&prev, "logits", format!("{width} outputs for {} classes", model.classes));
    }
    StructureReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchitectureSpec};

    #[test]
    fn empty_prune_is_identity() {
        let m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        assert_eq!(prune_conv_layer(&m, "conv1", &[]).unwrap(), m);
        assert_eq!(zero_out_filters(&m, "conv2", &[]).unwrap(), m);
    }

    #[test]
    fn lenet_conv2_prune_drops_400_dense_columns() {
        let m = build_model(&ArchitectureSpec::lenet5(), 0).unwrap();
        assert_eq!(m.dense_layers()[0].in_features(), 800);
        let idx: Vec<usize> = (0..50).step_by(2).collect();
        let plan = plan_surgery(&m, &[("conv2".into(), idx.clone())]).unwrap();
        assert_eq!(plan.dropped_dense_columns(), 25 * 16);
        let p = apply_plan(&m, &plan).unwrap();
        assert_eq!(p.dense_layers()[0].in_features(), 400);
        assert!(validate_structure(&p).is_empty());
    }

    #[test]
    fn flatten_remap_is_channel_major() {
        let m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        let plan = plan_surgery(&m, &[("conv2".into(), vec![1])]).unwrap();
        // 16 channels × 4×4 maps; channel 1 occupies columns 16..32
        assert_eq!(plan.flatten_remap[15], Some(15));
        assert!(plan.flatten_remap[16..32].iter().all(Option::is_none));
        assert_eq!(plan.flatten_remap[32], Some(16));
        let p = apply_plan(&m, &plan).unwrap();
        let (old, new) = (&m.dense_layers()[0], &p.dense_layers()[0]);
        assert_eq!(new.weight()[16], old.weight()[32]);
        assert_eq!(new.weight()[240], old.weight()[256]);
        assert_eq!(new.bias(), old.bias());
    }

    #[test]
    fn successor_conv_loses_input_channels() {
        let m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        let p = prune_conv_layer(&m, "conv1", &[0, 7]).unwrap();
        assert_eq!(p.get_weights("conv1").unwrap().shape(), [6, 1, 3, 3]);
        assert_eq!(p.get_weights("conv2").unwrap().shape(), [16, 6, 3, 3]);
        let old = m.get_weights("conv2").unwrap();
        let new = p.get_weights("conv2").unwrap();
        // filter 3, new channel 0 == old channel 1
        assert_eq!(&new.filter(3)[..9], &old.filter(3)[9..18]);
        assert_eq!(p.get_weights("conv1").unwrap().filter(0), m.get_weights("conv1").unwrap().filter(1));
        assert!(validate_structure(&p).is_empty());
    }

    #[test]
    fn error_cases() {
        let m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        let all: Vec<usize> = (0..8).collect();
        assert!(matches!(prune_conv_layer(&m, "conv1", &all), Err(Error::Spec(_))));
        assert!(matches!(prune_conv_layer(&m, "conv1", &[8]), Err(Error::Usage(_))));
        assert!(matches!(prune_conv_layer(&m, "conv1", &[1, 1]), Err(Error::Usage(_))));
        assert!(matches!(zero_out_filters(&m, "conv1", &[9]), Err(Error::Usage(_))));
        assert!(matches!(prune_conv_layer(&m, "conv3", &[0]), Err(Error::Lookup(_))));
    }

    #[test]
    fn zeroing_sets_exact_zeros() {
        let m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        let z = zero_out_filters(&m, "conv2", &[2, 4]).unwrap();
        let w = z.get_weights("conv2").unwrap();
        assert!(w.filter(2).iter().chain(w.filter(4)).all(|&v| v == 0.0));
        assert_eq!(z.get_bias("conv2").unwrap()[4], 0.0);
        assert_eq!(w.shape(), [16, 8, 3, 3]);
        assert_eq!(w.filter(3), m.get_weights("conv2").unwrap().filter(3));
    }

    #[test]
    fn corrupted_successor_is_reported() {
        let mut m = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        assert!(validate_structure(&m).is_empty());
        let w = FilterTensor::zeros("conv2", [16, 5, 3, 3]).unwrap();
        m.convs[1].weight = w;
        let report = validate_structure(&m);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].upstream, "conv1");
        assert_eq!(report.violations[0].downstream, "conv2");
    }

    #[test]
    fn disjoint_prunes_commute_with_union() {
        let m = build_model(&ArchitectureSpec::toy(), 2).unwrap();
        // second call indexes into the already shrunk layer: old {1, 5} after
        // removing {0, 3} become {0, 3}
        let two = prune_conv_layer(&prune_conv_layer(&m, "conv2", &[0, 3]).unwrap(), "conv2", &[0, 3]).unwrap();
        let one = prune_conv_layer(&m, "conv2", &[0, 1, 3, 5]).unwrap();
        assert_eq!(two, one);
    }
}
