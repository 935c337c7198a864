//! Filter-importance criteria and prune-set selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{filter_norms, Norm};
use crate::error::{Error, Result};
use crate::model::{ActivationSample, Batch, Model};

/// Guard added to the l2 norm when rescaling Taylor scores.
pub const TAYLOR_DELTA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    MinWeight,
    MeanActivation,
    Taylor,
    Random,
    AdmmL1,
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::MinWeight => "min_weight",
            Criterion::MeanActivation => "mean_activation",
            Criterion::Taylor => "taylor",
            Criterion::Random => "random",
            Criterion::AdmmL1 => "admm_l1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layer_id: String,
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    pub prune_indices: Vec<usize>,
}

/// l1 norm of each filter's kernel weights (bias excluded).
pub fn score_min_weight(model: &Model, layer_id: &str) -> Result<Vec<f64>> {
    Ok(filter_norms(&model.get_weights(layer_id)?, Norm::L1))
}

/// `score[j] = mean_x Σ_spatial |a_j(x)|` over post-ReLU maps given as
/// `[n_filters, spatial]` slices, one per sample.
pub fn mean_activation_from_maps<'a>(
    maps: impl IntoIterator<Item = &'a [f32]>,
    n_filters: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0f64; n_filters];
    let mut n = 0usize;
    for map in maps {
        for (j, chunk) in map.chunks_exact(spatial).enumerate() {
            acc[j] += chunk.iter().map(|&v| f64::from(v).abs()).sum::<f64>();
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|v| *v /= n as f64);
    }
    acc
}

pub fn score_mean_activation(model: &Model, layer_id: &str, batches: &[Batch]) -> Result<Vec<f64>> {
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::Usage("mean activation needs at least one sample".into()));
    }
    let idx = model.conv_index(layer_id)?;
    let n_filters = model.conv_layers()[idx].weight().n_filters();
    let spatial = model.conv_map_size(layer_id)?;
    let mut maps = Vec::new();
    for b in batches.iter().filter(|b| !b.is_empty()) {
        maps.extend(model.conv_feature_maps(layer_id, b)?);
    }
    Ok(mean_activation_from_maps(maps.iter().map(|m| m.as_slice()), n_filters, spatial))
}

/// Unnormalized first-order saliency:
/// `raw[j] = mean_x | Σ_spatial a_j(x) · ∂C/∂a_j(x) |`.
pub fn taylor_raw<'a>(
    samples: impl IntoIterator<Item = (&'a [f32], &'a [f32])>,
    n_filters: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut acc = vec![0.0f64; n_filters];
    let mut n = 0usize;
    for (act, grad) in samples {
        for (j, (a, g)) in act.chunks_exact(spatial).zip(grad.chunks_exact(spatial)).enumerate() {
            let s: f64 = a.iter().zip(g).map(|(&a, &g)| f64::from(a) * f64::from(g)).sum();
            acc[j] += s.abs();
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|v| *v /= n as f64);
    }
    acc
}

/// `raw / (‖raw‖₂ + δ)`.
pub fn l2_rescale(raw: &[f64]) -> Vec<f64> {
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.iter().map(|v| v / (norm + TAYLOR_DELTA)).collect()
}

/// Taylor criterion with per-layer l2 rescaling. Gradients are those of each
/// sample's own cross-entropy loss.
pub fn score_taylor(model: &Model, layer_id: &str, batches: &[Batch]) -> Result<Vec<f64>> {
    if batches.iter().all(|b| b.is_empty()) {
        return Err(Error::Usage("Taylor criterion needs at least one sample".into()));
    }
    let idx = model.conv_index(layer_id)?;
    let n_filters = model.conv_layers()[idx].weight().n_filters();
    let spatial = model.conv_map_size(layer_id)?;
    let mut samples: Vec<ActivationSample> = Vec::new();
    for b in batches.iter().filter(|b| !b.is_empty()) {
        samples.extend(model.conv_activations(layer_id, b)?);
    }
    let raw = taylor_raw(samples.iter().map(|s| (s.activation.as_slice(), s.gradient.as_slice())), n_filters, spatial);
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric { layer: layer_id.into(), detail: "non-finite Taylor score".into() });
    }
    Ok(l2_rescale(&raw))
}

/// A seed-determined permutation of the ranks `0..n_filters`.
pub fn score_random(n_filters: usize, seed: u64) -> Vec<f64> {
    let mut ranks: Vec<f64> = (0..n_filters).map(|r| r as f64).collect();
    ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ranks
}

/// Indices of the `count` smallest scores (lower index first on ties), sorted.
pub fn select_prune_set(scores: &[f64], count: usize) -> Result<Vec<usize>> {
    if count >= scores.len() {
        return Err(Error::Spec(format!(
            "cannot prune {count} of {} filters; at least one must survive",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = order[..count].to_vec();
    out.sort_unstable();
    Ok(out)
}

/// Scores one layer under `criterion` and selects `count` filters to prune.
/// `batches` feed the data-dependent criteria; `seed` drives `Random`.
pub fn decide(
    model: &Model,
    layer_id: &str,
    criterion: Criterion,
    count: usize,
    batches: &[Batch],
    seed: u64,
) -> Result<PruneDecision> {
    let scores = match criterion {
        Criterion::MinWeight | Criterion::AdmmL1 => score_min_weight(model, layer_id)?,
        Criterion::MeanActivation => score_mean_activation(model, layer_id, batches)?,
        Criterion::Taylor => score_taylor(model, layer_id, batches)?,
        Criterion::Random => {
            let n = model.get_weights(layer_id)?.n_filters();
            score_random(n, seed)
        }
    };
    let prune_indices = select_prune_set(&scores, count)?;
    Ok(PruneDecision { layer_id: layer_id.to_string(), criterion, scores, prune_indices })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, ArchitectureSpec};
    use crate::data::synthetic_dataset;

    #[test]
    fn select_hand_cases() {
        assert_eq!(select_prune_set(&[5.0, 1.0, 3.0], 1).unwrap(), [1]);
        assert!(select_prune_set(&[5.0, 1.0, 3.0], 0).unwrap().is_empty());
        assert_eq!(select_prune_set(&[2.0; 4], 2).unwrap(), [0, 1]);
        assert!(matches!(select_prune_set(&[1.0, 2.0], 2), Err(Error::Spec(_))));
    }

    #[test]
    fn min_weight_hand_sum() {
        let mut model = build_model(&ArchitectureSpec::toy(), 0).unwrap();
        let mut w = model.get_weights("conv1").unwrap();
        w.as_mut_slice().fill(0.0);
        model.set_weights("conv1", w.clone()).unwrap();
        assert_eq!(score_min_weight(&model, "conv1").unwrap(), vec![0.0; 8]);
        // filters 0..3 sum to 5, 1, 3 in absolute value
        w.filter_mut(0)[..2].copy_from_slice(&[2.0, -3.0]);
        w.filter_mut(1)[4] = -1.0;
        w.filter_mut(2)[8] = 3.0;
        model.set_weights("conv1", w).unwrap();
        let s = score_min_weight(&model, "conv1").unwrap();
        assert_eq!(&s[..3], &[5.0, 1.0, 3.0]);
        assert_eq!(s, filter_norms(&model.get_weights("conv1").unwrap(), Norm::L1));
        assert!(matches!(score_min_weight(&model, "nope"), Err(Error::Lookup(_))));
    }

    #[test]
    fn random_scores() {
        assert_eq!(score_random(10, 3), score_random(10, 3));
        assert_ne!(score_random(10, 3), score_random(10, 4));
        assert_eq!(score_random(1, 9), [0.0]);
        let mut s = score_random(6, 1);
        s.sort_by(f64::total_cmp);
        assert_eq!(s, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn taylor_single_linear_neuron() {
        // a = w·x with loss y = a, so ∂C/∂a = 1.
        let w = 0.7f32;
        let xs = [1.0f32, 2.0, 0.5, 3.0];
        let acts: Vec<[f32; 1]> = xs.iter().map(|&x| [w * x]).collect();
        let ones = [1.0f32];
        let raw = taylor_raw(acts.iter().map(|a| (a.as_slice(), ones.as_slice())), 1, 1);
        let mean_x = xs.iter().sum::<f32>() / xs.len() as f32;
        assert!((raw[0] - f64::from(w * mean_x).abs()).abs() < 1e-6);
    }

    #[test]
    fn taylor_zero_gradient_gives_zero() {
        let act = [1.0f32, 2.0, 3.0, 4.0];
        let grad = [0.0f32; 4];
        assert_eq!(taylor_raw([(act.as_slice(), grad.as_slice())], 2, 2), [0.0, 0.0]);
        assert_eq!(l2_rescale(&[0.0, 0.0]), [0.0, 0.0]);
    }

    fn fixture() -> (Model, Vec<Batch>) {
        let model = build_model(&ArchitectureSpec::toy(), 4).unwrap();
        let ds = synthetic_dataset(6, 10, 0.5);
        let batches: Vec<_> = ds.sequential_batches(10).collect();
        (model, batches)
    }

    #[test]
    fn zeroed_filter_scores_zero_under_activation_criteria() {
        let (mut model, batches) = fixture();
        let mut w = model.get_weights("conv2").unwrap();
        w.filter_mut(3).fill(0.0);
        model.set_weights("conv2", w).unwrap();
        let mut b = model.get_bias("conv2").unwrap();
        b[3] = 0.0;
        model.set_bias("conv2", b).unwrap();
        assert_eq!(score_mean_activation(&model, "conv2", &batches).unwrap()[3], 0.0);
        assert_eq!(score_taylor(&model, "conv2", &batches).unwrap()[3], 0.0);
    }

    #[test]
    fn duplicated_filters_get_equal_taylor_scores() {
        let (mut model, batches) = fixture();
        let mut w = model.get_weights("conv2").unwrap();
        let f0 = w.filter(0).to_vec();
        w.filter_mut(5).copy_from_slice(&f0);
        model.set_weights("conv2", w).unwrap();
        let mut b = model.get_bias("conv2").unwrap();
        b[5] = b[0];
        model.set_bias("conv2", b).unwrap();
        // conv2 maps feed different dense weights, so only the map-only
        // criterion is symmetric there. Taylor symmetry needs a duplicated
        // conv1 filter whose successor input slices are duplicated too.
        let ma = score_mean_activation(&model, "conv2", &batches).unwrap();
        assert_eq!(ma[0], ma[5]);

        let mut w1 = model.get_weights("conv1").unwrap();
        let g0 = w1.filter(0).to_vec();
        w1.filter_mut(1).copy_from_slice(&g0);
        model.set_weights("conv1", w1).unwrap();
        let mut b1 = model.get_bias("conv1").unwrap();
        b1[1] = b1[0];
        model.set_bias("conv1", b1).unwrap();
        let mut w2 = model.get_weights("conv2").unwrap();
        let kk = 9;
        for f in 0..w2.n_filters() {
            let filt = w2.filter_mut(f);
            let (a, b) = filt.split_at_mut(kk);
            b[..kk].copy_from_slice(&a[..kk]);
        }
        model.set_weights("conv2", w2).unwrap();
        let t = score_taylor(&model, "conv1", &batches).unwrap();
        assert!((t[0] - t[1]).abs() <= 1e-6 * t[0].max(1e-12), "{} vs {}", t[0], t[1]);
    }

    #[test]
    fn mean_activation_decomposes_over_batches() {
        let (model, batches) = fixture();
        let ds = synthetic_dataset(6, 10, 0.5);
        let first: Vec<_> = ds.sequential_batches(6).collect();
        let a = score_mean_activation(&model, "conv1", &first[..1]).unwrap();
        let b = score_mean_activation(&model, "conv1", &first[1..]).unwrap();
        let all = score_mean_activation(&model, "conv1", &batches).unwrap();
        let (na, nb) = (first[0].len() as f64, (20 - first[0].len()) as f64);
        for j in 0..all.len() {
            let combined = (na * a[j] + nb * b[j]) / (na + nb);
            assert!((combined - all[j]).abs() <= 1e-9 * all[j].max(1.0));
        }
        assert!(matches!(score_mean_activation(&model, "conv1", &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_activation_doubles_with_weights_in_linear_regime() {
        // One 1×1 filter on a positive single-sample input with zero bias:
        // the pre-activation is positive and scales linearly with the weight.
        use crate::model::{ConvLayer, DenseLayer};
        let build = |w: f32| {
            let conv = ConvLayer::new("conv1", [1, 1, 1, 1], vec![w], vec![0.0], 0, None).unwrap();
            let fc = DenseLayer::new("fc1", 4, 2, vec![0.1; 8], vec![0.0; 2]).unwrap();
            Model::from_parts("m", [1, 2, 2], 2, vec![conv], vec![fc]).unwrap()
        };
        let batch = Batch { inputs: vec![1.0, 2.0, 3.0, 4.0], labels: vec![0], sample_shape: [1, 2, 2] };
        let s1 = score_mean_activation(&build(0.5), "conv1", std::slice::from_ref(&batch)).unwrap();
        let s2 = score_mean_activation(&build(1.0), "conv1", std::slice::from_ref(&batch)).unwrap();
        assert_eq!(s2[0], 2.0 * s1[0]);
    }

    #[test]
    fn min_weight_scale_covariance() {
        let (mut model, _) = fixture();
        let before = score_min_weight(&model, "conv2").unwrap();
        let mut w = model.get_weights("conv2").unwrap();
        w.as_mut_slice().iter_mut().for_each(|v| *v *= 4.0);
        model.set_weights("conv2", w).unwrap();
        let after = score_min_weight(&model, "conv2").unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((4.0 * a - b).abs() <= 1e-9 * b.max(1.0));
        }
        assert_eq!(select_prune_set(&before, 7).unwrap(), select_prune_set(&after, 7).unwrap());
    }
}
