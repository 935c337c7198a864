//! Property tests for the invariants of projection, selection, surgery and
//! serialization.

use proptest::prelude::*;

use chanprune::admm::{
    converged, keep_count, project_cardinality, step_u, step_z, Granularity, LayerSparsitySpec, Norm, StopRule,
};
use chanprune::arch::{build_model, ArchitectureSpec};
use chanprune::criteria::{l2_rescale, score_random, select_prune_set};
use chanprune::model::{load_checkpoint, save_checkpoint, Batch, CheckpointMetadata};
use chanprune::pipeline::{RunConfig, RunRecord};
use chanprune::surgery::{apply_plan, plan_surgery, validate_structure};
use chanprune::FilterTensor;

fn tensor_strategy() -> impl Strategy<Value = FilterTensor> {
    (1usize..=8, 1usize..=3, 1usize..=3, 1usize..=3).prop_flat_map(|(n, c, h, w)| {
        prop::collection::vec(-4.0f32..4.0, n * c * h * w)
            .prop_map(move |d| FilterTensor::new("t", [n, c, h, w], d).unwrap())
    })
}

fn norm_strategy() -> impl Strategy<Value = Norm> {
    prop_oneof![Just(Norm::L1), Just(Norm::L2)]
}

fn spec(t: &FilterTensor, keep: usize, granularity: Granularity) -> LayerSparsitySpec {
    let mut s = LayerSparsitySpec::with_keep("t", t.n_filters(), keep, 1.0, 1.0);
    s.granularity = granularity;
    s
}

proptest! {
    #[test]
    fn projection_is_idempotent(t in tensor_strategy(), k in 1usize..=8, norm in norm_strategy()) {
        let s = spec(&t, k.min(t.n_filters()), Granularity::Filter);
        let p = project_cardinality(&t, &s, norm).unwrap();
        let pp = project_cardinality(&p, &s, norm).unwrap();
        prop_assert!(p.as_slice().iter().zip(pp.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn projection_lands_in_the_set(t in tensor_strategy(), k in 1usize..=8, norm in norm_strategy()) {
        let keep = k.min(t.n_filters());
        let p = project_cardinality(&t, &spec(&t, keep, Granularity::Filter), norm).unwrap();
        prop_assert!(p.nonzero_filters() <= keep);
        // every filter is either copied or zeroed
        let mut copied = 0;
        for j in 0..t.n_filters() {
            if p.filter(j) == t.filter(j) {
                copied += 1;
            } else {
                prop_assert!(p.filter(j).iter().all(|&v| v == 0.0));
            }
        }
        prop_assert!(copied >= keep);
    }

    #[test]
    fn projection_complement_is_the_residual(t in tensor_strategy(), k in 1usize..=8) {
        let p = project_cardinality(&t, &spec(&t, k.min(t.n_filters()), Granularity::Filter), Norm::L1).unwrap();
        for ((&x, &px), j) in t.as_slice().iter().zip(p.as_slice()).zip(0..) {
            let r = x - px;
            prop_assert!(px == 0.0 || r == 0.0, "element {j}: {x} split into {px} + {r}");
        }
    }

    #[test]
    fn weight_granularity_bounds_nonzeros(w in tensor_strategy(), seed in any::<u64>(), frac in 0.0f64..1.0) {
        let u = FilterTensor::new("t", w.shape(), score_random(w.numel(), seed).iter().map(|&v| v as f32 / 10.0 - 1.0).collect()).unwrap();
        let keep = ((frac * w.numel() as f64) as usize).max(1);
        let s = spec(&w, keep, Granularity::Weight);
        let z = step_z(&w, &u, &s, Norm::L1).unwrap();
        prop_assert!(z.nonzero_elements() <= keep);
    }

    #[test]
    fn z_step_respects_cardinality(w in tensor_strategy(), seed in any::<u64>(), k in 1usize..=8) {
        let u = FilterTensor::new("t", w.shape(), score_random(w.numel(), seed).iter().map(|&v| v as f32 / 100.0).collect()).unwrap();
        let s = spec(&w, k.min(w.n_filters()), Granularity::Filter);
        let z = step_z(&w, &u, &s, Norm::L2).unwrap();
        prop_assert!(z.nonzero_filters() <= s.keep_count);
        let un = step_u(&u, &w, &z).unwrap();
        prop_assert!(un.is_finite());
    }

    #[test]
    fn keep_count_law(n in 1usize..500, p in 0.0f64..1.0) {
        let b = keep_count(n, p);
        prop_assert!(b >= 1 && b <= n);
        let literal = n as i64 - (p * n as f64).round() as i64;
        prop_assert_eq!(b as i64, literal.max(1));
    }

    #[test]
    fn prune_set_takes_the_lowest(scores in prop::collection::vec(-10.0f64..10.0, 1..40), frac in 0.0f64..1.0) {
        let count = ((frac * scores.len() as f64) as usize).min(scores.len() - 1);
        let set = select_prune_set(&scores, count).unwrap();
        prop_assert_eq!(set.len(), count);
        prop_assert!(set.windows(2).all(|w| w[0] < w[1]));
        let kept: Vec<usize> = (0..scores.len()).filter(|j| !set.contains(j)).collect();
        for &p in &set {
            for &k in &kept {
                prop_assert!(scores[p] < scores[k] || (scores[p] == scores[k] && p < k));
            }
        }
    }

    #[test]
    fn random_scores_are_permutations(n in 0usize..64, seed in any::<u64>()) {
        let mut s: Vec<usize> = score_random(n, seed).into_iter().map(|v| v as usize).collect();
        prop_assert_eq!(&score_random(n, seed), &score_random(n, seed));
        s.sort_unstable();
        prop_assert_eq!(s, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn rescaled_scores_have_unit_norm(raw in prop::collection::vec(0.0f64..5.0, 1..30)) {
        let r = l2_rescale(&raw);
        let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if raw.iter().any(|&v| v > 1e-6) {
            prop_assert!((n - 1.0).abs() < 1e-9);
        } else {
            prop_assert!(n <= 1.0);
        }
    }

    #[test]
    fn convergence_is_monotone_in_tolerance(w in tensor_strategy(), eps in 0.0f64..50.0) {
        let z = w.zeros_like();
        let rule = StopRule::Both;
        if converged(&w, &z, &z, eps, rule).unwrap() {
            prop_assert!(converged(&w, &z, &z, eps * 2.0 + 1e-9, rule).unwrap());
        }
        prop_assert!(converged(&w, &w, &w, eps + 1e-12, rule).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn surgery_keeps_structure_and_parameter_law(
        w1 in 2usize..10, w2 in 2usize..16, seed in any::<u64>(), a in 0usize..100, b in 0usize..100,
    ) {
        let spec = ArchitectureSpec::toy().with_filters(&[w1, w2]).unwrap();
        let model = build_model(&spec, seed).unwrap();
        let r1 = a % w1;
        let r2 = b % w2;
        let sets = vec![
            ("conv1".to_string(), (0..r1).map(|i| (i * 7 + seed as usize) % w1).collect::<std::collections::BTreeSet<_>>().into_iter().collect::<Vec<_>>()),
            ("conv2".to_string(), (0..r2).map(|i| (i * 5 + 1) % w2).collect::<std::collections::BTreeSet<_>>().into_iter().collect::<Vec<_>>()),
        ];
        let plan = plan_surgery(&model, &sets).unwrap();
        let pruned = apply_plan(&model, &plan).unwrap();
        prop_assert!(validate_structure(&pruned).is_empty());
        let widths = [w1 - sets[0].1.len(), w2 - sets[1].1.len()];
        let law = ArchitectureSpec::toy().with_filters(&widths).unwrap().parameter_count().unwrap();
        prop_assert_eq!(pruned.parameter_count(), law);
    }

    #[test]
    fn checkpoints_round_trip(w1 in 1usize..10, w2 in 1usize..12, seed in any::<u64>()) {
        let spec = ArchitectureSpec::toy().with_filters(&[w1, w2]).unwrap();
        let model = build_model(&spec, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, &path, &CheckpointMetadata::new("toy", "t", seed, 3)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        prop_assert_eq!(back.metadata.epoch, 3);
        let batch = Batch { inputs: vec![0.25; 2 * 256], labels: vec![0, 1], sample_shape: [1, 16, 16] };
        prop_assert_eq!(model.forward(&batch).unwrap(), back.model.forward(&batch).unwrap());
    }

    #[test]
    fn record_csv_round_trips(points in prop::collection::vec((0u64..1000, -1e6f64..1e6), 0..50)) {
        let mut r = RunRecord::new("p");
        for (i, (step, v)) in points.iter().enumerate() {
            r.push("s", *step, if i % 2 == 0 { "conv1" } else { "" }, "m", *v);
        }
        let bytes = r.to_csv().unwrap();
        prop_assert_eq!(RunRecord::points_from_csv(&bytes).unwrap(), r.points.clone());
        prop_assert_eq!(bytes, r.to_csv().unwrap());
    }

    #[test]
    fn overrides_set_the_value(rate in 0.0f64..0.99, lr in 1e-5f64..1.0) {
        let base = "seed = 1\n[model]\narchitecture = \"toy\"\n[data]\ndataset = \"synthetic\"\n";
        let c = RunConfig::parse(base, &[format!("admm.prune_rate={rate:?}"), format!("train.learning_rate={lr:?}")]).unwrap();
        prop_assert_eq!(c.admm.prune_rate, rate);
        prop_assert_eq!(c.train.learning_rate, lr);
    }
}
