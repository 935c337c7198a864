//! Mandatory acceptance suite. Runs every criterion, prints one
//! `criterion N: PASS|FAIL` line each and exits nonzero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chanprune::admm::{
    admm_regularizer, filter_norms, project_cardinality, step_u, step_z, LayerSparsitySpec, Norm,
};
use chanprune::arch::{build_model, ArchitectureSpec};
use chanprune::cli::{config_source, execute};
use chanprune::criteria::select_prune_set;
use chanprune::diagnostics::near_zero_fraction;
use chanprune::model::Batch;
use chanprune::pipeline::{Experiment, RunConfig};
use chanprune::surgery::{apply_plan, plan_surgery, zero_out_filters};
use chanprune::FilterTensor;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FilterTensor {
    let n: usize = shape.iter().product();
    FilterTensor::new("t", shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn kept(t: &FilterTensor) -> Vec<usize> {
    (0..t.n_filters()).filter(|&j| t.filter(j).iter().any(|&v| v != 0.0)).collect()
}

/// Projection against the exhaustive search over zero patterns.
fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut cases = 0;
    for _ in 0..500 {
        let n = rng.random_range(1..=8usize);
        let shape = [n, rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let t = random_tensor(&mut rng, shape);
        let sq: Vec<f64> = (0..n).map(|j| t.filter(j).iter().map(|&v| (v as f64).powi(2)).sum()).collect();
        let l1 = filter_norms(&t, Norm::L1);
        for b in 1..=n {
            let spec = LayerSparsitySpec::with_keep("t", n, b, 1.0, 1.0);
            let mut best = (f64::INFINITY, 0u32);
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != b {
                    continue;
                }
                let dist: f64 = (0..n).filter(|&j| mask & (1 << j) == 0).map(|j| sq[j]).sum();
                if dist < best.0 {
                    best = (dist, mask);
                }
            }
            let oracle: Vec<usize> = (0..n).filter(|&j| best.1 & (1 << j) != 0).collect();
            let p2 = project_cardinality(&t, &spec, Norm::L2).map_err(|e| e.to_string())?;
            check(kept(&p2) == oracle, || format!("l2 n={n} B={b}: {:?} vs oracle {oracle:?}", kept(&p2)))?;
            let mut by_l1: Vec<usize> = (0..n).collect();
            by_l1.sort_by(|&a, &c| l1[c].total_cmp(&l1[a]).then(a.cmp(&c)));
            let mut top: Vec<usize> = by_l1[..b].to_vec();
            top.sort_unstable();
            let p1 = project_cardinality(&t, &spec, Norm::L1).map_err(|e| e.to_string())?;
            check(kept(&p1) == top, || format!("l1 n={n} B={b}: {:?} vs top {top:?}", kept(&p1)))?;
            for j in kept(&p2) {
                check(p2.filter(j) == t.filter(j), || "kept filter altered".into())?;
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (tensor, B) cases match the exhaustive oracle"))
}

/// Regularizer gradient, dual algebra and projection idempotence.
fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)];
        let w = random_tensor(&mut rng, shape);
        let z = random_tensor(&mut rng, shape);
        let u = random_tensor(&mut rng, shape);
        let rho = rng.random_range(0.01..2.0);
        let (g, _) = admm_regularizer(&w, &z, &u, rho).map_err(|e| e.to_string())?;
        let i = rng.random_range(0..w.numel());
        let h = 1e-2f32;
        let mut wp = w.clone();
        wp.as_mut_slice()[i] += h;
        let mut wm = w.clone();
        wm.as_mut_slice()[i] -= h;
        let span = wp.as_slice()[i] as f64 - wm.as_slice()[i] as f64;
        let fd = (admm_regularizer(&wp, &z, &u, rho).unwrap().1 - admm_regularizer(&wm, &z, &u, rho).unwrap().1) / span;
        let an = g.as_slice()[i] as f64;
        let rel = (fd - an).abs() / an.abs().max(1e-3);
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("gradient rel error {rel:e} (fd {fd}, analytic {an})"))?;
    }
    // dual algebra: exact on a dyadic grid, ulp-bounded on general floats
    let grid = |rng: &mut ChaCha8Rng, shape: [usize; 4]| {
        let n: usize = shape.iter().product();
        FilterTensor::new("t", shape, (0..n).map(|_| rng.random_range(-256i32..256) as f32 / 64.0).collect()).unwrap()
    };
    for trial in 0..400 {
        let shape = [rng.random_range(1..=6), 2, 2, 2];
        let (w, u) = if trial % 2 == 0 {
            (grid(&mut rng, shape), grid(&mut rng, shape))
        } else {
            (random_tensor(&mut rng, shape), random_tensor(&mut rng, shape))
        };
        let b = rng.random_range(1..=shape[0]);
        let spec = LayerSparsitySpec::with_keep("t", shape[0], b, 1.0, 1.0);
        let z = step_z(&w, &u, &spec, Norm::L1).map_err(|e| e.to_string())?;
        let un = step_u(&u, &w, &z).map_err(|e| e.to_string())?;
        for k in 0..w.numel() {
            let back = un.as_slice()[k] + z.as_slice()[k] - w.as_slice()[k];
            let prev = u.as_slice()[k];
            if trial % 2 == 0 {
                check(back.to_bits() == prev.to_bits(), || format!("dual algebra not exact: {back} vs {prev}"))?;
            } else {
                let scale = [un.as_slice()[k], z.as_slice()[k], w.as_slice()[k], prev]
                    .iter()
                    .fold(0.0f32, |m, v| m.max(v.abs()));
                check((back - prev).abs() <= 4.0 * f32::EPSILON * scale, || format!("dual algebra off: {back} vs {prev}"))?;
            }
        }
        let p = project_cardinality(&w, &spec, Norm::L1).unwrap();
        let pp = project_cardinality(&p, &spec, Norm::L1).unwrap();
        check(
            p.as_slice().iter().zip(pp.as_slice()).all(|(a, c)| a.to_bits() == c.to_bits()),
            || "projection not idempotent".into(),
        )?;
    }
    Ok(format!("200 gradient cases (worst rel error {worst:.1e}); dual algebra and idempotence exact"))
}

/// Zeroed filters removed structurally leave the function unchanged.
fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for net in 0..20 {
        let widths = [rng.random_range(3..=12usize), rng.random_range(3..=20usize)];
        let spec = ArchitectureSpec::toy().with_filters(&widths).map_err(|e| e.to_string())?;
        let model = build_model(&spec, 1000 + net).map_err(|e| e.to_string())?;
        let mut zeroed = model.clone();
        let mut sets = Vec::new();
        for h in model.list_conv_layers().unwrap() {
            let count = ((0.3 * h.n_filters as f64).round() as usize).clamp(1, h.n_filters - 1);
            let mut idx: Vec<usize> = (0..h.n_filters).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let mut chosen = idx[..count].to_vec();
            chosen.sort_unstable();
            zeroed = zero_out_filters(&zeroed, &h.layer_id, &chosen).map_err(|e| e.to_string())?;
            sets.push((h.layer_id.clone(), chosen));
        }
        let plan = plan_surgery(&zeroed, &sets).map_err(|e| e.to_string())?;
        let pruned = apply_plan(&zeroed, &plan).map_err(|e| e.to_string())?;
        let inputs: Vec<f32> = (0..100 * 256).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let batch = Batch { inputs, labels: vec![0; 100], sample_shape: [1, 16, 16] };
        let a = zeroed.forward(&batch).map_err(|e| e.to_string())?;
        let b = pruned.forward(&batch).map_err(|e| e.to_string())?;
        let num: f64 = a.iter().zip(&b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(num / den);
        check(num / den <= 1e-5, || format!("net {net}: output rel error {:e}", num / den))?;
        let remaining: Vec<usize> = widths.iter().zip(&sets).map(|(w, (_, s))| w - s.len()).collect();
        let expected = ArchitectureSpec::toy().with_filters(&remaining).unwrap().parameter_count().unwrap();
        check(pruned.parameter_count() == expected, || {
            format!("net {net}: {} parameters, law gives {expected}", pruned.parameter_count())
        })?;
    }
    Ok(format!("20 networks, worst output rel error {worst:.1e}, parameter law exact"))
}

fn toy(overrides: &[&str]) -> RunConfig {
    let (_, text) = config_source("toy_ci").unwrap();
    let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::parse(&text, &ov).unwrap()
}

/// With every rate at zero, ADMM training follows plain SGD.
fn criterion_4() -> Outcome {
    let config = toy(&[
        "admm.prune_rate=0",
        "admm.update_interval=1",
        "admm.stop_on_convergence=false",
        "train.admm_epochs=11",
        "train.record_step_loss=true",
    ]);
    let mut ax = Experiment::new(config.clone(), "admm", None).map_err(|e| e.to_string())?;
    let model = build_model(&ax.arch, config.seed).unwrap();
    ax.train_admm(model.clone()).map_err(|e| e.to_string())?;
    let mut px = Experiment::new(config.clone(), "plain", None).map_err(|e| e.to_string())?;
    let mut plain = model;
    px.train_plain(&mut plain, "plain", 11).map_err(|e| e.to_string())?;
    let a = ax.record.series("admm", "step_loss", "");
    let p = px.record.series("plain", "step_loss", "");
    check(a.len() >= 200 && p.len() >= 200, || format!("only {} / {} steps", a.len(), p.len()))?;
    let mut worst = 0.0f64;
    for k in 0..200 {
        let rel = (a[k].1 - p[k].1).abs() / p[k].1.abs().max(1e-12);
        worst = worst.max(rel);
        check(rel <= 1e-6, || format!("step {}: {} vs {}", k + 1, a[k].1, p[k].1))?;
    }
    Ok(format!("200 steps, worst loss rel difference {worst:.1e}"))
}

/// Exit sparsity (5) and the post-prune comparison with vanilla training (6).
fn criteria_5_and_6() -> (Outcome, Outcome) {
    let mut sparsity = Vec::new();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=3u64 {
        let run = || -> Result<(String, f64, f64), String> {
            let config = toy(&[&format!("seed={seed}")]);
            let mut x = Experiment::new(config.clone(), "admm", None).map_err(|e| e.to_string())?;
            let model = x.initial_model().map_err(|e| e.to_string())?;
            let (model, state) = x.train_admm(model).map_err(|e| e.to_string())?;
            check(x.record.admm_converged == Some(true), || format!("seed {seed}: ADMM stopped at the epoch cap"))?;
            let mut notes = Vec::new();
            for spec in &state.specs {
                let w = model.get_weights(&spec.layer_id).unwrap();
                let l1 = filter_norms(&w, Norm::L1);
                let set = select_prune_set(&l1, w.n_filters() - spec.keep_count).unwrap();
                let mass: f64 = set.iter().map(|&j| w.filter(j).iter().map(|&v| (v as f64).powi(2)).sum::<f64>()).sum();
                check(mass <= spec.tolerance, || {
                    format!("seed {seed} {}: prune-set mass {mass:e} > ε {:e}", spec.layer_id, spec.tolerance)
                })?;
                let frac = near_zero_fraction(&l1, 0.01);
                check(frac >= 0.5, || format!("seed {seed} {}: only {frac} of filters near zero", spec.layer_id))?;
                notes.push(format!("{} mass {mass:.1e}", spec.layer_id));
            }
            x.prune(&model).map_err(|e| e.to_string())?;
            let admm_acc = x.record.accuracy["pruned"];
            let epochs = config.train.pretrain_epochs as u64 + x.record.admm_iterations.unwrap();
            let vanilla = toy(&[
                &format!("seed={seed}"),
                "prune.criterion=min_weight",
                &format!("train.pretrain_epochs={epochs}"),
            ]);
            let mut v = Experiment::new(vanilla, "vanilla", None).map_err(|e| e.to_string())?;
            let vm = v.initial_model().map_err(|e| e.to_string())?;
            v.prune(&vm).map_err(|e| e.to_string())?;
            Ok((notes.join(", "), admm_acc, v.record.accuracy["pruned"]))
        };
        match run() {
            Ok((note, a, v)) => {
                sparsity.push(Ok(format!("seed {seed}: {note}")));
                if a > v {
                    wins += 1;
                }
                pairs.push(format!("{a:.3} vs {v:.3}"));
            }
            Err(e) => sparsity.push(Err(e)),
        }
    }
    let c5 = match sparsity.iter().find_map(|r| r.as_ref().err()) {
        Some(e) => Err(e.clone()),
        None => Ok(sparsity.into_iter().map(Result::unwrap).collect::<Vec<_>>().join("; ")),
    };
    let c6 = if pairs.len() < 3 {
        Err("not all seeds completed".to_string())
    } else if wins >= 2 {
        Ok(format!("ADMM beats vanilla post-prune in {wins}/3 seeds ({})", pairs.join(", ")))
    } else {
        Err(format!("ADMM ahead in only {wins}/3 seeds ({})", pairs.join(", ")))
    };
    (c5, c6)
}

/// Repeated runs produce byte-identical CSVs.
fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = toy(&["seed=7"]);
    let mut csvs = Vec::new();
    for rep in ["a", "b"] {
        let out = execute(config.clone(), &dir.path().join(rep), "toy");
        if let Some(e) = out.error {
            return Err(e.message);
        }
        csvs.push(std::fs::read(out.dir.join("record.csv")).map_err(|e| e.to_string())?);
    }
    check(csvs[0] == csvs[1], || "record.csv differs between repeated runs".into())?;
    Ok(format!("full single-shot run repeated, {} CSV bytes identical", csvs[0].len()))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |n: &str, started: Instant, r: Outcome| {
        let secs = started.elapsed().as_secs_f64();
        match r {
            Ok(m) => println!("criterion {n}: PASS ({secs:.1}s) {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n}: FAIL ({secs:.1}s) {m}");
            }
        }
    };
    let t = Instant::now();
    report("1", t, guarded(criterion_1));
    let t = Instant::now();
    report("2", t, guarded(criterion_2));
    let t = Instant::now();
    report("3", t, guarded(criterion_3));
    let t = Instant::now();
    report("4", t, guarded(criterion_4));
    let t = Instant::now();
    let (c5, c6) = catch_unwind(criteria_5_and_6).unwrap_or_else(|_| (Err("panicked".into()), Err("panicked".into())));
    report("5", t, c5);
    report("6", t, c6);
    let t = Instant::now();
    report("7", t, guarded(criterion_7));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 7 acceptance criteria passed");
}
