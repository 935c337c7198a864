//! Experiment orchestration: pretraining, ADMM training, pruning,
//! fine-tuning and the iterative Taylor baseline.
//!
//! All stages of one run share a minibatch stream whose epoch shuffles are
//! keyed by a global epoch counter, so a run is a pure function of its
//! config. The counter is stored in every checkpoint, which lets a stage be
//! re-run from the previous stage's checkpoint with identical results.

pub mod config;
pub mod record;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::admm::{init_state, keep_count, AdmmState, Granularity, LayerSparsitySpec};
use crate::arch::{build_model, ArchitectureSpec};
use crate::criteria::{decide, score_taylor, Criterion, PruneDecision};
use crate::data::{data_root, load_dataset, synthetic_dataset, Dataset, Normalization, Split};
use crate::diagnostics::l1_snapshot;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint_expecting, save_checkpoint_with, Batch, CheckpointMetadata, Model, Sgd};
use crate::surgery::{apply_plan, plan_surgery};

pub use config::{
    AdmmConfig, DataConfig, IterativeConfig, ModelConfig, PipelineConfig, PipelineKind, PruneConfig, PruneMethod,
    RunConfig, TrainConfig,
};
pub use record::{MetricPoint, RunRecord, RunStatus, CSV_HEADER};

/// Seed offset separating the synthetic test split from the training split.
const TEST_SEED_SALT: u64 = 0x7E57_5EED;
/// Epoch keys at the top of the range are reserved for criterion statistics.
const STAT_EPOCH_BASE: u64 = u64::MAX - (1 << 32);

/// Training and test splits described by `config.data`.
pub fn load_data(config: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &config.data;
    let (train, test) = match d.dataset.as_str() {
        "synthetic" => (
            synthetic_dataset(config.seed, d.n_per_class, d.difficulty),
            synthetic_dataset(config.seed ^ TEST_SEED_SALT, d.n_test_per_class, d.difficulty),
        ),
        name => {
            let root = data_root(d.root.as_deref())?;
            let norm = if name == "mnist" { Normalization::mnist() } else { Normalization::cifar10() };
            (load_dataset(name, Split::Train, &root, &norm)?, load_dataset(name, Split::Test, &root, &norm)?)
        }
    };
    let train = train.stratified_subset(d.subset, config.seed)?.with_seed(config.seed);
    Ok((train, test))
}

/// One run: config, data, the record being filled and the shared batch stream.
pub struct Experiment {
    pub config: RunConfig,
    pub arch: ArchitectureSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub record: RunRecord,
    out_dir: Option<PathBuf>,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Experiment {
    /// Validates `config` and loads its data. Checkpoints go to
    /// `out_dir/checkpoints` when a directory is given.
    pub fn new(config: RunConfig, run_id: &str, out_dir: Option<&Path>) -> Result<Self> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let arch = config.architecture()?;
        let (train, test) = load_data(&config)?;
        Self::with_data(config, arch, train, test, run_id, out_dir)
    }

    /// Like [`Self::new`] with caller-supplied datasets.
    pub fn with_data(
        config: RunConfig,
        arch: ArchitectureSpec,
        train: Dataset,
        test: Dataset,
        run_id: &str,
        out_dir: Option<&Path>,
    ) -> Result<Self> {
        if train.sample_shape() != arch.input || test.sample_shape() != arch.input {
            return Err(Error::Dimension { expected: arch.input.to_vec(), actual: train.sample_shape().to_vec() });
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Usage("training and test data must be nonempty".into()));
        }
        let mut record = RunRecord::new(run_id);
        record.architecture = arch.name.clone();
        record.dataset = config.data.dataset.clone();
        record.criterion = config.prune.criterion.name().to_string();
        record.pipeline = match config.pipeline.kind {
            PipelineKind::SingleShot => "single_shot".into(),
            PipelineKind::IterativeTe => "iterative_te".into(),
        };
        record.prune_rate = match &config.admm.layer_rates {
            Some(r) if !r.is_empty() => r.iter().sum::<f64>() / r.len() as f64,
            _ => config.admm.prune_rate,
        };
        record.seed = config.seed;
        Ok(Self {
            config,
            arch,
            train,
            test,
            record,
            out_dir: out_dir.map(Path::to_path_buf),
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        })
    }

    /// Global epoch counter (number of epochs started and finished so far).
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn sgd(&self) -> Sgd {
        Sgd { learning_rate: self.config.train.learning_rate as f32, weight_decay: self.config.train.weight_decay as f32 }
    }

    /// Next minibatch of the stream; the flag is set when it closes an epoch.
    fn next_batch(&mut self, batch_size: usize) -> (Batch, bool) {
        if self.order.is_empty() {
            self.order = self.train.epoch_order(self.epoch);
            self.pos = 0;
        }
        let end = (self.pos + batch_size.max(1)).min(self.order.len());
        let batch = self.train.gather(&self.order[self.pos..end]);
        self.pos = end;
        let closed = end == self.order.len();
        if closed {
            self.epoch += 1;
            self.order.clear();
        }
        (batch, closed)
    }

    /// Drops the rest of a partially consumed epoch.
    fn close_epoch(&mut self) {
        if !self.order.is_empty() {
            self.epoch += 1;
            self.order.clear();
        }
    }

    fn stat_batches(&self, key: u64) -> Vec<Batch> {
        let p = &self.config.prune;
        let order = self.train.epoch_order(STAT_EPOCH_BASE.wrapping_add(key));
        let take = (p.stat_batches * p.stat_batch_size).min(order.len());
        order[..take].chunks(p.stat_batch_size).map(|c| self.train.gather(c)).collect()
    }

    fn checkpoint(&self, model: &Model, stage: &str, state: Option<&AdmmState>) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let dir = dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut meta = CheckpointMetadata::new(model.architecture(), stage, self.config.seed, self.epoch);
        meta.extra.insert("run-id".into(), self.record.run_id.clone());
        let mut tensors = BTreeMap::new();
        if let Some(state) = state {
            let (t, m) = state.to_checkpoint_parts();
            tensors = t;
            meta.extra.extend(m);
        }
        save_checkpoint_with(model, &dir.join(format!("{stage}.ckpt")), &meta, &tensors)
    }

    fn evaluate(&self, model: &Model) -> Result<f64> {
        model.evaluate(&self.test)
    }

    fn snapshot_l1(&mut self, model: &Model, stage: &str) {
        for (layer, norms) in l1_snapshot(model) {
            for (j, v) in norms.into_iter().enumerate() {
                self.record.push(stage, j as u64, &layer, "filter_l1", v);
            }
        }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        *self.record.stage_seconds.entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
        out
    }

    /// Plain SGD for `epochs` epochs, recording mean loss and test accuracy
    /// per epoch under `stage`. Returns the last test accuracy (or the
    /// current one when `epochs` is zero).
    pub fn train_plain(&mut self, model: &mut Model, stage: &str, epochs: usize) -> Result<f64> {
        self.close_epoch();
        let sgd = self.sgd();
        let bs = self.config.data.batch_size;
        let step_loss = self.config.train.record_step_loss;
        let mut step = 0u64;
        for e in 1..=epochs as u64 {
            let (mut sum, mut n) = (0.0f64, 0usize);
            loop {
                let (batch, closed) = self.next_batch(bs);
                let loss = model.train_step(&batch, sgd, None)?;
                step += 1;
                if step_loss {
                    self.record.push(stage, step, "", "step_loss", loss as f64);
                }
                sum += loss as f64 * batch.len() as f64;
                n += batch.len();
                if closed {
                    break;
                }
            }
            self.record.push(stage, e, "", "train_loss", sum / n as f64);
            let acc = self.evaluate(model)?;
            self.record.push(stage, e, "", "test_accuracy", acc);
            log::info!("{stage} epoch {e}/{epochs}: loss {:.4} acc {acc:.4}", sum / n as f64);
        }
        self.evaluate(model)
    }

    /// The starting model: a checkpoint, fresh weights, or fresh weights
    /// followed by pretraining.
    pub fn initial_model(&mut self) -> Result<Model> {
        if let Some(path) = self.config.train.init_checkpoint.clone() {
            let loaded = load_checkpoint_expecting(&path, &self.arch.name).map_err(|e| e.in_stage("load"))?;
            self.epoch = loaded.metadata.epoch;
            let acc = self.evaluate(&loaded.model)?;
            self.record.accuracy.insert("initial".into(), acc);
            return Ok(loaded.model);
        }
        let model = build_model(&self.arch, self.config.seed)?;
        if self.config.prune.criterion.uses_admm() && self.config.train.admm_from_scratch {
            return Ok(model);
        }
        self.pretrain(model)
    }

    /// Plain training for `train.pretrain_epochs`; checkpoint tag `pretrain`.
    pub fn pretrain(&mut self, mut model: Model) -> Result<Model> {
        self.timed("pretrain", |x| {
            let epochs = x.config.train.pretrain_epochs;
            let acc = x.train_plain(&mut model, "pretrain", epochs)?;
            x.record.accuracy.insert("pretrain".into(), acc);
            x.snapshot_l1(&model, "pretrain");
            x.checkpoint(&model, "pretrain", None)?;
            Ok(model)
        })
    }

    /// Per-layer constraint specs from the config.
    pub fn admm_specs(&self, model: &Model) -> Result<Vec<LayerSparsitySpec>> {
        let layers = model.list_conv_layers()?;
        let rates = self.config.layer_rates(layers.len())?;
        let rhos = self.config.layer_rho(layers.len())?;
        let a = &self.config.admm;
        let granularity = match self.config.prune.criterion {
            PruneMethod::AdmmWeight => Granularity::Weight,
            _ => Granularity::Filter,
        };
        layers
            .iter()
            .enumerate()
            .map(|(i, h)| {
                let w = model.get_weights(&h.layer_id)?;
                let eps = match &a.layer_eps {
                    Some(e) => e[i],
                    None => a.eps_per_element * w.numel() as f64,
                };
                LayerSparsitySpec::from_rate(&w, rates[i], eps, rhos[i], granularity)
            })
            .collect()
    }

    /// ADMM-regularized training from `model` with a fresh state.
    pub fn train_admm(&mut self, model: Model) -> Result<(Model, AdmmState)> {
        let specs = self.admm_specs(&model)?;
        let state = init_state(&model, &specs, self.config.admm.norm)?.with_stop_rule(self.config.admm.stop_rule);
        self.train_admm_from(model, state)
    }

    /// Runs outer ADMM iterations (M regularized SGD steps, then the Z- and
    /// U-updates) until every layer passes the stop test or the epoch cap
    /// is reached. `‖W − Z‖_F` is recorded per layer at every iteration.
    pub fn train_admm_from(&mut self, mut model: Model, mut state: AdmmState) -> Result<(Model, AdmmState)> {
        self.timed("admm", |x| {
            x.close_epoch();
            let sgd = x.sgd();
            let bs = x.config.data.batch_size;
            let steps_per_epoch = x.train.len().div_ceil(bs.max(1)) as u64;
            let a = x.config.admm.clone();
            let m = if a.update_interval == 0 { steps_per_epoch } else { a.update_interval as u64 };
            let max_steps = x.config.train.admm_epochs as u64 * steps_per_epoch;
            let step_loss = x.config.train.record_step_loss;
            let (mut step, mut epoch_in_stage) = (0u64, 0u64);
            let (mut sum, mut n) = (0.0f64, 0usize);
            let mut best = vec![f64::INFINITY; state.specs.len()];
            let mut stale = vec![0usize; state.specs.len()];
            let mut warned = vec![false; state.specs.len()];
            let mut converged = false;
            while step < max_steps {
                for _ in 0..m {
                    if step >= max_steps {
                        break;
                    }
                    let (batch, closed) = x.next_batch(bs);
                    let (extra, _) = state.regularizer(&model)?;
                    let loss = model.train_step(&batch, sgd, Some(&extra))?;
                    step += 1;
                    if step_loss {
                        x.record.push("admm", step, "", "step_loss", loss as f64);
                    }
                    sum += loss as f64 * batch.len() as f64;
                    n += batch.len();
                    if closed {
                        epoch_in_stage += 1;
                        x.end_admm_epoch(&model, epoch_in_stage, sum / n as f64)?;
                        (sum, n) = (0.0, 0);
                    }
                }
                let progress = state.update(&model)?;
                for (i, p) in progress.iter().enumerate() {
                    x.record.push("admm", state.k, &p.layer_id, "wz_distance", p.wz_distance);
                    x.record.push("admm", state.k, &p.layer_id, "z_change", p.z_change_sq.sqrt());
                    if p.wz_distance < best[i] {
                        best[i] = p.wz_distance;
                        stale[i] = 0;
                    } else {
                        stale[i] += 1;
                        if stale[i] > a.patience && !warned[i] {
                            warned[i] = true;
                            x.record.warn(format!(
                                "admm: ‖W−Z‖ of `{}` has not decreased for {} iterations",
                                p.layer_id, stale[i]
                            ));
                        }
                    }
                }
                converged = progress.iter().all(|p| p.converged);
                if converged && a.stop_on_convergence {
                    break;
                }
            }
            if n > 0 {
                epoch_in_stage += 1;
                x.end_admm_epoch(&model, epoch_in_stage, sum / n as f64)?;
            }
            x.close_epoch();
            if !converged {
                x.record.warn(format!("admm: stop test not met after {} iterations (epoch cap)", state.k));
            }
            x.record.admm_converged = Some(converged);
            x.record.admm_iterations = Some(state.k);
            let acc = x.evaluate(&model)?;
            x.record.accuracy.insert("admm".into(), acc);
            x.snapshot_l1(&model, "admm");
            x.checkpoint(&model, "admm", Some(&state))?;
            Ok((model, state))
        })
    }

    fn end_admm_epoch(&mut self, model: &Model, epoch: u64, mean_loss: f64) -> Result<()> {
        self.record.push("admm", epoch, "", "train_loss", mean_loss);
        let acc = self.evaluate(model)?;
        self.record.push("admm", epoch, "", "test_accuracy", acc);
        log::info!("admm epoch {epoch}: loss {mean_loss:.4} acc {acc:.4}");
        Ok(())
    }

    /// Scores every conv layer of `model` under the configured criterion,
    /// removes the lowest-scored filters and records the decisions.
    pub fn prune(&mut self, model: &Model) -> Result<Model> {
        self.timed("prune", |x| {
            let before = x.evaluate(model)?;
            x.record.push("prune", 0, "", "test_accuracy", before);
            let layers = model.list_conv_layers()?;
            let rates = x.config.layer_rates(layers.len())?;
            let criterion = x.config.prune.criterion.criterion();
            let batches = match criterion {
                Criterion::MeanActivation | Criterion::Taylor => x.stat_batches(0),
                _ => Vec::new(),
            };
            let mut pairs = Vec::with_capacity(layers.len());
            let mut decisions = Vec::with_capacity(layers.len());
            for (i, h) in layers.iter().enumerate() {
                let count = h.n_filters - keep_count(h.n_filters, rates[i]);
                let seed = x.config.seed.wrapping_add(i as u64 + 1);
                let d = decide(model, &h.layer_id, criterion, count, &batches, seed)?;
                pairs.push((h.layer_id.clone(), d.prune_indices.clone()));
                decisions.push(d);
            }
            let plan = plan_surgery(model, &pairs)?;
            let pruned = apply_plan(model, &plan)?;
            let total: usize = layers.iter().map(|h| h.n_filters).sum();
            let removed: usize = plan.layers.iter().map(|l| l.prune_indices.len()).sum();
            x.record.pruned_fraction = removed as f64 / total as f64;
            x.record.decisions = decisions;
            x.record.surgery = Some(plan);
            let after = x.evaluate(&pruned)?;
            x.record.push("prune", 1, "", "test_accuracy", after);
            x.record.accuracy.insert("pre_prune".into(), before);
            x.record.accuracy.insert("pruned".into(), after);
            x.checkpoint(&pruned, "pruned", None)?;
            Ok(pruned)
        })
    }

    /// Fine-tunes for `epochs` epochs under `stage` and records the final
    /// accuracy.
    pub fn finetune(&mut self, mut model: Model, stage: &str, epochs: usize) -> Result<Model> {
        self.timed(stage, |x| {
            let acc = x.train_plain(&mut model, stage, epochs)?;
            x.record.accuracy.insert(stage.to_string(), acc);
            x.record.accuracy.insert("final".into(), acc);
            x.record.final_accuracy = Some(acc);
            x.snapshot_l1(&model, stage);
            x.checkpoint(&model, stage, None)?;
            Ok(model)
        })
    }

    /// Resumes at the fine-tune stage from a post-prune checkpoint.
    pub fn finetune_from_checkpoint(&mut self, path: &Path) -> Result<Model> {
        let loaded = crate::model::load_checkpoint(path).map_err(|e| e.in_stage("load"))?;
        self.epoch = loaded.metadata.epoch;
        self.order.clear();
        let epochs = self.config.train.finetune_epochs;
        let model = self.finetune(loaded.model, "finetune", epochs)?;
        self.record.status = RunStatus::Complete;
        Ok(model)
    }

    /// Train (with ADMM for the ADMM criteria), prune once, fine-tune.
    pub fn single_shot(&mut self) -> Result<Model> {
        let mut model = self.initial_model()?;
        if self.config.prune.criterion.uses_admm() {
            model = self.train_admm(model)?.0;
        }
        let pruned = self.prune(&model)?;
        let epochs = self.config.train.finetune_epochs;
        self.finetune(pruned, "finetune", epochs)
    }

    /// Repeated rounds of global Taylor ranking, removal of the lowest
    /// filters (keeping one per layer) and a short burst of SGD updates,
    /// until the configured number of filters is gone.
    pub fn iterative_taylor(&mut self) -> Result<Model> {
        let it = self
            .config
            .iterative
            .clone()
            .ok_or_else(|| Error::Config("iterative_te requires an [iterative] section".into()))?;
        let mut model = self.initial_model()?;
        let model = self.timed("iterative", |x| {
            let layers = model.list_conv_layers()?;
            let rates = x.config.layer_rates(layers.len())?;
            let total: usize = layers.iter().map(|h| h.n_filters).sum();
            let target: usize =
                layers.iter().zip(&rates).map(|(h, &r)| h.n_filters - keep_count(h.n_filters, r)).sum();
            let capacity: usize = layers.iter().map(|h| h.n_filters - 1).sum();
            if target > capacity {
                return Err(Error::Spec(format!(
                    "target of {target} filters exceeds the {capacity} removable without emptying a layer"
                )));
            }
            x.close_epoch();
            let sgd = x.sgd();
            let (mut removed, mut round) = (0usize, 0u64);
            while removed < target {
                let r = it.filters_per_round.min(target - removed);
                let batches = x.stat_batches(round + 1);
                let handles = model.list_conv_layers()?;
                let mut candidates = Vec::new();
                let mut scores = Vec::with_capacity(handles.len());
                for (li, h) in handles.iter().enumerate() {
                    let s = score_taylor(&model, &h.layer_id, &batches)?;
                    candidates.extend(s.iter().enumerate().map(|(j, &v)| (v, li, j)));
                    scores.push(s);
                }
                candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                let mut left: Vec<usize> = handles.iter().map(|h| h.n_filters).collect();
                let mut chosen = vec![Vec::new(); handles.len()];
                let mut taken = 0;
                for &(_, li, j) in &candidates {
                    if taken == r {
                        break;
                    }
                    if left[li] > 1 {
                        left[li] -= 1;
                        chosen[li].push(j);
                        taken += 1;
                    }
                }
                if taken < r {
                    return Err(Error::Spec(format!("round {}: only {taken} of {r} filters removable", round + 1)));
                }
                let mut pairs = Vec::new();
                for (li, mut idx) in chosen.into_iter().enumerate() {
                    if idx.is_empty() {
                        continue;
                    }
                    idx.sort_unstable();
                    x.record.decisions.push(PruneDecision {
                        layer_id: handles[li].layer_id.clone(),
                        criterion: Criterion::Taylor,
                        scores: scores[li].clone(),
                        prune_indices: idx.clone(),
                    });
                    pairs.push((handles[li].layer_id.clone(), idx));
                }
                let plan = plan_surgery(&model, &pairs)?;
                model = apply_plan(&model, &plan)?;
                removed += r;
                round += 1;
                for _ in 0..it.updates_per_round {
                    let (batch, _) = x.next_batch(it.batch_size);
                    model.train_step(&batch, sgd, None)?;
                }
                let acc = x.evaluate(&model)?;
                x.record.push("iterative", round, "", "test_accuracy", acc);
                x.record.push("iterative", round, "", "filters_removed", removed as f64);
                log::info!("iterative round {round}: {removed}/{target} removed, acc {acc:.4}");
            }
            x.close_epoch();
            x.record.pruned_fraction = removed as f64 / total as f64;
            let acc = x.evaluate(&model)?;
            x.record.accuracy.insert("iterative".into(), acc);
            x.record.final_accuracy = Some(acc);
            x.record.accuracy.insert("final".into(), acc);
            x.checkpoint(&model, "iterative", None)?;
            Ok(model)
        })?;
        if it.extra_finetune {
            return self.finetune(model, "extra_finetune", it.extra_finetune_epochs);
        }
        Ok(model)
    }

    /// Runs the configured pipeline and marks the record complete or failed.
    pub fn run(&mut self) -> Result<Model> {
        let out = match self.config.pipeline.kind {
            PipelineKind::SingleShot => self.single_shot(),
            PipelineKind::IterativeTe => self.iterative_taylor(),
        };
        match &out {
            Ok(_) => self.record.status = RunStatus::Complete,
            Err(e) => {
                self.record.status = RunStatus::Failed;
                self.record.error = Some(e.to_string());
            }
        }
        out
    }
}

/// Pretraining stage alone on a fresh model.
pub fn pretrain(config: &RunConfig) -> Result<(Model, RunRecord)> {
    let mut x = Experiment::new(config.clone(), "pretrain", None)?;
    let model = build_model(&x.arch, config.seed)?;
    let model = x.pretrain(model)?;
    x.record.status = RunStatus::Complete;
    Ok((model, x.record))
}

/// ADMM stage alone, starting from `model`.
pub fn train_admm(model: Model, config: &RunConfig) -> Result<(Model, AdmmState, RunRecord)> {
    let mut x = Experiment::new(config.clone(), "admm", None)?;
    let (model, state) = x.train_admm(model)?;
    x.record.status = RunStatus::Complete;
    Ok((model, state, x.record))
}

pub fn single_shot(config: &RunConfig) -> Result<(Model, RunRecord)> {
    let mut x = Experiment::new(config.clone(), "single_shot", None)?;
    let model = x.single_shot()?;
    x.record.status = RunStatus::Complete;
    Ok((model, x.record))
}

pub fn iterative_taylor(config: &RunConfig) -> Result<(Model, RunRecord)> {
    let mut x = Experiment::new(config.clone(), "iterative_te", None)?;
    let model = x.iterative_taylor()?;
    x.record.status = RunStatus::Complete;
    Ok((model, x.record))
}

/// Writes the resolved config, CSV, full JSON record and summary of a run.
pub fn write_run_dir(dir: &Path, config: &RunConfig, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("config.toml", config.to_toml().as_bytes())?;
    write("record.csv", &record.to_csv()?)?;
    write("record.json", record.to_json().as_bytes())?;
    write("summary.json", record.summary_json().as_bytes())
}
