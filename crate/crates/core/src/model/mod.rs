//! Trainable sequential conv classifier: named conv layers, weight access,
//! SGD steps with injectable extra gradient terms, evaluation and checkpoints.
//!
//! Every conv layer is followed by ReLU, so a filter whose weights and bias
//! are exactly zero produces an all-zero feature map.

mod checkpoint;
pub(crate) mod nn;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, save_checkpoint_with, CheckpointMetadata,
    LoadedCheckpoint, FORMAT_VERSION,
};

use crate::arch::conv_output_size;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::FilterTensor;
use nn::ConvGeom;

/// Samples per work unit when a batch is split across threads. Fixed so the
/// gradient reduction order does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    /// Max pooling with window = stride.
    Max(usize),
    /// Mean pooling with window = stride.
    Avg(usize),
}

impl Pool {
    pub fn window(self) -> usize {
        match self {
            Pool::Max(s) | Pool::Avg(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessorKind {
    Conv,
    FlattenToDense,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHandle {
    pub layer_id: String,
    pub n_filters: usize,
    pub successor_kind: SuccessorKind,
    pub has_bias: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub(crate) id: String,
    pub(crate) weight: FilterTensor,
    pub(crate) bias: Vec<f32>,
    pub(crate) padding: usize,
    pub(crate) pool: Option<Pool>,
}

impl ConvLayer {
    pub fn new(
        id: impl Into<String>,
        shape: [usize; 4],
        weight: Vec<f32>,
        bias: Vec<f32>,
        padding: usize,
        pool: Option<Pool>,
    ) -> Result<Self> {
        let id = id.into();
        let weight = FilterTensor::new(id.clone(), shape, weight)?;
        if bias.len() != shape[0] {
            return Err(Error::Dimension { expected: vec![shape[0]], actual: vec![bias.len()] });
        }
        if shape[2] != shape[3] {
            return Err(Error::Structural(format!("layer `{id}` must use square kernels")));
        }
        Ok(Self { id, weight, bias, padding, pool })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn weight(&self) -> &FilterTensor {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn pool(&self) -> Option<Pool> {
        self.pool
    }

    fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub(crate) id: String,
    pub(crate) in_features: usize,
    pub(crate) out_features: usize,
    /// Row-major `[out_features, in_features]`.
    pub(crate) weight: Vec<f32>,
    pub(crate) bias: Vec<f32>,
}

impl DenseLayer {
    pub fn new(
        id: impl Into<String>,
        in_features: usize,
        out_features: usize,
        weight: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if weight.len() != in_features * out_features {
            return Err(Error::Dimension {
                expected: vec![out_features, in_features],
                actual: vec![weight.len()],
            });
        }
        if bias.len() != out_features {
            return Err(Error::Dimension { expected: vec![out_features], actual: vec![bias.len()] });
        }
        Ok(Self { id: id.into(), in_features, out_features, weight, bias })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }
}

/// A minibatch of samples with shape `[c, h, w]` each, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f32>,
    pub labels: Vec<usize>,
    pub sample_shape: [usize; 3],
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_shape.iter().product::<usize>();
        &self.inputs[i * n..(i + 1) * n]
    }
}

/// Plain SGD hyperparameters for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f32,
    /// Coefficient λ of the `(λ/2)·Σ‖W‖²` penalty on conv and dense kernels (biases excluded).
    pub weight_decay: f32,
}

/// Loss gradients for every parameter, in model layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub conv_weight: Vec<FilterTensor>,
    pub conv_bias: Vec<Vec<f32>>,
    pub dense_weight: Vec<Vec<f32>>,
    pub dense_bias: Vec<Vec<f32>>,
}

impl Gradients {
    fn zeros(model: &Model) -> Self {
        Self {
            conv_weight: model.convs.iter().map(|c| c.weight.zeros_like()).collect(),
            conv_bias: model.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            dense_weight: model.dense.iter().map(|d| vec![0.0; d.weight.len()]).collect(),
            dense_bias: model.dense.iter().map(|d| vec![0.0; d.bias.len()]).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        fn add(a: &mut [f32], b: &[f32]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.conv_weight.iter_mut().zip(&other.conv_weight) {
            add(a.as_mut_slice(), b.as_slice());
        }
        for (a, b) in self.conv_bias.iter_mut().zip(&other.conv_bias) {
            add(a, b);
        }
        for (a, b) in self.dense_weight.iter_mut().zip(&other.dense_weight) {
            add(a, b);
        }
        for (a, b) in self.dense_bias.iter_mut().zip(&other.dense_bias) {
            add(a, b);
        }
    }

    fn scale(&mut self, s: f32) {
        let all = self
            .conv_weight
            .iter_mut()
            .map(|t| t.as_mut_slice())
            .chain(self.conv_bias.iter_mut().map(|v| v.as_mut_slice()))
            .chain(self.dense_weight.iter_mut().map(|v| v.as_mut_slice()))
            .chain(self.dense_bias.iter_mut().map(|v| v.as_mut_slice()));
        for slice in all {
            slice.iter_mut().for_each(|v| *v *= s);
        }
    }
}

struct ConvTrace {
    padded: Vec<f32>,
    pre: Vec<f32>,
    post: Vec<f32>,
    argmax: Vec<u32>,
}

struct DenseTrace {
    input: Vec<f32>,
    pre: Vec<f32>,
}

struct SampleTrace {
    convs: Vec<ConvTrace>,
    dense: Vec<DenseTrace>,
    logits: Vec<f32>,
}

/// Post-activation feature maps of one conv layer for one sample, with the
/// gradient of that sample's cross-entropy loss w.r.t. the maps.
#[derive(Debug, Clone)]
pub struct ActivationSample {
    /// `[n_filters, h, w]` after ReLU, before pooling.
    pub activation: Vec<f32>,
    pub gradient: Vec<f32>,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) arch: String,
    pub(crate) input: [usize; 3],
    pub(crate) classes: usize,
    pub(crate) convs: Vec<ConvLayer>,
    pub(crate) dense: Vec<DenseLayer>,
}

impl Model {
    /// Assembles a model from layers. Only checks that the parts are
    /// non-empty; use [`crate::surgery::validate_structure`] for full
    /// shape agreement.
    pub fn from_parts(
        arch: impl Into<String>,
        input: [usize; 3],
        classes: usize,
        convs: Vec<ConvLayer>,
        dense: Vec<DenseLayer>,
    ) -> Result<Self> {
        let arch = arch.into();
        if convs.is_empty() {
            return Err(Error::Structural(format!("model `{arch}` has no conv layers")));
        }
        let mut seen = std::collections::HashSet::new();
        for id in convs.iter().map(|c| &c.id).chain(dense.iter().map(|d| &d.id)) {
            if !seen.insert(id.clone()) {
                return Err(Error::Structural(format!("duplicate layer id `{id}`")));
            }
        }
        Ok(Self { arch, input, classes, convs, dense })
    }

    pub fn architecture(&self) -> &str {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn dense_layers(&self) -> &[DenseLayer] {
        &self.dense
    }

    pub fn parameter_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.numel() + c.bias.len()).sum::<usize>()
            + self.dense.iter().map(|d| d.weight.len() + d.bias.len()).sum::<usize>()
    }

    /// Every conv layer in forward order.
    pub fn list_conv_layers(&self) -> Result<Vec<LayerHandle>> {
        if self.convs.is_empty() {
            return Err(Error::Structural("model has no conv layers".into()));
        }
        let last = self.convs.len() - 1;
        Ok(self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| LayerHandle {
                layer_id: c.id.clone(),
                n_filters: c.weight.n_filters(),
                successor_kind: if i < last {
                    SuccessorKind::Conv
                } else if self.dense.is_empty() {
                    SuccessorKind::None
                } else {
                    SuccessorKind::FlattenToDense
                },
                has_bias: true,
            })
            .collect())
    }

    pub fn conv_index(&self, layer_id: &str) -> Result<usize> {
        self.convs
            .iter()
            .position(|c| c.id == layer_id)
            .ok_or_else(|| Error::Lookup(layer_id.to_string()))
    }

    pub fn get_weights(&self, layer_id: &str) -> Result<FilterTensor> {
        Ok(self.convs[self.conv_index(layer_id)?].weight.clone())
    }

    pub fn set_weights(&mut self, layer_id: &str, weights: FilterTensor) -> Result<()> {
        let idx = self.conv_index(layer_id)?;
        let layer = &mut self.convs[idx];
        if weights.shape() != layer.weight.shape() {
            return Err(Error::Dimension {
                expected: layer.weight.shape().to_vec(),
                actual: weights.shape().to_vec(),
            });
        }
        if !weights.is_finite() {
            return Err(Error::Numeric { layer: layer_id.into(), detail: "non-finite weights".into() });
        }
        layer.weight = FilterTensor::new(layer_id, weights.shape(), weights.into_vec())?;
        Ok(())
    }

    pub fn get_bias(&self, layer_id: &str) -> Result<Vec<f32>> {
        Ok(self.convs[self.conv_index(layer_id)?].bias.clone())
    }

    pub fn set_bias(&mut self, layer_id: &str, bias: Vec<f32>) -> Result<()> {
        let idx = self.conv_index(layer_id)?;
        let layer = &mut self.convs[idx];
        if bias.len() != layer.bias.len() {
            return Err(Error::Dimension { expected: vec![layer.bias.len()], actual: vec![bias.len()] });
        }
        layer.bias = bias;
        Ok(())
    }

    fn geometries(&self) -> Vec<(ConvGeom, (usize, usize))> {
        let [mut ch, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            let k = c.kernel();
            let (ho, wo) = conv_output_size(h, w, k, c.padding).unwrap_or((0, 0));
            let g = ConvGeom { in_ch: ch, h, w, kernel: k, pad: c.padding, out_ch: c.weight.n_filters(), ho, wo };
            (h, w) = match c.pool {
                Some(p) => (ho / p.window(), wo / p.window()),
                None => (ho, wo),
            };
            ch = g.out_ch;
            out.push((g, (h, w)));
        }
        out
    }

    /// Spatial size `(h, w)` of each conv layer's output after pooling.
    pub fn feature_sizes(&self) -> Vec<(usize, usize)> {
        self.geometries().into_iter().map(|(_, s)| s).collect()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        if batch.sample_shape != self.input {
            return Err(Error::Dimension { expected: self.input.to_vec(), actual: batch.sample_shape.to_vec() });
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Usage(format!("label {l} out of range for {} classes", self.classes)));
        }
        Ok(())
    }

    fn trace(&self, geoms: &[(ConvGeom, (usize, usize))], sample: &[f32]) -> SampleTrace {
        let mut convs = Vec::with_capacity(self.convs.len());
        let mut x = sample.to_vec();
        for (layer, (g, _)) in self.convs.iter().zip(geoms) {
            let padded = nn::pad_input(g, &x);
            let pre = nn::conv_forward(g, layer.weight.as_slice(), &layer.bias, &padded);
            let post = nn::relu(&pre);
            let (out, argmax) = match layer.pool {
                Some(p) => nn::pool_forward(p, g.out_ch, g.ho, g.wo, &post),
                None => (post.clone(), Vec::new()),
            };
            x = out;
            convs.push(ConvTrace { padded, pre, post, argmax });
        }
        let mut dense = Vec::with_capacity(self.dense.len());
        let last = self.dense.len().saturating_sub(1);
        for (i, layer) in self.dense.iter().enumerate() {
            let pre = nn::dense_forward(&layer.weight, &layer.bias, &x);
            let next = if i < last { nn::relu(&pre) } else { pre.clone() };
            dense.push(DenseTrace { input: std::mem::replace(&mut x, next), pre });
        }
        SampleTrace { convs, dense, logits: x }
    }

    /// Backpropagates `dlogits` through a trace, accumulating into `grads`.
    /// Returns the gradient w.r.t. the post-ReLU maps of conv layer `tap`.
    fn backward(
        &self,
        geoms: &[(ConvGeom, (usize, usize))],
        trace: &SampleTrace,
        dlogits: Vec<f32>,
        grads: &mut Gradients,
        tap: Option<usize>,
    ) -> Option<Vec<f32>> {
        let mut d = dlogits;
        let n_dense = self.dense.len();
        for i in (0..n_dense).rev() {
            let layer = &self.dense[i];
            let t = &trace.dense[i];
            if i + 1 < n_dense {
                d = nn::relu_backward(&t.pre, &d);
            }
            d = nn::dense_backward(
                &layer.weight,
                &t.input,
                &d,
                &mut grads.dense_weight[i],
                &mut grads.dense_bias[i],
                true,
            )
            .expect("input grad requested");
        }
        let mut tapped = None;
        for i in (0..self.convs.len()).rev() {
            let (g, _) = &geoms[i];
            let t = &trace.convs[i];
            let dpost = match self.convs[i].pool {
                Some(p) => nn::pool_backward(p, g.out_ch, g.ho, g.wo, &t.argmax, &d),
                None => d,
            };
            if tap == Some(i) {
                tapped = Some(dpost.clone());
            }
            let dpre = nn::relu_backward(&t.pre, &dpost);
            let need_input = i > 0;
            let dx = nn::conv_backward(
                g,
                self.convs[i].weight.as_slice(),
                &t.padded,
                &dpre,
                grads.conv_weight[i].as_mut_slice(),
                &mut grads.conv_bias[i],
                need_input,
            );
            match dx {
                Some(dx) => d = dx,
                None => break,
            }
        }
        tapped
    }

    /// Logits for every sample in `batch`, row-major `[n, classes]`.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<f32>> {
        if batch.sample_shape != self.input {
            return Err(Error::Dimension { expected: self.input.to_vec(), actual: batch.sample_shape.to_vec() });
        }
        let geoms = self.geometries();
        let logits: Vec<Vec<f32>> =
            (0..batch.len()).into_par_iter().map(|i| self.trace(&geoms, batch.sample(i)).logits).collect();
        Ok(logits.concat())
    }

    /// Mean cross-entropy plus `(λ/2)·Σ‖W‖²`, and its gradient.
    pub fn gradients(&self, batch: &Batch, weight_decay: f32) -> Result<(f32, Gradients)> {
        self.check_batch(batch)?;
        let geoms = self.geometries();
        let chunks: Vec<(f64, Gradients)> = (0..batch.len())
            .collect::<Vec<_>>()
            .par_chunks(CHUNK)
            .map(|idx| {
                let mut grads = Gradients::zeros(self);
                let mut loss = 0.0f64;
                for &i in idx {
                    let trace = self.trace(&geoms, batch.sample(i));
                    let (l, dlogits) = nn::softmax_cross_entropy(&trace.logits, batch.labels[i]);
                    loss += l;
                    self.backward(&geoms, &trace, dlogits, &mut grads, None);
                }
                (loss, grads)
            })
            .collect();
        let mut iter = chunks.into_iter();
        let (mut loss, mut grads) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            grads.add_assign(&g);
        }
        let n = batch.len() as f32;
        grads.scale(1.0 / n);
        let mut loss = loss / f64::from(n);
        if weight_decay != 0.0 {
            let mut sq = 0.0f64;
            for (g, c) in grads.conv_weight.iter_mut().zip(&self.convs) {
                sq += c.weight.frobenius_sq();
                for (gv, &w) in g.as_mut_slice().iter_mut().zip(c.weight.as_slice()) {
                    *gv += weight_decay * w;
                }
            }
            for (g, d) in grads.dense_weight.iter_mut().zip(&self.dense) {
                sq += d.weight.iter().map(|&w| f64::from(w) * f64::from(w)).sum::<f64>();
                for (gv, &w) in g.iter_mut().zip(&d.weight) {
                    *gv += weight_decay * w;
                }
            }
            loss += 0.5 * f64::from(weight_decay) * sq;
        }
        let loss = loss as f32;
        if !loss.is_finite() {
            let layer = self.convs.first().map(|c| c.id.clone()).unwrap_or_default();
            return Err(Error::Numeric { layer, detail: format!("loss is {loss}") });
        }
        self.check_gradients(&grads)?;
        Ok((loss, grads))
    }

    fn check_gradients(&self, grads: &Gradients) -> Result<()> {
        for (c, (w, b)) in self.convs.iter().zip(grads.conv_weight.iter().zip(&grads.conv_bias)) {
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: c.id.clone(), detail: "non-finite gradient".into() });
            }
        }
        for (d, (w, b)) in self.dense.iter().zip(grads.dense_weight.iter().zip(&grads.dense_bias)) {
            if w.iter().chain(b).any(|v| !v.is_finite()) {
                return Err(Error::Numeric { layer: d.id.clone(), detail: "non-finite gradient".into() });
            }
        }
        Ok(())
    }

    /// `P ← P − lr · (grad_P + extra_P)` for every parameter, where `extra`
    /// adds a term to the kernel weights of the named conv layers.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        learning_rate: f32,
        extra: Option<&HashMap<String, FilterTensor>>,
    ) -> Result<()> {
        if let Some(extra) = extra {
            for (id, t) in extra {
                let idx = self.conv_index(id)?;
                self.convs[idx].weight.ensure_same_shape(t)?;
                if !t.is_finite() {
                    return Err(Error::Numeric { layer: id.clone(), detail: "non-finite extra gradient".into() });
                }
            }
        }
        for (i, layer) in self.convs.iter_mut().enumerate() {
            let g = grads.conv_weight[i].as_slice();
            let e = extra.and_then(|m| m.get(&layer.id)).map(|t| t.as_slice());
            let w = layer.weight.as_mut_slice();
            match e {
                Some(e) => {
                    for ((w, &g), &e) in w.iter_mut().zip(g).zip(e) {
                        *w -= learning_rate * (g + e);
                    }
                }
                None => {
                    for (w, &g) in w.iter_mut().zip(g) {
                        *w -= learning_rate * g;
                    }
                }
            }
            for (b, &g) in layer.bias.iter_mut().zip(&grads.conv_bias[i]) {
                *b -= learning_rate * g;
            }
        }
        for (i, layer) in self.dense.iter_mut().enumerate() {
            for (w, &g) in layer.weight.iter_mut().zip(&grads.dense_weight[i]) {
                *w -= learning_rate * g;
            }
            for (b, &g) in layer.bias.iter_mut().zip(&grads.dense_bias[i]) {
                *b -= learning_rate * g;
            }
        }
        Ok(())
    }

    /// One SGD step. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        sgd: Sgd,
        extra_grads: Option<&HashMap<String, FilterTensor>>,
    ) -> Result<f32> {
        let (loss, grads) = self.gradients(batch, sgd.weight_decay)?;
        self.apply_gradients(&grads, sgd.learning_rate, extra_grads)?;
        Ok(loss)
    }

    /// Predicted class per sample (argmax, lowest index on ties).
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits
            .chunks_exact(self.classes_out())
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    fn classes_out(&self) -> usize {
        match self.dense.last() {
            Some(d) => d.out_features,
            None => {
                let (g, (h, w)) = *self.geometries().last().expect("non-empty");
                g.out_ch * h * w
            }
        }
    }

    /// Fraction of correctly classified samples.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Usage(format!("cannot evaluate on empty dataset `{}`", dataset.name())));
        }
        let mut correct = 0usize;
        for batch in dataset.sequential_batches(256) {
            let pred = self.predict(&batch)?;
            correct += pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Post-ReLU maps of conv layer `layer_id` and the per-sample loss
    /// gradient w.r.t. them, for every sample of `batch`.
    pub fn conv_activations(&self, layer_id: &str, batch: &Batch) -> Result<Vec<ActivationSample>> {
        self.check_batch(batch)?;
        let idx = self.conv_index(layer_id)?;
        let geoms = self.geometries();
        let spatial = geoms[idx].0.ho * geoms[idx].0.wo;
        let out: Vec<Result<ActivationSample>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let trace = self.trace(&geoms, batch.sample(i));
                let (_, dlogits) = nn::softmax_cross_entropy(&trace.logits, batch.labels[i]);
                let mut scratch = Gradients::zeros(self);
                let gradient = self.backward(&geoms, &trace, dlogits, &mut scratch, Some(idx)).expect("tapped");
                if gradient.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric { layer: layer_id.into(), detail: "non-finite activation gradient".into() });
                }
                Ok(ActivationSample { activation: trace.convs[idx].post.clone(), gradient, spatial })
            })
            .collect();
        out.into_iter().collect()
    }

    /// Post-ReLU maps only (no backward pass).
    pub fn conv_feature_maps(&self, layer_id: &str, batch: &Batch) -> Result<Vec<Vec<f32>>> {
        self.check_batch(batch)?;
        let idx = self.conv_index(layer_id)?;
        let geoms = self.geometries();
        Ok((0..batch.len())
            .into_par_iter()
            .map(|i| self.trace(&geoms, batch.sample(i)).convs.swap_remove(idx).post)
            .collect())
    }

    /// Spatial size (`h · w`) of conv layer `layer_id`'s pre-pool maps.
    pub fn conv_map_size(&self, layer_id: &str) -> Result<usize> {
        let idx = self.conv_index(layer_id)?;
        let (g, _) = self.geometries()[idx];
        Ok(g.ho * g.wo)
    }
}
