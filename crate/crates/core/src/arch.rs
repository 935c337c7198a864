//! Reference architectures: the LeNet-5 and AlexNet variants plus a small
//! toy CNN used for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvLayer, DenseLayer, Model, Pool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default)]
    pub pool: Option<Pool>,
}

/// Layer-by-layer description of a sequential conv classifier.
///
/// Every conv layer is followed by ReLU and then its optional pooling stage.
/// The last conv output is flattened in `(channel, height, width)` order and
/// fed through the hidden dense layers (ReLU) and a final linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    pub convs: Vec<ConvSpec>,
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl ArchitectureSpec {
    /// LeNet-5 with widened conv layers (20 and 50 filters, 5×5 kernels) for 28×28 MNIST.
    pub fn lenet5() -> Self {
        Self {
            name: "lenet5".into(),
            input: [1, 28, 28],
            classes: 10,
            convs: vec![
                ConvSpec { filters: 20, kernel: 5, padding: 0, pool: Some(Pool::Max(2)) },
                ConvSpec { filters: 50, kernel: 5, padding: 0, pool: Some(Pool::Max(2)) },
            ],
            hidden: vec![500],
        }
    }

    /// AlexNet adapted to 32×32 CIFAR-10 inputs.
    ///
    /// All convolutions have stride 1 with "same" padding; 2×2 max pooling
    /// follows conv1, conv2 and conv5, so the flatten boundary sees
    /// `256 × 4 × 4` features.
    pub fn alexnet() -> Self {
        Self::alexnet_with_filters([64, 192, 384, 256, 256])
    }

    pub fn alexnet_with_filters(filters: [usize; 5]) -> Self {
        let pool = Some(Pool::Max(2));
        Self {
            name: "alexnet".into(),
            input: [3, 32, 32],
            classes: 10,
            convs: vec![
                ConvSpec { filters: filters[0], kernel: 5, padding: 2, pool },
                ConvSpec { filters: filters[1], kernel: 5, padding: 2, pool },
                ConvSpec { filters: filters[2], kernel: 3, padding: 1, pool: None },
                ConvSpec { filters: filters[3], kernel: 3, padding: 1, pool: None },
                ConvSpec { filters: filters[4], kernel: 3, padding: 1, pool },
            ],
            hidden: vec![512, 256],
        }
    }

    /// Two conv layers (8 and 16 filters, 3×3) over a 1×16×16 input, two classes.
    pub fn toy() -> Self {
        Self {
            name: "toy".into(),
            input: [1, 16, 16],
            classes: 2,
            convs: vec![
                ConvSpec { filters: 8, kernel: 3, padding: 1, pool: Some(Pool::Max(2)) },
                ConvSpec { filters: 16, kernel: 3, padding: 1, pool: Some(Pool::Max(2)) },
            ],
            hidden: vec![32],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "lenet5" => Ok(Self::lenet5()),
            "alexnet" => Ok(Self::alexnet()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown architecture `{other}` (expected lenet5, alexnet or toy)"
            ))),
        }
    }

    /// Replaces the conv filter counts, keeping everything else.
    pub fn with_filters(mut self, filters: &[usize]) -> Result<Self> {
        if filters.len() != self.convs.len() {
            return Err(Error::Config(format!(
                "{} expects {} conv filter counts, got {}",
                self.name,
                self.convs.len(),
                filters.len()
            )));
        }
        for (conv, &n) in self.convs.iter_mut().zip(filters) {
            conv.filters = n;
        }
        Ok(self)
    }

    /// Spatial size `(h, w)` after each conv layer's pooling stage.
    pub fn feature_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut sizes = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            let (ho, wo) = conv_output_size(h, w, conv.kernel, conv.padding).ok_or_else(|| {
                Error::Spec(format!("conv{} kernel {} does not fit a {h}×{w} input", i + 1, conv.kernel))
            })?;
            (h, w) = match conv.pool {
                Some(p) => {
                    let s = p.window();
                    if ho / s == 0 || wo / s == 0 {
                        return Err(Error::Spec(format!("conv{} pooling collapses a {ho}×{wo} map", i + 1)));
                    }
                    (ho / s, wo / s)
                }
                None => (ho, wo),
            };
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    fn validate(&self) -> Result<()> {
        if self.convs.is_empty() {
            return Err(Error::Structural(format!("architecture `{}` has no conv layers", self.name)));
        }
        if self.input.contains(&0) || self.classes == 0 {
            return Err(Error::Spec("input shape and class count must be positive".into()));
        }
        if let Some(i) = self.convs.iter().position(|c| c.filters == 0 || c.kernel == 0) {
            return Err(Error::Spec(format!("conv{} has zero filters or kernel size", i + 1)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Spec("hidden dense widths must be positive".into()));
        }
        if let Some(Pool::Max(0) | Pool::Avg(0)) = self.convs.iter().find_map(|c| c.pool) {
            return Err(Error::Spec("pool window must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count (weights plus biases).
    pub fn parameter_count(&self) -> Result<usize> {
        let sizes = self.feature_sizes()?;
        let mut in_ch = self.input[0];
        let mut total = 0;
        for conv in &self.convs {
            total += conv.filters * in_ch * conv.kernel * conv.kernel + conv.filters;
            in_ch = conv.filters;
        }
        let (h, w) = *sizes.last().expect("validated non-empty");
        let mut width = in_ch * h * w;
        for &out in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            total += width * out + out;
            width = out;
        }
        Ok(total)
    }
}

pub(crate) fn conv_output_size(h: usize, w: usize, kernel: usize, padding: usize) -> Option<(usize, usize)> {
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    (hp >= kernel && wp >= kernel).then(|| (hp - kernel + 1, wp - kernel + 1))
}

/// Builds a model with fan-in scaled uniform initialization.
///
/// Weights are drawn from `U(−√(6/fan_in), √(6/fan_in))` and biases from
/// `U(−1/√fan_in, 1/√fan_in)`, consuming one ChaCha8 stream seeded by `seed`
/// in layer order.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let sizes = spec.feature_sizes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_ch = spec.input[0];
    let mut convs = Vec::with_capacity(spec.convs.len());
    for (i, conv) in spec.convs.iter().enumerate() {
        let fan_in = in_ch * conv.kernel * conv.kernel;
        let weight = uniform(&mut rng, conv.filters * fan_in, (6.0 / fan_in as f64).sqrt());
        let bias = uniform(&mut rng, conv.filters, 1.0 / (fan_in as f64).sqrt());
        convs.push(ConvLayer::new(
            format!("conv{}", i + 1),
            [conv.filters, in_ch, conv.kernel, conv.kernel],
            weight,
            bias,
            conv.padding,
            conv.pool,
        )?);
        in_ch = conv.filters;
    }
    let (h, w) = *sizes.last().expect("validated non-empty");
    let mut width = in_ch * h * w;
    let mut dense = Vec::with_capacity(spec.hidden.len() + 1);
    for (i, &out) in spec.hidden.iter().chain(std::iter::once(&spec.classes)).enumerate() {
        let weight = uniform(&mut rng, out * width, (6.0 / width as f64).sqrt());
        let bias = uniform(&mut rng, out, 1.0 / (width as f64).sqrt());
        dense.push(DenseLayer::new(format!("fc{}", i + 1), width, out, weight, bias)?);
        width = out;
    }
    let model = Model::from_parts(spec.name.clone(), spec.input, spec.classes, convs, dense)?;
    let report = crate::surgery::validate_structure(&model);
    if !report.is_empty() {
        return Err(Error::Spec(format!("inconsistent architecture: {report}")));
    }
    Ok(model)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f32> {
    let bound = bound as f32;
    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_filter_counts() {
        let model = build_model(&ArchitectureSpec::lenet5(), 0).unwrap();
        let layers = model.list_conv_layers().unwrap();
        let counts: Vec<_> = layers.iter().map(|l| (l.layer_id.as_str(), l.n_filters)).collect();
        assert_eq!(counts, [("conv1", 20), ("conv2", 50)]);
    }

    #[test]
    fn alexnet_has_five_conv_layers() {
        let model = build_model(&ArchitectureSpec::alexnet(), 0).unwrap();
        let counts: Vec<_> = model.list_conv_layers().unwrap().iter().map(|l| l.n_filters).collect();
        assert_eq!(counts, [64, 192, 384, 256, 256]);
        assert_eq!(ArchitectureSpec::alexnet().feature_sizes().unwrap().last(), Some(&(4, 4)));
    }

    #[test]
    fn literal_394_is_reproducible() {
        let spec = ArchitectureSpec::alexnet().with_filters(&[64, 192, 394, 256, 256]).unwrap();
        let model = build_model(&spec, 1).unwrap();
        assert_eq!(model.list_conv_layers().unwrap()[2].n_filters, 394);
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = build_model(&ArchitectureSpec::toy(), 42).unwrap();
        let b = build_model(&ArchitectureSpec::toy(), 42).unwrap();
        let c = build_model(&ArchitectureSpec::toy(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn toy_parameter_count_matches_shape_arithmetic() {
        // conv1: 8·1·3·3 + 8 = 80; conv2: 16·8·3·3 + 16 = 1168;
        // flatten 16·4·4 = 256; fc1: 256·32 + 32 = 8224; fc2: 32·2 + 2 = 66.
        let expected = 80 + 1168 + 8224 + 66;
        let spec = ArchitectureSpec::toy();
        assert_eq!(spec.parameter_count().unwrap(), expected);
        assert_eq!(build_model(&spec, 0).unwrap().parameter_count(), expected);
    }

    #[test]
    fn kernel_too_large_is_spec_error() {
        let mut spec = ArchitectureSpec::toy();
        spec.convs[1].kernel = 20;
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn no_conv_layers_is_structural_error() {
        let mut spec = ArchitectureSpec::toy();
        spec.convs.clear();
        assert!(matches!(build_model(&spec, 0), Err(Error::Structural(_))));
    }
}
