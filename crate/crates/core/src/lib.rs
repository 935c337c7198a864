//! Single-shot channel pruning of convolutional networks.
//!
//! A network is trained with an ADMM regularizer that pulls each conv layer
//! toward a filter-cardinality set, the lowest-l1 filters are removed
//! structurally, and the remaining sub-network is fine-tuned. Baseline
//! criteria (minimum weight, mean activation, Taylor expansion, random,
//! weight-level ADMM) and an iterative Taylor pipeline are provided for
//! comparison, together with diagnostics that export the training curves.

pub mod admm;
pub mod arch;
pub mod cli;
pub mod criteria;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod surgery;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::FilterTensor;
