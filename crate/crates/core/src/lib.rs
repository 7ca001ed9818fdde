//! Exemplary explanation-based learning.
//!
//! Train a small convolutional classifier on a confounded image dataset,
//! inspect it with GradCAM, and refine it with a triplet explanation loss
//! anchored on one good and one bad exemplary explanation. Activation
//! precision measures how much of the saliency lands on the relevant region.

pub mod error;
pub mod graph;
mod kernels;
pub mod tensor;

pub use error::{Result, XblError};
pub use graph::{finite_diff_check, max_relative_error, numeric_gradient, Graph, Op, Var};
pub use tensor::{Real, Tensor};
pub mod checkpoint;
pub mod io;
pub mod model;
pub mod data;
pub mod saliency;
pub mod optim;
pub mod losses;
pub mod metrics;
pub mod exemplar;
pub mod config;
pub mod train;
pub mod harness;

pub use config::{LossMode, RunConfig};
pub use data::{DatasetSplit, LabeledImage, Mask, SplitName};
pub use exemplar::ExemplarPolicy;
pub use losses::{ExemplarPair, LossWeights};
pub use model::{Classifier, ModelConfig};
pub use saliency::Heatmap;
