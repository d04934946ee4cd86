//! Federated learning simulator for studying gradient leakage.
//!
//! The crate provides a small reverse-mode autodiff engine with support for
//! differentiating through a gradient, sigmoid/tanh MLP models, MNIST /
//! CIFAR-10 / synthetic data loading, a FedSGD simulation with pluggable
//! client-side defenses (error-minimizing data perturbation and local
//! gradient noising), a gradient-matching inversion attack, reconstruction
//! quality metrics and an experiment harness that ties them together.

pub mod attack;
pub mod autodiff;
pub mod blob;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod ldp;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use attack::{AttackConfig, LabelMode, ReconstructionResult};
pub use autodiff::{Graph, NodeId};
pub use data::{ClientShard, Dataset, NormalizationTransform};
pub use error::{Error, Result};
pub use federation::{FederationConfig, RoundRecord};
pub use ldp::{Mechanism, NoiseSpec};
pub use metrics::MetricReport;
pub use model::{Activation, GradientVector, ModelSpec, ParameterSet};
pub use perturb::{PerturbationConfig, PerturbationState};
pub use tensor::Tensor;
