//! Operational neural networks (ONNs) and synaptic-plasticity monitoring.
//!
//! An ONN neuron replaces the multiply/sum/tanh of a convolutional neuron by
//! a configurable operator set. [`spm`] ranks operator sets by the health
//! factor they show during a prior training run and builds elite networks
//! from the best ones.

pub mod backprop;
pub mod cli;
pub mod error;
pub mod feature_map;
pub mod io;
pub mod network;
pub mod operators;
pub mod rng;
pub mod spm;
pub mod tasks;

pub use error::{OnnError, Result};
pub use feature_map::FeatureMap;
pub use network::{Architecture, Kernel, LayerSpec, OnnModel, Resample};
pub use operators::{Activation, Nodal, OperatorConstants, OperatorSet, OperatorSubLibrary, Pool};
