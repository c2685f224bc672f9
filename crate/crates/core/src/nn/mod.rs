//! Minimal dense-network core: layers with hand-derived gradients, Adam,
//! finite-difference checking and the FPCM model file format.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod matrix;
pub mod network;

pub use adam::{AdamConfig, AdamState, Regularization};
pub use checkpoint::{ModelFile, ModelRole};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport, GradProbe};
pub use matrix::Matrix;
pub use network::{Activation, Architecture, Cache, Fault, Gradients, Mode, Network, ParamTensor};
