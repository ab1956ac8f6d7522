//! Quantum-inspired variational convolution (QiVC) networks for
//! phonocardiogram classification.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod pcg;
pub mod qire;
pub mod qivconv;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
