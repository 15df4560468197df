//! Pathology-aware GAN data-augmentation laboratory.

pub mod autodiff;
pub mod checkpoint;
pub mod conditioning;
pub mod detect;
pub mod error;
pub mod eval;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod phantom;
pub mod progressive;
pub mod tensor;

pub use autodiff::{Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
