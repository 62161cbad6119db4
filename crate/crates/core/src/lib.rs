//! Breast-ultrasound lesion segmentation (PMAD-LinkNet) and classification
//! (CSFEC-Net) built on a small reverse-mode autodiff engine.

pub mod checkpoint;
pub mod cls;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod imgproc;
mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod seg;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{tensor_from, Tensor};
