//! Volumetric segmentation engine: a 3D U-Net backbone with contextual
//! transformer (CoT) blocks, trained with a Dice + cross-entropy objective
//! and evaluated with per-region Dice and HD95.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`tensor`]) that
//! is generic over `f32` (run mode) and `f64` (test/oracle mode).

pub mod cot;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nifti;
pub mod preprocess;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod unet;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Graph, Tensor, Var};
