//! Two-stage low-light image enhancement.
//!
//! Stage 1 ([`agcm`]) predicts a per-pixel gamma map bounded to `[0.5, 2]`
//! and applies it as a power law; stage 2 ([`unet`]) refines the corrected
//! image with an attention U-Net. Everything is generic over the
//! [`gated_tensor::Ops`] executor, so the same code runs eagerly for
//! inference and on a recording graph for training.

pub mod agcm;
pub mod cbam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;

pub mod nn;
pub mod synthetic;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use image::{BatchTensor, ImageTensor};
pub use model::{GatedNet, GatedOutput, Model, ModelConfig};
