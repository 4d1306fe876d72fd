//! Multi-task dual-pixel (DP) defocus deblurring, end to end on the CPU.
//!
//! The crate simulates DP image formation (thin-lens circle of confusion,
//! mirrored half-disc PSF pairs), procedurally generates training data,
//! trains a single-encoder / three-decoder network with DP-aware losses on
//! a small built-in reverse-mode autodiff engine, evaluates with
//! PSNR/SSIM/MAE, and synthesizes eight-view motion sequences from a single
//! image.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon under the
//! default `parallel` feature and falls back to sequential execution
//! without it; both paths are bit-identical.

pub mod error;
pub mod img;
pub mod par;
pub mod reference;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
