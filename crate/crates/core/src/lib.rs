//! Low-dose digital mammography: acquisition simulation, model-based and
//! learned restoration, and MNSE-based image quality assessment.
//!
//! The crate is organised bottom-up:
//!
//! * [`image`] raw detector images, masks, file I/O and training patches
//! * [`phantom`] synthetic noise-free phantoms and noisy acquisitions
//! * [`dosesim`] reduced-dose simulation from an observed full-dose image
//! * [`mb`] variance stabilisation, Gaussian-domain denoising and blending
//! * [`nn`] a small tensor/autodiff engine and the hierarchical residual network
//! * [`losses`] MSE, MAE, SSIM and perceptual training losses
//! * [`metrics`] ground-truth estimation, MNSE decomposition and SNR maps
//! * [`pipeline`] the end-to-end experiment driver used by the CLI

// Negated float comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dosesim;
pub mod error;
pub mod image;
pub mod losses;
pub mod mb;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
pub use image::{AcqMeta, BreastMask, FloatImage, NoiseParams, PatchPair, RawImage};
