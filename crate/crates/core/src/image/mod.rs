//! Raw detector images and the data types shared across the crate.

mod io;
mod mask;
mod patches;
mod png;

pub use io::{load_float, load_mask, load_raw, save_float, save_mask, save_raw, RawHeader};
pub use mask::{largest_component, segment_breast, Polarity};
pub use patches::{extract_patches, normalize_for_net, PatchPair};
pub use png::export_png;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default raw depth of a 14-bit detector.
pub const DEFAULT_SATURATION_DN: u16 = 16383;

/// Signal-dependent Gaussian noise model: variance = λ·(Y − τ) + σ_e².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Quantum noise gain, DN per photon-equivalent.
    pub lambda: f64,
    /// Electronic noise variance, DN².
    pub sigma_e2: f64,
    /// Detector offset, DN.
    pub tau: f64,
}

impl NoiseParams {
    pub fn new(lambda: f64, sigma_e2: f64, tau: f64) -> Self {
        Self { lambda, sigma_e2, tau }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !(self.sigma_e2 >= 0.0) || !(self.tau >= 0.0) {
            return Err(Error::Invariant(format!(
                "noise params need lambda > 0, sigma_e2 >= 0, tau >= 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }

    /// Pixel variance at noise-free level `y` and dose fraction `gamma`.
    pub fn variance(&self, y: f64, gamma: f64) -> f64 {
        (gamma * self.lambda * (y - self.tau) + self.sigma_e2).max(0.0)
    }
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::new(5.0, 4.0, 50.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcqMeta {
    pub noise: NoiseParams,
    /// Dose fraction relative to the standard full dose, in (0, 1].
    pub gamma: f64,
    pub saturation_dn: u16,
    pub seed: u64,
    pub tag: String,
    /// Ordered provenance notes (source files, operations applied).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lineage: Vec<String>,
}

impl AcqMeta {
    pub fn full_dose(noise: NoiseParams, seed: u64, tag: impl Into<String>) -> Self {
        Self {
            noise,
            gamma: 1.0,
            saturation_dn: DEFAULT_SATURATION_DN,
            seed,
            tag: tag.into(),
            lineage: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Invariant(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        self.noise.validate()
    }
}

/// A 2-D unsigned 16-bit detector image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub meta: AcqMeta,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u16>, meta: AcqMeta) -> Result<Self> {
        let img = Self {
            width,
            height,
            pixels,
            meta,
        };
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.width * self.height {
            return Err(Error::Invariant(format!(
                "pixel count {} != {}x{}",
                self.pixels.len(),
                self.width,
                self.height
            )));
        }
        self.meta.validate()?;
        let sat = self.meta.saturation_dn;
        if let Some(p) = self.pixels.iter().find(|&&p| p > sat) {
            return Err(Error::Invariant(format!("pixel value {p} exceeds saturation {sat}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_float(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            data: self.pixels.iter().map(|&p| p as f64).collect(),
            meta: self.meta.clone(),
        }
    }
}

/// Floating-point image in DN (restorations, noise-free references, GT).
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub meta: AcqMeta,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>, meta: AcqMeta) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Invariant(format!(
                "float image has {} values, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            meta,
        })
    }

    /// Round to the storage precision of the float file format.
    pub fn quantize_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Pixels that belong to the breast (true) versus background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BreastMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BreastMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Invariant("mask size does not match dimensions".into()));
        }
        Ok(Self { width, height, bits })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn matches(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// Fraction of pixels on which two masks agree.
    pub fn agreement(&self, other: &BreastMask) -> f64 {
        let same = self.bits.iter().zip(&other.bits).filter(|(a, b)| a == b).count();
        same as f64 / self.bits.len().max(1) as f64
    }
}
