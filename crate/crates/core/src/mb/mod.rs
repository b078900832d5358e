//! Model-based restoration: variance stabilisation, a Gaussian-domain
//! denoiser, the exact unbiased inverse and a weighted blend with the
//! dose-rescaled input.

mod denoise;
mod gat;

pub use denoise::{dct_hard_threshold, denoise_stabilized, gaussian_blur, Denoiser, DenoiserKind, DenoiserSpec, Plane};
pub use gat::{
    exact_unbiased_inverse_scalar, gat_algebraic_inverse, gat_exact_unbiased_inverse, gat_forward, gat_scalar,
    inverse_threshold,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{FloatImage, NoiseParams, RawImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlendWeight {
    Fixed(f64),
    Auto(AutoTag),
}

/// Serialises as the string `"auto"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl BlendWeight {
    pub const AUTO: Self = BlendWeight::Auto(AutoTag::Auto);

    /// Weight given to the denoised image; auto is `1 − √γ`, which matches the
    /// blend variance to the full-dose variance in the quantum-limited regime.
    pub fn resolve(&self, gamma: f64) -> Result<f64> {
        match *self {
            BlendWeight::Fixed(w) if (0.0..=1.0).contains(&w) => Ok(w),
            BlendWeight::Fixed(w) => Err(Error::Invariant(format!("blend weight {w} outside [0, 1]"))),
            BlendWeight::Auto(_) => Ok(1.0 - gamma.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbConfig {
    pub params: NoiseParams,
    pub gamma: f64,
    pub denoiser: DenoiserSpec,
    pub blend_weight: BlendWeight,
}

impl MbConfig {
    pub fn new(params: NoiseParams, gamma: f64) -> Self {
        Self {
            params,
            gamma,
            denoiser: DenoiserSpec::default(),
            blend_weight: BlendWeight::AUTO,
        }
    }
}

/// Noise parameters of an LD image after rescaling to full-dose level.
pub fn rescaled_params(p: &NoiseParams, gamma: f64) -> NoiseParams {
    NoiseParams::new(p.lambda / gamma, p.sigma_e2 / (gamma * gamma), p.tau)
}

/// `(x − τ)/γ + τ` for every pixel.
pub fn dose_rescale(ld: &RawImage) -> Vec<f64> {
    let tau = ld.meta.noise.tau;
    let g = ld.meta.gamma;
    ld.pixels.iter().map(|&p| (p as f64 - tau) / g + tau).collect()
}

pub fn mb_restore(ld: &RawImage, cfg: &MbConfig) -> Result<FloatImage> {
    let denoiser = cfg.denoiser.build()?;
    mb_restore_with(ld, cfg, denoiser.as_ref())
}

/// Full pipeline with a caller-supplied Gaussian-domain denoiser.
pub fn mb_restore_with(ld: &RawImage, cfg: &MbConfig, denoiser: &dyn Denoiser) -> Result<FloatImage> {
    if (cfg.gamma - ld.meta.gamma).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "config gamma {} differs from image gamma {}",
            cfg.gamma, ld.meta.gamma
        )));
    }
    cfg.params.validate()?;
    let omega = cfg.blend_weight.resolve(cfg.gamma)?;
    let scaled = dose_rescale(ld);
    let eff = rescaled_params(&cfg.params, cfg.gamma);

    let restored = if omega == 0.0 {
        scaled
    } else {
        let stab = Plane::new(ld.width, ld.height, gat_forward(&scaled, &eff));
        let den = denoiser.denoise(&stab)?;
        let den_dn = gat_exact_unbiased_inverse(&den.data, &eff);
        den_dn
            .iter()
            .zip(&scaled)
            .map(|(&d, &s)| omega * d + (1.0 - omega) * s)
            .collect()
    };
    let mut meta = ld.meta.clone();
    meta.gamma = 1.0;
    meta.tag = format!("MB({})", ld.meta.tag);
    meta.lineage.push(format!(
        "mb_restore(gamma={}, omega={omega:.6}, denoiser={:?})",
        cfg.gamma, cfg.denoiser.kind
    ));
    FloatImage::new(ld.width, ld.height, restored, meta)
}
