//! Synthetic breast phantoms and noisy acquisitions.
//!
//! A phantom is a half-ellipse of tissue against a bright air background:
//! a constant base level plus Gaussian lumps, with clusters of small bright
//! discs standing in for microcalcifications.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{AcqMeta, BreastMask, NoiseParams, RawImage, DEFAULT_SATURATION_DN};
use crate::rng::{self, PixelNormals};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LumpyBackground {
    pub blob_count: usize,
    /// Gaussian sigma range in pixels.
    pub sigma_range: (f64, f64),
    /// Peak amplitude range in DN.
    pub amplitude_range: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCluster {
    /// (row, col) of the cluster center.
    pub center: (f64, f64),
    pub speck_count: usize,
    pub speck_radius: f64,
    pub speck_amplitude: f64,
    /// Specks are scattered uniformly within this radius of the center.
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub background: LumpyBackground,
    pub mc_clusters: Vec<McCluster>,
    /// Semi-axes (along columns, along rows) of the half-ellipse, whose flat
    /// side lies on the left (chest-wall) edge.
    pub breast_shape: (f64, f64),
    pub base_level: f64,
    pub air_level: f64,
    /// Compressed-breast thinning toward the skin line: inside the support
    /// the background rises by `edge_rise·(air − base)·r^edge_exponent`,
    /// with `r` the normalised elliptical radius.
    #[serde(default)]
    pub edge_rise: f64,
    #[serde(default = "default_edge_exponent")]
    pub edge_exponent: f64,
    pub tau: f64,
    pub saturation_dn: u16,
}

fn default_edge_exponent() -> f64 {
    4.0
}

impl PhantomSpec {
    /// 512×512 default used by the tests and the desk-scale experiment.
    pub fn default_with_seed(seed: u64) -> Self {
        Self::sized(512, 512, seed)
    }

    /// Default layout scaled to an arbitrary image size.
    pub fn sized(width: usize, height: usize, seed: u64) -> Self {
        let (wf, hf) = (width as f64, height as f64);
        let scale = (wf * hf).sqrt() / 512.0;
        let cluster = |r: f64, c: f64| McCluster {
            center: (r * hf, c * wf),
            speck_count: 25,
            speck_radius: 3.0,
            speck_amplitude: 1000.0,
            spread: 22.0 * scale,
        };
        Self {
            width,
            height,
            seed,
            background: LumpyBackground {
                blob_count: (30.0 * scale * scale).round() as usize,
                sigma_range: (6.0 * scale, 20.0 * scale),
                amplitude_range: (20.0, 100.0),
            },
            mc_clusters: vec![
                cluster(0.30, 0.22),
                cluster(0.50, 0.40),
                cluster(0.70, 0.25),
                cluster(0.42, 0.62),
                cluster(0.60, 0.55),
                cluster(0.50, 0.15),
            ],
            breast_shape: (0.8 * wf, 0.45 * hf),
            base_level: 4000.0,
            air_level: 12000.0,
            edge_rise: 0.6,
            edge_exponent: 4.0,
            tau: 50.0,
            saturation_dn: DEFAULT_SATURATION_DN,
        }
    }

    fn ceiling(&self) -> f64 {
        0.9 * self.saturation_dn as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Precondition("phantom must be non-empty".into()));
        }
        if !(self.base_level > self.tau && self.base_level <= self.ceiling()) {
            return Err(Error::Precondition(format!(
                "base level {} must lie in (tau, 0.9*saturation]",
                self.base_level
            )));
        }
        if !(self.air_level > self.tau && self.air_level <= self.ceiling()) {
            return Err(Error::Precondition("air level outside (tau, 0.9*saturation]".into()));
        }
        let bg = &self.background;
        if bg.sigma_range.0 <= 0.0 || bg.sigma_range.1 < bg.sigma_range.0 {
            return Err(Error::Precondition("invalid blob sigma range".into()));
        }
        if !(0.0..1.0).contains(&self.edge_rise) || !(self.edge_exponent > 0.0) {
            return Err(Error::Precondition(
                "edge_rise must be in [0, 1) and edge_exponent positive".into(),
            ));
        }
        if bg.amplitude_range.1 < bg.amplitude_range.0 {
            return Err(Error::Precondition("invalid blob amplitude range".into()));
        }
        let (a, b) = self.breast_shape;
        let (wf, hf) = (self.width as f64, self.height as f64);
        if !(a > 0.0 && b > 0.0 && a < wf && b < 0.5 * hf) {
            return Err(Error::Precondition(format!(
                "breast semi-axes {:?} must be positive and leave air inside the {}x{} image \
                 (geometry is in pixels; scale it with the image size)",
                self.breast_shape, self.width, self.height
            )));
        }
        if let Some(c) = self
            .mc_clusters
            .iter()
            .find(|c| !(c.center.0 >= 0.0 && c.center.0 < hf && c.center.1 >= 0.0 && c.center.1 < wf))
        {
            return Err(Error::Precondition(format!(
                "MC cluster center {:?} lies outside the image",
                c.center
            )));
        }
        Ok(())
    }

    /// Mean blob amplitude, the reference unit for "bright" pixels.
    pub fn mean_blob_amplitude(&self) -> f64 {
        0.5 * (self.background.amplitude_range.0 + self.background.amplitude_range.1)
    }
}

/// Noise-free signal Y with its analytic support and speck map.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseFreeImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub support: BreastMask,
    /// Pixels covered by at least one microcalcification speck.
    pub specks: BreastMask,
    pub tau: f64,
    pub saturation_dn: u16,
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<NoiseFreeImage> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = rng::seeded(spec.seed);
    let (a, b) = spec.breast_shape;
    let cy = h as f64 / 2.0;
    let radius2 = |i: usize| {
        let x = (i % w) as f64 + 0.5;
        let y = (i / w) as f64 + 0.5 - cy;
        (x / a).powi(2) + (y / b).powi(2)
    };
    let support: Vec<bool> = (0..w * h).map(|i| radius2(i) <= 1.0).collect();

    let rise = spec.edge_rise * (spec.air_level - spec.base_level);
    let mut values: Vec<f64> = (0..w * h)
        .map(|i| {
            if support[i] {
                spec.base_level + rise * radius2(i).powf(0.5 * spec.edge_exponent)
            } else {
                spec.air_level
            }
        })
        .collect();

    // Lumps: centers drawn inside the half-ellipse bounding box.
    let bg = &spec.background;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..bg.blob_count)
        .map(|_| {
            let r = rng.random_range((cy - b).max(0.0)..(cy + b).min(h as f64));
            let c = rng.random_range(0.0..a.min(w as f64));
            let s = rng.random_range(bg.sigma_range.0..=bg.sigma_range.1);
            let amp = rng.random_range(bg.amplitude_range.0..=bg.amplitude_range.1);
            (r, c, s, amp)
        })
        .collect();
    for &(br, bc, s, amp) in &blobs {
        let reach = (4.0 * s).ceil() as isize;
        let (r0, c0) = (br.floor() as isize, bc.floor() as isize);
        for r in (r0 - reach).max(0)..=(r0 + reach).min(h as isize - 1) {
            for c in (c0 - reach).max(0)..=(c0 + reach).min(w as isize - 1) {
                let i = r as usize * w + c as usize;
                if !support[i] {
                    continue;
                }
                let dr = r as f64 + 0.5 - br;
                let dc = c as f64 + 0.5 - bc;
                values[i] += amp * (-(dr * dr + dc * dc) / (2.0 * s * s)).exp();
            }
        }
    }

    let mut specks = vec![false; w * h];
    for cl in &spec.mc_clusters {
        for _ in 0..cl.speck_count {
            let rad = cl.spread * rng.random::<f64>().sqrt();
            let ang = rng.random::<f64>() * std::f64::consts::TAU;
            let sr = cl.center.0 + rad * ang.sin();
            let sc = cl.center.1 + rad * ang.cos();
            let reach = cl.speck_radius.ceil() as isize + 1;
            let (r0, c0) = (sr.floor() as isize, sc.floor() as isize);
            for r in (r0 - reach).max(0)..=(r0 + reach).min(h as isize - 1) {
                for c in (c0 - reach).max(0)..=(c0 + reach).min(w as isize - 1) {
                    let i = r as usize * w + c as usize;
                    let dr = r as f64 + 0.5 - sr;
                    let dc = c as f64 + 0.5 - sc;
                    if support[i] && !specks[i] && dr * dr + dc * dc <= cl.speck_radius.powi(2) {
                        specks[i] = true;
                        values[i] += cl.speck_amplitude;
                    }
                }
            }
        }
    }

    let ceiling = spec.ceiling();
    if let Some(v) = values.iter().find(|&&v| v > ceiling) {
        return Err(Error::Precondition(format!(
            "phantom value {v:.1} exceeds 0.9*saturation ({ceiling:.1})"
        )));
    }
    Ok(NoiseFreeImage {
        width: w,
        height: h,
        values,
        support: BreastMask::new(w, h, support)?,
        specks: BreastMask::new(w, h, specks)?,
        tau: spec.tau,
        saturation_dn: spec.saturation_dn,
    })
}

impl NoiseFreeImage {
    /// A flat field `tau + level` with full support (calibration frames, tests).
    pub fn constant(width: usize, height: usize, level: f64, tau: f64) -> Self {
        Self {
            width,
            height,
            values: vec![tau + level; width * height],
            support: BreastMask::full(width, height),
            specks: BreastMask::new(width, height, vec![false; width * height]).unwrap(),
            tau,
            saturation_dn: DEFAULT_SATURATION_DN,
        }
    }
}

/// Optional 3×3 correlation applied to the unit noise field before scaling.
/// The kernel is renormalised to unit energy so per-pixel variance is kept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkKernel(pub [[f64; 3]; 3]);

impl CrosstalkKernel {
    pub const IDENTITY: Self = Self([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

impl Default for CrosstalkKernel {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Quantise a DN value: clamp to [0, saturation] and round half up.
#[inline]
pub fn quantize(v: f64, saturation: u16) -> u16 {
    (v.clamp(0.0, saturation as f64) + 0.5).floor() as u16
}

/// One noisy realization at dose fraction `gamma`:
/// `γ(Y − τ) + τ + η`, `η ~ N(0, γλ(Y − τ) + σ_e²)`.
pub fn acquire(y: &NoiseFreeImage, params: &NoiseParams, gamma: f64, seed: u64) -> Result<RawImage> {
    acquire_with_crosstalk(y, params, gamma, seed, &CrosstalkKernel::IDENTITY)
}

pub fn acquire_with_crosstalk(
    y: &NoiseFreeImage,
    params: &NoiseParams,
    gamma: f64,
    seed: u64,
    kernel: &CrosstalkKernel,
) -> Result<RawImage> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Precondition(format!("gamma {gamma} outside (0, 1]")));
    }
    params.validate()?;
    let (w, h) = (y.width, y.height);
    let sat = y.saturation_dn;
    let tau = params.tau;
    let noise = unit_noise(w, h, seed, kernel);
    let pixels: Vec<u16> = y
        .values
        .par_iter()
        .zip(noise.par_iter())
        .map(|(&yv, &z)| {
            let signal = yv - tau;
            let mean = gamma * signal + tau;
            let sd = params.variance(yv, gamma).sqrt();
            quantize(mean + sd * z, sat)
        })
        .collect();
    let meta = AcqMeta {
        noise: *params,
        gamma,
        saturation_dn: sat,
        seed,
        tag: if gamma < 1.0 {
            format!("LD{}", (gamma * 100.0).round())
        } else {
            "FD".into()
        },
        lineage: vec![format!("acquire(gamma={gamma}, seed={seed})")],
    };
    RawImage::new(w, h, pixels, meta)
}

fn unit_noise(w: usize, h: usize, seed: u64, kernel: &CrosstalkKernel) -> Vec<f64> {
    let mut field = vec![0.0; w * h];
    field.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        PixelNormals::new(seed, 0).fill(r * w, row);
    });
    if kernel.is_identity() {
        return field;
    }
    let k = kernel.0;
    let energy: f64 = k.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (dr, krow) in k.iter().enumerate() {
                for (dc, &kv) in krow.iter().enumerate() {
                    let rr = (r + dr) as isize - 1;
                    let cc = (c + dc) as isize - 1;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        acc += kv * field[rr as usize * w + cc as usize];
                    }
                }
            }
            out[r * w + c] = acc / energy;
        }
    }
    out
}
