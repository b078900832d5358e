//! Reduced-dose simulation from an observed image, and noise-parameter
//! calibration from flat fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{NoiseParams, RawImage};
use crate::mb::gat_scalar;
use crate::phantom::quantize;
use crate::rng::PixelNormals;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoseDomain {
    /// Inject signal-dependent Gaussian noise in DN, using the observation as
    /// a proxy for the noise-free signal.
    #[default]
    Direct,
    /// Inject signal-independent noise after variance stabilisation.
    Vst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseSimConfig {
    /// Dose fraction relative to the input image, in (0, 1).
    pub gamma: f64,
    pub params: NoiseParams,
    pub domain: DoseDomain,
    pub seed: u64,
}

fn params_close(a: &NoiseParams, b: &NoiseParams) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0);
    close(a.lambda, b.lambda) && close(a.sigma_e2, b.sigma_e2) && close(a.tau, b.tau)
}

/// Variance that must be added to `γ·s` so the result has the statistics of
/// an acquisition at dose `γ`: `γ(1 − γ)λs + (1 − γ²)σ_e²`, floored at zero.
pub fn injected_variance(signal: f64, gamma: f64, p: &NoiseParams) -> f64 {
    (gamma * (1.0 - gamma) * p.lambda * signal + (1.0 - gamma * gamma) * p.sigma_e2).max(0.0)
}

/// Simulate an acquisition at `cfg.gamma` times the dose of `fd`.
///
/// The input may itself be a reduced-dose image, in which case the output
/// dose is `fd.meta.gamma * cfg.gamma`; the noise model is relative to the
/// input's own signal level, so repeated reductions compose.
pub fn simulate_low_dose(fd: &RawImage, cfg: &DoseSimConfig) -> Result<RawImage> {
    let g = cfg.gamma;
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::Precondition(format!("gamma {g} outside (0, 1)")));
    }
    if !params_close(&cfg.params, &fd.meta.noise) {
        return Err(Error::Precondition(
            "dose simulation params differ from the image's noise params".into(),
        ));
    }
    if cfg.domain == DoseDomain::Vst && !(cfg.params.lambda > 0.0) {
        return Err(Error::Precondition("vst mode requires lambda > 0".into()));
    }
    let p = cfg.params;
    let sat = fd.meta.saturation_dn;
    let w = fd.width;
    let mut pixels = vec![0u16; fd.pixels.len()];
    pixels
        .par_chunks_mut(w)
        .zip(fd.pixels.par_chunks(w))
        .enumerate()
        .for_each(|(r, (out, src))| {
            let mut z = vec![0.0; src.len()];
            PixelNormals::new(cfg.seed, 1).fill(r * w, &mut z);
            for ((o, &x), &n) in out.iter_mut().zip(src).zip(&z) {
                let v = match cfg.domain {
                    DoseDomain::Direct => {
                        let s = x as f64 - p.tau;
                        g * s + p.tau + injected_variance(s, g, &p).sqrt() * n
                    }
                    DoseDomain::Vst => vst_reduce(x as f64, g, &p, n),
                };
                *o = quantize(v, sat);
            }
        });
    let mut meta = fd.meta.clone();
    meta.gamma = fd.meta.gamma * g;
    meta.seed = cfg.seed;
    meta.tag = format!("LD{}", (meta.gamma * 100.0).round());
    meta.lineage.push(format!(
        "simulate_low_dose(from={}, gamma={g}, domain={:?}, seed={})",
        fd.meta.tag, cfg.domain, cfg.seed
    ));
    RawImage::new(fd.width, fd.height, pixels, meta)
}

/// Stabilised-domain dose reduction for one pixel.
///
/// `z = GAT(x)` has unit variance; `√γ·(z + n)` with `n ~ N(0, 1/γ − 1)` keeps
/// unit variance while scaling the stabilised mean by the √γ dose law. The
/// mapping back uses the algebraic inverse with a dose-dependent constant
/// `γ(3/8 + σ²/λ²) + (1 − γ)/4` in place of `3/8 + σ²/λ²`, which makes the
/// output mean `γ(x − τ) + τ` to first order. (The exact unbiased inverse maps
/// expected stabilised values, not samples, and would bias the draw.)
fn vst_reduce(x: f64, g: f64, p: &NoiseParams, n: f64) -> f64 {
    let z = gat_scalar(x, p);
    let zl = g.sqrt() * (z + (1.0 / g - 1.0).sqrt() * n);
    let c = 0.375 + p.sigma_e2 / (p.lambda * p.lambda);
    let t = 0.25 * zl * zl - (g * c + 0.25 * (1.0 - g));
    p.lambda * t + p.tau
}

/// Flat-field frames acquired at one exposure level (0 = dark frames).
#[derive(Clone, Debug)]
pub struct FlatSeries {
    pub exposure: f64,
    pub frames: Vec<RawImage>,
}

/// Per-level pixelwise mean and unbiased variance, averaged over the field.
fn level_stats(frames: &[RawImage]) -> (f64, f64) {
    let n = frames.len() as f64;
    let npix = frames[0].pixels.len();
    let (mut msum, mut vsum) = (0.0, 0.0);
    for i in 0..npix {
        let m = frames.iter().map(|f| f.pixels[i] as f64).sum::<f64>() / n;
        let v = frames.iter().map(|f| (f.pixels[i] as f64 - m).powi(2)).sum::<f64>() / (n - 1.0);
        msum += m;
        vsum += v;
    }
    (msum / npix as f64, vsum / npix as f64)
}

/// Fit `v = λ(m − τ) + σ_e²` across exposure levels by weighted least squares.
///
/// τ comes from dark frames (exposure 0) when present, otherwise 0. Each
/// level is weighted by the inverse sampling variance of its variance
/// estimate, `(n − 1) / (2 v²)`.
pub fn estimate_noise_params(flats: &[FlatSeries]) -> Result<NoiseParams> {
    if flats.len() < 3 {
        return Err(Error::Precondition(format!(
            "need at least 3 exposure levels, got {}",
            flats.len()
        )));
    }
    let mut exposures: Vec<f64> = flats.iter().map(|f| f.exposure).collect();
    exposures.sort_by(f64::total_cmp);
    exposures.dedup();
    if exposures.len() != flats.len() {
        return Err(Error::Precondition("exposure levels must be distinct".into()));
    }
    for f in flats {
        if f.frames.len() < 2 {
            return Err(Error::Precondition(format!(
                "exposure {} has {} frames, need at least 2",
                f.exposure,
                f.frames.len()
            )));
        }
        let (w, h) = (f.frames[0].width, f.frames[0].height);
        if f.frames.iter().any(|x| x.width != w || x.height != h) {
            return Err(Error::Precondition("flat frames differ in size".into()));
        }
    }

    let stats: Vec<(f64, f64, f64)> = flats
        .iter()
        .map(|f| {
            let (m, v) = level_stats(&f.frames);
            (m, v, (f.frames.len() - 1) as f64)
        })
        .collect();
    let tau = flats
        .iter()
        .zip(&stats)
        .find(|(f, _)| f.exposure == 0.0)
        .map(|(_, s)| s.0)
        .unwrap_or(0.0);

    if stats.iter().any(|s| !(s.1 > 0.0)) {
        return Err(Error::SingularFit("a level has zero variance".into()));
    }
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(m, v, dof) in &stats {
        let wgt = dof / (2.0 * v * v);
        let x = m - tau;
        sw += wgt;
        sx += wgt * x;
        sy += wgt * v;
        sxx += wgt * x * x;
        sxy += wgt * x * v;
    }
    let det = sw * sxx - sx * sx;
    if !(det.abs() > 1e-12 * sw * sxx.max(1e-300)) {
        return Err(Error::SingularFit("exposure means do not vary".into()));
    }
    let lambda = (sw * sxy - sx * sy) / det;
    let sigma_e2 = (sy - lambda * sx) / sw;
    if !(lambda > 0.0) {
        return Err(Error::SingularFit(format!("fitted lambda {lambda} is not positive")));
    }
    Ok(NoiseParams::new(lambda, sigma_e2.max(0.0), tau))
}
