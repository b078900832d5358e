use rand::Rng;

use super::{BreastMask, RawImage};
use crate::error::{Error, Result};
use crate::rng;

/// A co-located low-dose / full-dose training patch, normalised to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub ld: Vec<f32>,
    pub fd: Vec<f32>,
    pub size: usize,
    /// Top-left corner (row, col) in the source image.
    pub origin: (usize, usize),
}

/// Network input scaling: offset-corrected dose rescaling `(x - τ)/γ + τ`
/// (identity for full dose) followed by division by the saturation level,
/// clamped to [0, 1].
pub fn normalize_for_net(image: &RawImage) -> Vec<f32> {
    let tau = image.meta.noise.tau;
    let gamma = image.meta.gamma;
    let sat = image.meta.saturation_dn as f64;
    image
        .pixels
        .iter()
        .map(|&p| {
            let x = p as f64;
            let scaled = if gamma < 1.0 { (x - tau) / gamma + tau } else { x };
            (scaled / sat).clamp(0.0, 1.0) as f32
        })
        .collect()
}

/// Draw `count` patch pairs whose centers fall inside `mask`.
///
/// Centers are drawn uniformly (with replacement) from the in-mask pixels
/// that admit a full patch; the draw order depends only on `seed`.
pub fn extract_patches(
    ld: &RawImage,
    fd: &RawImage,
    mask: &BreastMask,
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PatchPair>> {
    if ld.width != fd.width || ld.height != fd.height {
        return Err(Error::Precondition("LD and FD dimensions differ".into()));
    }
    if !mask.matches(ld.width, ld.height) {
        return Err(Error::Precondition("mask dimensions differ from image".into()));
    }
    if size == 0 || size > ld.width.min(ld.height) {
        return Err(Error::Precondition(format!(
            "patch size {size} must be in 1..={}",
            ld.width.min(ld.height)
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = (ld.width, ld.height);
    let half = size / 2;
    let centers: Vec<usize> = mask
        .indices()
        .into_iter()
        .filter(|&i| {
            let (r, c) = (i / w, i % w);
            r >= half && r - half + size <= h && c >= half && c - half + size <= w
        })
        .collect();
    if centers.is_empty() {
        return Err(Error::NoValidCenter);
    }

    let ld_n = normalize_for_net(ld);
    let fd_n = normalize_for_net(fd);
    let mut rng = rng::seeded(seed);
    let crop = |src: &[f32], top: usize, left: usize| {
        let mut out = Vec::with_capacity(size * size);
        for r in top..top + size {
            out.extend_from_slice(&src[r * w + left..r * w + left + size]);
        }
        out
    };
    Ok((0..count)
        .map(|_| {
            let idx = centers[rng.random_range(0..centers.len())];
            let (top, left) = (idx / w - half, idx % w - half);
            PatchPair {
                ld: crop(&ld_n, top, left),
                fd: crop(&fd_n, top, left),
                size,
                origin: (top, left),
            }
        })
        .collect())
}
