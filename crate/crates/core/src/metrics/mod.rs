//! Ground-truth estimation, mean correction, the MNSE decomposition into
//! residual noise and bias, and SNR maps.

mod snr;
mod stats;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::BreastMask;

pub use snr::{snr_map, SnrResult, SNR_DISPLAY_RANGE, SNR_WINDOW};
pub use stats::{bootstrap_means, pmean, psum, quantile_sorted, BootstrapConfig};

/// Pixels whose ground truth is at or below this level are left out of the
/// evaluation set.
pub const GT_FLOOR_DN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub mean: Vec<f64>,
    /// Unbiased pixelwise variance over the `n` ground-truth realisations.
    pub pointvar: Vec<f64>,
    pub n: usize,
}

fn check_images(images: &[&[f64]], mask: &BreastMask, what: &str) -> Result<()> {
    let n = mask.width * mask.height;
    if let Some(bad) = images.iter().position(|im| im.len() != n) {
        return Err(Error::Shape(format!(
            "{what} image {bad} has {} pixels, mask has {n}",
            images[bad].len()
        )));
    }
    Ok(())
}

/// Pixelwise mean and unbiased variance over `images`.
fn moments(images: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = images[0].len();
    let k = images.len() as f64;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let m = images.iter().map(|im| im[i]).sum::<f64>() / k;
            let v = images.iter().map(|im| (im[i] - m).powi(2)).sum::<f64>() / (k - 1.0);
            (m, v)
        })
        .unzip()
}

pub fn estimate_gt(pool: &[&[f64]], mask: &BreastMask) -> Result<GroundTruth> {
    if pool.len() < 2 {
        return Err(Error::Precondition(format!(
            "ground truth needs at least 2 realisations, got {}",
            pool.len()
        )));
    }
    check_images(pool, mask, "ground-truth")?;
    let (mean, pointvar) = moments(pool);
    Ok(GroundTruth {
        width: mask.width,
        height: mask.height,
        mean,
        pointvar,
        n: pool.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
    /// The image was constant on the mask, so only the offset was fitted.
    pub degenerate: bool,
}

/// Least-squares `a·X + b ≈ GT` over the mask, applied to the whole image.
pub fn mean_correct(image: &[f64], gt: &GroundTruth, mask: &BreastMask) -> Result<(Vec<f64>, AffineFit)> {
    check_images(&[image, &gt.mean], mask, "mean-correction")?;
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::Precondition("mean correction over an empty mask".into()));
    }
    let xs: Vec<f64> = idx.iter().map(|&i| image[i]).collect();
    let gs: Vec<f64> = idx.iter().map(|&i| gt.mean[i]).collect();
    let (mx, mg) = (pmean(&xs), pmean(&gs));
    let dx: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let sxx = psum(&dx.iter().map(|d| d * d).collect::<Vec<_>>());
    let sxg = psum(&dx.iter().zip(&gs).map(|(d, g)| d * (g - mg)).collect::<Vec<_>>());
    let fit = if sxx > 0.0 {
        let a = sxg / sxx;
        AffineFit {
            a,
            b: mg - a * mx,
            degenerate: false,
        }
    } else {
        log::warn!("mean correction: image is constant on the mask; fitting offset only");
        AffineFit {
            a: 0.0,
            b: mg,
            degenerate: true,
        }
    };
    Ok((image.iter().map(|x| fit.a * x + fit.b).collect(), fit))
}

/// Output of [`gt_protocol`].
#[derive(Clone, Debug)]
pub struct Calibrated {
    pub gt: GroundTruth,
    /// Every input set, mean-corrected to the final ground truth.
    pub sets: Vec<Vec<Vec<f64>>>,
    pub fits: Vec<Vec<AffineFit>>,
}

/// Estimate the GT, correct the GT pool to it, re-estimate, then correct
/// every image of every other set to the final GT.
pub fn gt_protocol(gt_pool: &[&[f64]], sets: &[Vec<&[f64]>], mask: &BreastMask) -> Result<Calibrated> {
    if gt_pool.len() < 2 {
        return Err(Error::Precondition(format!(
            "ground-truth pool too small: {} images",
            gt_pool.len()
        )));
    }
    let first = estimate_gt(gt_pool, mask)?;
    let corrected: Vec<Vec<f64>> = gt_pool
        .iter()
        .map(|im| mean_correct(im, &first, mask).map(|r| r.0))
        .collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = corrected.iter().map(|v| &v[..]).collect();
    let gt = estimate_gt(&refs, mask)?;
    let mut out = Vec::with_capacity(sets.len());
    let mut fits = Vec::with_capacity(sets.len());
    for set in sets {
        let (imgs, f): (Vec<_>, Vec<_>) = set
            .iter()
            .map(|im| mean_correct(im, &gt, mask))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        out.push(imgs);
        fits.push(f);
    }
    Ok(Calibrated { gt, sets: out, fits })
}

/// MNSE and its decomposition; all values are fractions (not percent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnseReport {
    pub total: f64,
    pub rn: f64,
    pub b2: f64,
    pub phi1: f64,
    pub p: usize,
    pub pixels: usize,
    pub excluded: usize,
    pub ci_total: (f64, f64),
    pub ci_rn: (f64, f64),
    pub ci_b2: (f64, f64),
}

pub fn evaluate_mnse(
    eval_set: &[&[f64]],
    gt: &GroundTruth,
    mask: &BreastMask,
    boot: &BootstrapConfig,
) -> Result<MnseReport> {
    let p = eval_set.len();
    if p < 2 {
        return Err(Error::Precondition(format!("MNSE needs at least 2 images, got {p}")));
    }
    check_images(eval_set, mask, "evaluation")?;
    check_images(&[&gt.mean], mask, "ground-truth")?;
    let all = mask.indices();
    if let Some(&i) = all.iter().find(|&&i| !(gt.mean[i] > 0.0)) {
        return Err(Error::Precondition(format!(
            "ground truth is not positive at pixel {i} inside the mask"
        )));
    }
    let idx: Vec<usize> = all.iter().copied().filter(|&i| gt.mean[i] > GT_FLOOR_DN).collect();
    let excluded = all.len() - idx.len();
    if excluded > 0 {
        log::warn!("MNSE: {excluded} mask pixels with ground truth <= {GT_FLOOR_DN} DN excluded");
    }
    if idx.is_empty() {
        return Err(Error::Precondition("no evaluable pixels in the mask".into()));
    }
    let pf = p as f64;
    let nf = gt.n as f64;
    let terms: Vec<[f64; 4]> = idx
        .par_iter()
        .map(|&i| {
            let g = gt.mean[i];
            let xs = eval_set.iter().map(|im| im[i]);
            let nqe = xs.clone().map(|x| (x - g).powi(2) / g).sum::<f64>() / pf;
            let xbar = xs.clone().sum::<f64>() / pf;
            let v = xs.map(|x| (x - xbar).powi(2)).sum::<f64>() / (pf - 1.0);
            let phi = gt.pointvar[i] / (nf * g);
            let rn = v / g;
            let b2 = (xbar - g).powi(2) / g - phi - rn / pf;
            [nqe - phi, rn, b2, phi]
        })
        .collect();
    let col = |k: usize| terms.iter().map(|t| t[k]).collect::<Vec<f64>>();
    let (t, r, b, f) = (col(0), col(1), col(2), col(3));
    let ci = bootstrap_means(&[&t, &r, &b], boot);
    Ok(MnseReport {
        total: pmean(&t),
        rn: pmean(&r),
        b2: pmean(&b),
        phi1: pmean(&f),
        p,
        pixels: idx.len(),
        excluded,
        ci_total: ci[0],
        ci_rn: ci[1],
        ci_b2: ci[2],
    })
}
