use serde::{Deserialize, Serialize};

use super::stats::{bootstrap_means, pmean, BootstrapConfig};
use crate::error::{Error, Result};
use crate::image::BreastMask;

pub const SNR_WINDOW: usize = 15;
/// Display range for exported SNR maps; the map itself is never clipped.
pub const SNR_DISPLAY_RANGE: (f64, f64) = (47.0, 120.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrResult {
    pub width: usize,
    pub height: usize,
    /// Smoothed mean over smoothed standard deviation on the mask, NaN
    /// outside it, +inf where the smoothed deviation is zero.
    pub map: Vec<f64>,
    /// Average over finite in-mask values.
    pub mean_snr: f64,
    pub ci: (f64, f64),
    /// In-mask pixels with zero deviation, left out of the mean.
    pub infinite: usize,
}

/// Mask-aware box mean: each output is the mean of the in-mask values in
/// the `k × k` window, via summed-area tables.
pub fn masked_box_mean(values: &[f64], mask: &BreastMask, k: usize) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let r = k / 2;
    let mut sv = vec![0.0; (w + 1) * (h + 1)];
    let mut sc = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let (mut rv, mut rc) = (0.0, 0.0);
        for x in 0..w {
            if mask.bits[y * w + x] {
                rv += values[y * w + x];
                rc += 1.0;
            }
            sv[(y + 1) * (w + 1) + x + 1] = sv[y * (w + 1) + x + 1] + rv;
            sc[(y + 1) * (w + 1) + x + 1] = sc[y * (w + 1) + x + 1] + rc;
        }
    }
    let rect = |t: &[f64], x0: usize, y0: usize, x1: usize, y1: usize| {
        t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0]
    };
    let mut out = vec![f64::NAN; w * h];
    for y in 0..h {
        for x in 0..w {
            if !mask.bits[y * w + x] {
                continue;
            }
            let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
            let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
            out[y * w + x] = rect(&sv, x0, y0, x1, y1) / rect(&sc, x0, y0, x1, y1);
        }
    }
    out
}

pub fn snr_map(realizations: &[&[f64]], mask: &BreastMask, boot: &BootstrapConfig) -> Result<SnrResult> {
    let p = realizations.len();
    if p < 2 {
        return Err(Error::Precondition(format!(
            "SNR needs at least 2 realisations, got {p}"
        )));
    }
    let n = mask.width * mask.height;
    if realizations.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("SNR: realisation size differs from mask".into()));
    }
    let pf = p as f64;
    let mean: Vec<f64> = (0..n)
        .map(|i| realizations.iter().map(|r| r[i]).sum::<f64>() / pf)
        .collect();
    let sd: Vec<f64> = (0..n)
        .map(|i| (realizations.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / (pf - 1.0)).sqrt())
        .collect();
    let sm = masked_box_mean(&mean, mask, SNR_WINDOW);
    let ss = masked_box_mean(&sd, mask, SNR_WINDOW);
    let mut infinite = 0;
    let map: Vec<f64> = (0..n)
        .map(|i| {
            if !mask.bits[i] {
                f64::NAN
            } else if ss[i] > 0.0 {
                sm[i] / ss[i]
            } else {
                infinite += 1;
                f64::INFINITY
            }
        })
        .collect();
    let finite: Vec<f64> = map.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Precondition("SNR map has no finite values on the mask".into()));
    }
    let ci = bootstrap_means(&[&finite], boot)[0];
    Ok(SnrResult {
        width: mask.width,
        height: mask.height,
        mean_snr: pmean(&finite),
        map,
        ci,
        infinite,
    })
}
