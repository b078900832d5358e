use serde::{Deserialize, Serialize};

use super::{BreastMask, RawImage};
use crate::error::{Error, Result};

/// How tissue relates to the unattenuated (air) background.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Air is bright, tissue darker (raw detector signal).
    #[default]
    Attenuation,
    /// Air is dark, tissue brighter (log-converted / display encoding).
    Emission,
}

fn percentile(values: &[u16], q: f64) -> f64 {
    let mut hist = vec![0usize; u16::MAX as usize + 1];
    for &v in values {
        hist[v as usize] += 1;
    }
    let target = ((values.len() as f64 - 1.0) * q).round() as usize;
    let mut seen = 0usize;
    for (v, &c) in hist.iter().enumerate() {
        seen += c;
        if seen > target {
            return v as f64;
        }
    }
    u16::MAX as f64
}

/// Threshold against the air level, then keep the largest 4-connected region.
///
/// The air level is a robust extreme of the histogram (99.5th percentile for
/// attenuation polarity, 0.5th for emission); tissue is whatever differs from
/// it by more than `threshold_dn` in the tissue direction.
pub fn segment_breast(image: &RawImage, threshold_dn: f64, polarity: Polarity) -> Result<BreastMask> {
    if !(threshold_dn < image.meta.saturation_dn as f64) {
        return Err(Error::Precondition(format!(
            "threshold {threshold_dn} must be below saturation {}",
            image.meta.saturation_dn
        )));
    }
    let bits: Vec<bool> = match polarity {
        Polarity::Attenuation => {
            let air = percentile(&image.pixels, 0.995);
            image.pixels.iter().map(|&p| (p as f64) < air - threshold_dn).collect()
        }
        Polarity::Emission => {
            let air = percentile(&image.pixels, 0.005);
            image.pixels.iter().map(|&p| (p as f64) > air + threshold_dn).collect()
        }
    };
    let raw = BreastMask::new(image.width, image.height, bits)?;
    let mask = largest_component(&raw);
    if mask.count() == 0 {
        return Err(Error::NoBreastRegion);
    }
    Ok(mask)
}

/// Largest 4-connected component of `mask` (first-found wins ties).
pub fn largest_component(mask: &BreastMask) -> BreastMask {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![0u32; w * h];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0usize;
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask.bits[j] && label[j] == 0 {
                    label[j] = next;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    BreastMask {
        width: w,
        height: h,
        bits: label.iter().map(|&l| l != 0 && l == best.0).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{AcqMeta, NoiseParams};

    fn image(w: usize, h: usize, px: Vec<u16>) -> RawImage {
        RawImage::new(w, h, px, AcqMeta::full_dose(NoiseParams::default(), 0, "t")).unwrap()
    }

    #[test]
    fn air_only_image_has_no_breast() {
        let img = image(16, 16, vec![12000; 256]);
        assert!(matches!(
            segment_breast(&img, 500.0, Polarity::Attenuation),
            Err(Error::NoBreastRegion)
        ));
    }

    #[test]
    fn keeps_only_the_larger_blob() {
        let (w, h) = (40, 20);
        let mut px = vec![12000u16; w * h];
        // 10x10 blob and a disjoint 1x10 strip (10x smaller)
        for r in 2..12 {
            for c in 2..12 {
                px[r * w + c] = 3000;
            }
        }
        for c in 20..30 {
            px[15 * w + c] = 3000;
        }
        let mask = segment_breast(&image(w, h, px), 1000.0, Polarity::Attenuation).unwrap();
        assert_eq!(mask.count(), 100);
        assert!(mask.bits[5 * w + 5]);
        assert!(!mask.bits[15 * w + 25]);
    }

    #[test]
    fn emission_polarity_inverts_the_rule() {
        let (w, h) = (10, 10);
        let mut px = vec![100u16; w * h];
        px[..30].fill(4000);
        let mask = segment_breast(&image(w, h, px), 1000.0, Polarity::Emission).unwrap();
        assert_eq!(mask.count(), 30);
    }

    #[test]
    fn threshold_above_saturation_is_rejected() {
        let img = image(2, 2, vec![0; 4]);
        assert!(matches!(
            segment_breast(&img, 20000.0, Polarity::Attenuation),
            Err(Error::Precondition(_))
        ));
    }
}
