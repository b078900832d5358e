//! Raw-image container: a JSON sidecar header (`<path>.json`) next to a
//! little-endian payload at `<path>`. Detector images use a u16 payload;
//! float images (restorations, external denoiser arrays) use f32.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AcqMeta, BreastMask, FloatImage, RawImage};
use crate::error::{Error, Result};

const FORMAT: &str = "lowdose-raw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub format: String,
    pub version: u32,
    /// `"u16"` or `"f32"`.
    pub dtype: String,
    pub width: usize,
    pub height: usize,
    #[serde(flatten)]
    pub meta: AcqMeta,
}

pub fn header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_files(path: &Path, header: &RawHeader, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let hp = header_path(path);
    let text = serde_json::to_string_pretty(header).expect("header serializes");
    fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_header(path: &Path, dtype: &str) -> Result<RawHeader> {
    let hp = header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: hp.clone(),
        reason: e.to_string(),
    })?;
    if header.format != FORMAT {
        return Err(Error::MalformedHeader {
            path: hp,
            reason: format!("unknown format `{}`", header.format),
        });
    }
    if header.dtype != dtype {
        return Err(Error::MalformedHeader {
            path: hp,
            reason: format!("expected dtype {dtype}, header says {}", header.dtype),
        });
    }
    Ok(header)
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes)
}

pub fn save_raw(image: &RawImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image.validate()?;
    let header = RawHeader {
        format: FORMAT.into(),
        version: 1,
        dtype: "u16".into(),
        width: image.width,
        height: image.height,
        meta: image.meta.clone(),
    };
    let mut payload = Vec::with_capacity(image.pixels.len() * 2);
    for p in &image.pixels {
        payload.extend_from_slice(&p.to_le_bytes());
    }
    debug_assert_eq!(payload.len(), image.width * image.height * 2);
    write_files(path, &header, &payload)
}

pub fn load_raw(path: impl AsRef<Path>) -> Result<RawImage> {
    let path = path.as_ref();
    let header = read_header(path, "u16")?;
    let n = header.width * header.height;
    let bytes = read_payload(path, n * 2)?;
    let pixels = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    RawImage::new(header.width, header.height, pixels, header.meta)
}

pub fn save_float(image: &FloatImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = RawHeader {
        format: FORMAT.into(),
        version: 1,
        dtype: "f32".into(),
        width: image.width,
        height: image.height,
        meta: image.meta.clone(),
    };
    let mut payload = Vec::with_capacity(image.data.len() * 4);
    for &v in &image.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_files(path, &header, &payload)
}

pub fn load_float(path: impl AsRef<Path>) -> Result<FloatImage> {
    let path = path.as_ref();
    let header = read_header(path, "f32")?;
    let n = header.width * header.height;
    let bytes = read_payload(path, n * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    header.meta.noise.validate()?;
    FloatImage::new(header.width, header.height, data, header.meta)
}

/// Masks are stored as u16 images holding 0/1 with saturation 1.
pub fn save_mask(mask: &BreastMask, meta: &AcqMeta, path: impl AsRef<Path>) -> Result<()> {
    let mut meta = meta.clone();
    meta.saturation_dn = 1;
    meta.gamma = 1.0;
    let pixels = mask.bits.iter().map(|&b| b as u16).collect();
    save_raw(&RawImage::new(mask.width, mask.height, pixels, meta)?, path)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BreastMask> {
    let raw = load_raw(path)?;
    BreastMask::new(raw.width, raw.height, raw.pixels.iter().map(|&p| p != 0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::NoiseParams;
    use proptest::prelude::*;

    fn meta() -> AcqMeta {
        AcqMeta::full_dose(NoiseParams::default(), 9, "FD")
    }

    #[test]
    fn payload_is_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.raw");
        let img = RawImage::new(2, 2, vec![0, 1, 2, 3], meta()).unwrap();
        save_raw(&img, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes, vec![0, 0, 1, 0, 2, 0, 3, 0]);
        assert_eq!(load_raw(&p).unwrap(), img);
    }

    #[test]
    fn full_field_payload_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.raw");
        let img = RawImage::new(4096, 3328, vec![7; 4096 * 3328], meta()).unwrap();
        save_raw(&img, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 27_262_976);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.raw");
        let img = RawImage::new(10, 10, vec![1; 100], meta()).unwrap();
        save_raw(&img, &p).unwrap();
        fs::write(&p, vec![0u8; 100]).unwrap();
        match load_raw(&p) {
            Err(Error::TruncatedPayload { expected, actual, .. }) => {
                assert_eq!(expected, 200);
                assert_eq!(actual, 100);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_gamma_in_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.raw");
        let img = RawImage::new(2, 1, vec![1, 2], meta()).unwrap();
        save_raw(&img, &p).unwrap();
        let hp = header_path(&p);
        let text = fs::read_to_string(&hp).unwrap();
        let text = text.replace("\"gamma\": 1.0", "\"gamma\": 1.5");
        fs::write(&hp, text).unwrap();
        assert!(matches!(load_raw(&p), Err(Error::Invariant(_))));
    }

    #[test]
    fn malformed_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raw");
        fs::write(&p, [0u8; 4]).unwrap();
        fs::write(header_path(&p), "{ not json").unwrap();
        assert!(matches!(load_raw(&p), Err(Error::MalformedHeader { .. })));
    }

    #[test]
    fn float_container_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.raw");
        let img = FloatImage::new(3, 1, vec![1.5, -2.25, 1e4 + 0.1], meta()).unwrap();
        save_float(&img, &p).unwrap();
        let back = load_float(&p).unwrap();
        assert_eq!(back, img.clone().quantize_f32());
        assert!(matches!(load_raw(&p), Err(Error::MalformedHeader { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn raw_round_trip_is_bit_exact(
            w in 1usize..40, h in 1usize..40, seed in any::<u64>(), tag in "[A-Za-z0-9]{0,8}"
        ) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let pixels = (0..w * h).map(|_| rng.random_range(0..=16383u16)).collect();
            let mut m = meta();
            m.seed = seed;
            m.tag = tag;
            m.gamma = 0.5;
            let img = RawImage::new(w, h, pixels, m).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.raw");
            save_raw(&img, &p).unwrap();
            prop_assert_eq!(load_raw(&p).unwrap(), img);
        }
    }
}
