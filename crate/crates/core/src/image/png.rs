use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};

/// Write an 8-bit PNG using a linear window `[level - width/2, level + width/2]`.
pub fn export_png(
    values: &[f64],
    width: usize,
    height: usize,
    level: f64,
    window: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::Shape("PNG export size mismatch".into()));
    }
    let lo = level - window / 2.0;
    let buf: Vec<u8> = values
        .iter()
        .map(|&v| {
            if !v.is_finite() {
                return if v > 0.0 { 255 } else { 0 };
            }
            (((v - lo) / window).clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    let img = GrayImage::from_raw(width as u32, height as u32, buf).ok_or_else(|| Error::Shape("PNG buffer".into()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
}
