//! Denoisers for signal-independent, unit-variance Gaussian noise.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::load_float;

const BLOCK: usize = 8;
/// Hard-threshold multiple of the noise sigma.
const HARD_THRESHOLD: f64 = 2.7;

/// A plain row-major float plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane size");
        Self { width, height, data }
    }
}

pub trait Denoiser: Send + Sync {
    fn denoise(&self, input: &Plane) -> Result<Plane>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum DenoiserKind {
    PatchDct,
    GaussianBlur,
    /// Read a precomputed result (e.g. from a BM3D run) from a float raw file.
    External {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserSpec {
    pub kind: DenoiserKind,
    /// Noise sigma assumed by the denoiser (1.0 after stabilisation).
    pub strength: f64,
    /// Gaussian-blur support in pixels (sigma = window / 6).
    pub window: usize,
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::PatchDct,
            strength: 1.0,
            window: 8,
        }
    }
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0) {
            return Err(Error::Invariant("denoiser strength must be positive".into()));
        }
        if self.window == 0 {
            return Err(Error::Invariant("denoiser window must be positive".into()));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Denoiser>> {
        self.validate()?;
        Ok(match &self.kind {
            DenoiserKind::PatchDct => Box::new(DctDenoiser {
                strength: self.strength,
            }),
            DenoiserKind::GaussianBlur => Box::new(BlurDenoiser {
                sigma: self.window as f64 / 6.0,
            }),
            DenoiserKind::External { path } => Box::new(ExternalDenoiser { path: path.clone() }),
        })
    }
}

pub fn denoise_stabilized(input: &Plane, spec: &DenoiserSpec) -> Result<Plane> {
    spec.build()?.denoise(input)
}

struct DctDenoiser {
    strength: f64,
}

impl Denoiser for DctDenoiser {
    fn denoise(&self, input: &Plane) -> Result<Plane> {
        dct_hard_threshold(input, self.strength)
    }
}

struct BlurDenoiser {
    sigma: f64,
}

impl Denoiser for BlurDenoiser {
    fn denoise(&self, input: &Plane) -> Result<Plane> {
        Ok(gaussian_blur(input, self.sigma))
    }
}

struct ExternalDenoiser {
    path: PathBuf,
}

impl Denoiser for ExternalDenoiser {
    fn denoise(&self, input: &Plane) -> Result<Plane> {
        let img = load_float(&self.path)?;
        if img.width != input.width || img.height != input.height {
            return Err(Error::Shape(format!(
                "external denoiser output {}x{} does not match input {}x{}",
                img.width, img.height, input.width, input.height
            )));
        }
        Ok(Plane::new(img.width, img.height, img.data))
    }
}

/// Orthonormal DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    let n = BLOCK as f64;
    for (k, row) in m.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (i, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2.0 * n)).cos();
        }
    }
    m
}

type Block = [[f64; BLOCK]; BLOCK];

fn dct2(basis: &Block, x: &Block) -> Block {
    // C · X · Cᵀ
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for k in 0..BLOCK {
        for j in 0..BLOCK {
            tmp[k][j] = (0..BLOCK).map(|i| basis[k][i] * x[i][j]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for k in 0..BLOCK {
        for l in 0..BLOCK {
            out[k][l] = (0..BLOCK).map(|j| tmp[k][j] * basis[l][j]).sum();
        }
    }
    out
}

fn idct2(basis: &Block, c: &Block) -> Block {
    // Cᵀ · X · C
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for l in 0..BLOCK {
            tmp[i][l] = (0..BLOCK).map(|k| basis[k][i] * c[k][l]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i][j] = (0..BLOCK).map(|l| tmp[i][l] * basis[l][j]).sum();
        }
    }
    out
}

/// Sliding 8×8 DCT hard thresholding with uniform overlap-add.
///
/// Every block position is processed; AC coefficients with magnitude below
/// `2.7·sigma` are zeroed and the DC term is always kept.
pub fn dct_hard_threshold(input: &Plane, sigma: f64) -> Result<Plane> {
    let (w, h) = (input.width, input.height);
    if w < BLOCK || h < BLOCK {
        return Err(Error::Precondition(format!(
            "DCT denoiser needs at least {BLOCK}x{BLOCK} pixels"
        )));
    }
    let basis = dct_basis();
    let thr = HARD_THRESHOLD * sigma;
    // One partial accumulator per block row, summed in row order afterwards
    // so the result does not depend on scheduling.
    let partials: Vec<Vec<f64>> = (0..=h - BLOCK)
        .into_par_iter()
        .map(|r| {
            let mut acc = vec![0.0; BLOCK * w];
            let mut blk = [[0.0; BLOCK]; BLOCK];
            for c in 0..=w - BLOCK {
                for (i, row) in blk.iter_mut().enumerate() {
                    row.copy_from_slice(&input.data[(r + i) * w + c..(r + i) * w + c + BLOCK]);
                }
                let mut coef = dct2(&basis, &blk);
                for (k, row) in coef.iter_mut().enumerate() {
                    for (l, v) in row.iter_mut().enumerate() {
                        if (k, l) != (0, 0) && v.abs() < thr {
                            *v = 0.0;
                        }
                    }
                }
                let rec = idct2(&basis, &coef);
                for (i, row) in rec.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        acc[i * w + c + j] += v;
                    }
                }
            }
            acc
        })
        .collect();

    let mut sum = vec![0.0; w * h];
    for (r, acc) in partials.iter().enumerate() {
        for (s, a) in sum[r * w..(r + BLOCK) * w].iter_mut().zip(acc) {
            *s += a;
        }
    }
    let cover = |n: usize, i: usize| (i.min(n - BLOCK) + 1) - i.saturating_sub(BLOCK - 1);
    let data = sum
        .iter()
        .enumerate()
        .map(|(idx, &s)| {
            let (r, c) = (idx / w, idx % w);
            s / (cover(h, r) * cover(w, c)) as f64
        })
        .collect();
    Ok(Plane::new(w, h, data))
}

/// Separable Gaussian blur; the kernel is renormalised where it leaves the image.
pub fn gaussian_blur(input: &Plane, sigma: f64) -> Plane {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (w, h) = (input.width as isize, input.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for c in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (k, &kv) in kernel.iter().enumerate() {
                    let d = k as isize - radius;
                    let (rr, cc) = if horizontal { (r, c + d) } else { (r + d, c) };
                    if rr >= 0 && rr < h && cc >= 0 && cc < w {
                        acc += kv * src[(rr * w + cc) as usize];
                        norm += kv;
                    }
                }
                out[(r * w + c) as usize] = acc / norm;
            }
        }
        out
    };
    let tmp = pass(&input.data, true);
    Plane::new(input.width, input.height, pass(&tmp, false))
}
