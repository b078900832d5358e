use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 1e-4,
            c2: 9e-4,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) || !(self.sigma > 0.0) || !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(Error::Precondition(format!("invalid SSIM parameters {self:?}")));
        }
        Ok(())
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k / 2) as f64;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-region filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..h {
        for c in 0..wo {
            tmp[r * wo + c] = (0..k).map(|j| g[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..k).map(|i| g[i] * tmp[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatter an `(h−k+1) × (w−k+1)` map back.
fn filter_valid_adjoint(y: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * wo];
    for r in 0..ho {
        for i in 0..k {
            for c in 0..wo {
                tmp[(r + i) * wo + c] += g[i] * y[r * wo + c];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..wo {
            let v = tmp[r * wo + c];
            for j in 0..k {
                out[r * w + c + j] += g[j] * v;
            }
        }
    }
    out
}

/// MSSIM of one plane and its gradient with respect to `x`.
fn plane_ssim(x: &[f64], y: &[f64], h: usize, w: usize, p: &SsimParams, g: &[f64]) -> (f64, Vec<f64>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, g);
    let my = filter_valid(y, h, w, g);
    let exx = filter_valid(&sq(x, x), h, w, g);
    let eyy = filter_valid(&sq(y, y), h, w, g);
    let exy = filter_valid(&sq(x, y), h, w, g);
    let nw = mx.len();
    let (mut g1, mut g2, mut g3) = (vec![0.0; nw], vec![0.0; nw], vec![0.0; nw]);
    let mut total = 0.0;
    for i in 0..nw {
        let (ux, uy) = (mx[i], my[i]);
        let vx = exx[i] - ux * ux;
        let vy = eyy[i] - uy * uy;
        let cxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + p.c1;
        let a2 = 2.0 * cxy + p.c2;
        let b1 = ux * ux + uy * uy + p.c1;
        let b2 = vx + vy + p.c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        let ds_dmu = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
        let ds_dvar = -s / b2;
        let ds_dcov = 2.0 * a1 / (b1 * b2);
        // Chain through the raw moments E[x], E[x²], E[xy].
        g1[i] = ds_dmu - 2.0 * ux * ds_dvar - uy * ds_dcov;
        g2[i] = ds_dvar;
        g3[i] = ds_dcov;
    }
    let a1 = filter_valid_adjoint(&g1, h, w, g);
    let a2 = filter_valid_adjoint(&g2, h, w, g);
    let a3 = filter_valid_adjoint(&g3, h, w, g);
    let inv = 1.0 / nw as f64;
    let grad = (0..h * w)
        .map(|i| (a1[i] + 2.0 * x[i] * a2[i] + y[i] * a3[i]) * inv)
        .collect();
    (total * inv, grad)
}

/// Mean SSIM of two single-channel `w × h` images.
pub fn mssim(a: &[f64], b: &[f64], width: usize, height: usize, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if a.len() != width * height || b.len() != a.len() {
        return Err(Error::Shape("mssim: buffer sizes differ from dimensions".into()));
    }
    if width < p.window || height < p.window {
        return Err(Error::Precondition(format!(
            "image {width}x{height} is smaller than the {} pixel SSIM window",
            p.window
        )));
    }
    let g = gaussian_window(p.window, p.sigma);
    Ok(plane_ssim(a, b, height, width, p, &g).0)
}

/// `1 − MSSIM` averaged over the batch, with gradient w.r.t. `xhat`.
pub fn ssim_loss<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>, p: &SsimParams) -> Result<(f64, Tensor<T>)> {
    p.validate()?;
    super::check_shapes(xhat, x)?;
    let (n, c, h, w) = xhat.dims4()?;
    if h < p.window || w < p.window {
        return Err(Error::Precondition(format!(
            "image {w}x{h} is smaller than the {} pixel SSIM window",
            p.window
        )));
    }
    let g = gaussian_window(p.window, p.sigma);
    let planes = n * c;
    let hw = h * w;
    let (a, b) = (xhat.to_f64(), x.to_f64());
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for i in 0..planes {
        let (s, gr) = plane_ssim(&a[i * hw..(i + 1) * hw], &b[i * hw..(i + 1) * hw], h, w, p, &g);
        loss += 1.0 - s;
        grad.extend(gr.into_iter().map(|v| T::of(-v / planes as f64)));
    }
    Ok((loss / planes as f64, Tensor::new(xhat.shape().to_vec(), grad)?))
}
