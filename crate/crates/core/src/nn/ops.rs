//! Forward and backward kernels shared by the tape and the inference path.

use super::scalar::{gemm, Strides};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements; larger images are processed in
/// bands of output rows.
const COLS_LIMIT: usize = 1 << 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = x.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, weights expect {wcin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            hout: (h + 2 * pad - kh) / stride + 1,
            wout: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Output columns `lo..hi` whose input column for kernel offset `kj`
    /// lies inside the image.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.wout)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn band_rows(&self) -> usize {
        (COLS_LIMIT / (self.k() * self.wout).max(1)).clamp(1, self.hout)
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], r0: usize, r1: usize, cols: &mut Vec<T>) {
    let ncols = (r1 - r0) * g.wout;
    cols.clear();
    cols.resize(g.k() * ncols, T::zero());
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for (ro, r) in (r0..r1).enumerate() {
                    let ir = (r * g.stride + ki) as isize - g.pad as isize;
                    if ir < 0 || ir >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ir as usize * g.w..(ir as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kj);
                    let out = &mut dst[ro * g.wout + lo..ro * g.wout + hi];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (o, v) in out.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], r0: usize, r1: usize, dx: &mut [T]) {
    let ncols = (r1 - r0) * g.wout;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for (ro, r) in (r0..r1).enumerate() {
                    let ir = (r * g.stride + ki) as isize - g.pad as isize;
                    if ir < 0 || ir >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ir as usize * g.w..(ir as usize + 1) * g.w];
                    let (lo, hi) = g.valid_cols(kj);
                    let from = &src[ro * g.wout + lo..ro * g.wout + hi];
                    let first = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + from.len()].iter_mut().zip(from) {
                            *d = *d + *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(from) {
                            *d = *d + *v;
                        }
                    }
                }
            }
        }
    }
}

/// Pixel-major im2col: row `p` holds the `cin·kh·kw` receptive field of
/// output pixel `p` of the band.
fn im2col_t<T: Scalar>(g: &ConvGeom, x: &[T], r0: usize, r1: usize, out: &mut Vec<T>) {
    let k = g.k();
    out.clear();
    out.resize((r1 - r0) * g.wout * k, T::zero());
    for (ro, r) in (r0..r1).enumerate() {
        for oc in 0..g.wout {
            let dst = &mut out[(ro * g.wout + oc) * k..(ro * g.wout + oc + 1) * k];
            // Kernel columns kj_lo..kj_hi read input columns start.. contiguously.
            let left = oc * g.stride;
            let kj_lo = g.pad.saturating_sub(left);
            let kj_hi = (g.w + g.pad).saturating_sub(left).min(g.kw);
            if kj_lo >= kj_hi {
                continue;
            }
            let start = left + kj_lo - g.pad;
            let len = kj_hi - kj_lo;
            for c in 0..g.cin {
                let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let ir = (r * g.stride + ki) as isize - g.pad as isize;
                    if ir < 0 || ir >= g.h as isize {
                        continue;
                    }
                    let src = &plane[ir as usize * g.w + start..ir as usize * g.w + start + len];
                    let base = (c * g.kh + ki) * g.kw + kj_lo;
                    dst[base..base + len].copy_from_slice(src);
                }
            }
        }
    }
}

/// 2-D cross-correlation, weights `(cout, cin, kh, kw)`, zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.cout {
            return Err(Error::Shape("conv2d: bias length differs from output channels".into()));
        }
    }
    let hw = g.hout * g.wout;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.hout, g.wout]);
    let mut cols = Vec::new();
    let band = g.band_rows();
    let in_sz = g.cin * g.h * g.w;
    for n in 0..g.n {
        let xn = &x.data()[n * in_sz..(n + 1) * in_sz];
        let on = &mut out.data_mut()[n * g.cout * hw..(n + 1) * g.cout * hw];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(hw).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + band).min(g.hout);
            im2col(&g, xn, r0, r1, &mut cols);
            let ncols = (r1 - r0) * g.wout;
            gemm(
                g.cout,
                g.k(),
                ncols,
                weight.data(),
                Strides(g.k(), 1),
                &cols,
                Strides(ncols, 1),
                T::one(),
                &mut on[r0 * g.wout..],
                Strides(hw, 1),
            );
            r0 = r1;
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x, weight, stride, pad)?;
    if grad_out.shape() != [g.n, g.cout, g.hout, g.wout] {
        return Err(Error::Shape("conv2d backward: grad_out shape".into()));
    }
    let hw = g.hout * g.wout;
    let k = g.k();
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0f64; g.cout];
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dcols = Vec::new();
    let mut cols_t = Vec::new();
    let band = g.band_rows();
    let in_sz = g.cin * g.h * g.w;
    for n in 0..g.n {
        let xn = &x.data()[n * in_sz..(n + 1) * in_sz];
        let gn = &grad_out.data()[n * g.cout * hw..(n + 1) * g.cout * hw];
        for (co, chunk) in gn.chunks(hw).enumerate() {
            db[co] += chunk.iter().map(|v| v.f()).sum::<f64>();
        }
        let mut r0 = 0;
        while r0 < g.hout {
            let r1 = (r0 + band).min(g.hout);
            let ncols = (r1 - r0) * g.wout;
            // The GEMM packs a pixel-major operand far faster than a strided one.
            im2col_t(&g, xn, r0, r1, &mut cols_t);
            let gband = &gn[r0 * g.wout..];
            // dW += dY · colsᵀ
            gemm(
                g.cout,
                ncols,
                k,
                gband,
                Strides(hw, 1),
                &cols_t,
                Strides(k, 1),
                T::one(),
                dw.data_mut(),
                Strides(k, 1),
            );
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(k * ncols, T::zero());
                // dcols = Wᵀ · dY
                gemm(
                    k,
                    g.cout,
                    ncols,
                    weight.data(),
                    Strides(1, k),
                    gband,
                    Strides(hw, 1),
                    T::zero(),
                    &mut dcols,
                    Strides(ncols, 1),
                );
                col2im_add(&g, &dcols, r0, r1, &mut dx.data_mut()[n * in_sz..(n + 1) * in_sz]);
            }
            r0 = r1;
        }
    }
    Ok(ConvGrads {
        dx,
        dw,
        db: Tensor::new(vec![g.cout], db.into_iter().map(T::of).collect())?,
    })
}

/// Saved quantities for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

/// Per-channel batch statistics: (mean, biased variance, count).
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let m = n * hw;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += x.data()[base..base + hw].iter().map(|v| v.f()).sum::<f64>();
        }
        let mu = s / m as f64;
        let mut ss = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            ss += x.data()[base..base + hw]
                .iter()
                .map(|v| (v.f() - mu).powi(2))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / m as f64;
    }
    Ok((mean, var, m))
}

/// Normalise with the given per-channel mean/variance, then apply γ, β.
pub fn batchnorm_apply<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    train: bool,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::Shape(
            "batchnorm: affine parameters do not match channels".into(),
        ));
    }
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, bt) = (gamma.data()[ch].f(), beta.data()[ch].f());
            for i in base..base + hw {
                let xh = (x.data()[i].f() - mean[ch]) * inv_std[ch];
                xhat[i] = T::of(xh);
                y[i] = T::of(g * xh + bt);
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), y)?, BnCache { xhat, inv_std, train }))
}

/// Returns (dx, dγ, dβ). In train mode the batch statistics depend on x.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let gy = grad_out.data()[i].f();
                dgamma[ch] += gy * cache.xhat[i].f();
                dbeta[ch] += gy;
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.numel()];
    for ch in 0..c {
        let g = gamma.data()[ch].f();
        let is = cache.inv_std[ch];
        // dx = (inv_std / m) · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = γ·dy
        let (a, bx, c0) = if cache.train {
            (g * is, -is / m * g * dgamma[ch], -is / m * g * dbeta[ch])
        } else {
            (g * is, 0.0, 0.0)
        };
        for b in 0..n {
            let base = (b * c + ch) * hw;
            let gy = &grad_out.data()[base..base + hw];
            let xh = &cache.xhat[base..base + hw];
            for ((d, &gv), &xv) in dx[base..base + hw].iter_mut().zip(gy).zip(xh) {
                *d = T::of(a * gv.f() + bx * xv.f() + c0);
            }
        }
    }
    let to = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::of).collect());
    Ok((Tensor::new(grad_out.shape().to_vec(), dx)?, to(dgamma)?, to(dbeta)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
/// Returns the output and, per output element, the flat input index chosen.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::Shape("max_pool2: input smaller than 2x2".into()));
    }
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for r in 0..ho {
            for col in 0..wo {
                let mut best = base + 2 * r * w + 2 * col;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * r + dr) * w + 2 * col + dc;
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn max_pool2_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        dx.data_mut()[i] = dx.data_mut()[i] + g;
    }
    dx
}
