//! Training losses. Each returns its value together with the gradient with
//! respect to the prediction; [`Loss::record`] puts them on a tape.

mod perceptual;
mod ssim;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tape, Tensor, Var};

pub use perceptual::{
    load_extractor, perceptual_loss, write_random_vgg, ExtractorLayer, FeatureExtractor, VGG_ARCH, VGG_CONVS_PER_BLOCK,
    VGG_WIDTHS,
};
pub use ssim::{gaussian_window, mssim, ssim_loss, SsimParams};

fn check_shapes<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error and its gradient `2(x̂ − x)/n`.
pub fn mse_loss<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_shapes(xhat, x)?;
    let n = xhat.numel() as f64;
    let mut sum = 0.0;
    let grad = xhat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a.f() - b.f();
            sum += d * d;
            T::of(2.0 * d / n)
        })
        .collect();
    Ok((sum / n, Tensor::new(xhat.shape().to_vec(), grad)?))
}

/// Mean absolute error with subgradient `sign(x̂ − x)/n`, `sign(0) = 0`.
pub fn mae_loss<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_shapes(xhat, x)?;
    let n = xhat.numel() as f64;
    let mut sum = 0.0;
    let grad = xhat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a.f() - b.f();
            sum += d.abs();
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            T::of(s / n)
        })
        .collect();
    Ok((sum / n, Tensor::new(xhat.shape().to_vec(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Mae,
    Ssim,
    Pl1,
    Pl2,
    Pl3,
    Pl4,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Mse,
        LossKind::Mae,
        LossKind::Ssim,
        LossKind::Pl1,
        LossKind::Pl2,
        LossKind::Pl3,
        LossKind::Pl4,
    ];

    /// Extractor tap and pooling flag for perceptual kinds.
    pub fn perceptual_tap(self) -> Option<(usize, bool)> {
        match self {
            LossKind::Pl1 => Some((1, false)),
            LossKind::Pl2 => Some((2, false)),
            LossKind::Pl3 => Some((3, false)),
            LossKind::Pl4 => Some((4, true)),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Ssim => "ssim",
            LossKind::Pl1 => "pl1",
            LossKind::Pl2 => "pl2",
            LossKind::Pl3 => "pl3",
            LossKind::Pl4 => "pl4",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown loss '{s}' (expected mse, mae, ssim, pl1..pl4)")))
    }
}

/// A configured loss, ready for training.
#[derive(Clone, Debug)]
pub enum Loss {
    Mse,
    Mae,
    Ssim(SsimParams),
    Perceptual(Arc<FeatureExtractor>),
}

impl Loss {
    /// Build a loss of `kind`; perceptual kinds need an extractor.
    pub fn new(kind: LossKind, extractor: Option<Arc<FeatureExtractor>>) -> Result<Self> {
        match kind {
            LossKind::Mse => Ok(Loss::Mse),
            LossKind::Mae => Ok(Loss::Mae),
            LossKind::Ssim => Ok(Loss::Ssim(SsimParams::default())),
            _ => extractor
                .map(Loss::Perceptual)
                .ok_or_else(|| Error::Precondition(format!("{kind} loss requires a feature extractor"))),
        }
    }

    /// Value and gradient with respect to `xhat`.
    pub fn eval<T: Scalar>(&self, xhat: &Tensor<T>, x: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match self {
            Loss::Mse => mse_loss(xhat, x),
            Loss::Mae => mae_loss(xhat, x),
            Loss::Ssim(p) => ssim_loss(xhat, x, p),
            Loss::Perceptual(f) => perceptual_loss(xhat, x, f),
        }
    }

    /// Append the loss of `pred` against the fixed `target` to `tape`.
    pub fn record<T: Scalar>(&self, tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
        match self {
            Loss::Perceptual(f) => perceptual::record(tape, pred, target, f),
            _ => {
                let (v, g) = self.eval(tape.value(pred), target)?;
                tape.reduce(pred, v, g)
            }
        }
    }
}
