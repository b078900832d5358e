//! Feature-space loss through a frozen VGG-style convolutional prefix.

use std::path::Path;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::nn::{Scalar, Tape, Tensor, Var};
use crate::rng::{seeded, PixelNormals};

pub const VGG_ARCH: &str = "vgg16-prefix";
pub const VGG_CONVS_PER_BLOCK: [usize; 4] = [2, 2, 3, 3];
pub const VGG_WIDTHS: [usize; 4] = [64, 128, 256, 512];

#[derive(Clone, Debug)]
pub enum ExtractorLayer {
    Conv {
        name: String,
        weight: Tensor<f64>,
        bias: Tensor<f64>,
        relu: bool,
    },
    MaxPool,
}

/// Frozen feature map Φ. Weights are immutable after construction.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub layers: Vec<ExtractorLayer>,
    /// Per-channel standardisation applied after replicating a gray input
    /// to three channels; `None` feeds the input through unchanged.
    pub standardize: Option<([f64; 3], [f64; 3])>,
    pub tap: usize,
    pub pooling_removed: bool,
}

impl FeatureExtractor {
    pub fn from_layers(layers: Vec<ExtractorLayer>, standardize: Option<([f64; 3], [f64; 3])>) -> Self {
        Self {
            layers,
            standardize,
            tap: 0,
            pooling_removed: false,
        }
    }

    /// Record Φ(x) on `tape`. Extractor weights enter as constants.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let mut h = match self.standardize {
            Some((mean, std)) => tape.gray_to_rgb(x, mean, std)?,
            None => x,
        };
        for layer in &self.layers {
            h = match layer {
                ExtractorLayer::Conv { weight, bias, relu, .. } => {
                    let pad = weight.shape()[2] / 2;
                    let w = tape.leaf(weight.cast(), false);
                    let b = tape.leaf(bias.cast(), false);
                    let y = tape.conv2d(h, w, Some(b), 1, pad)?;
                    if *relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                ExtractorLayer::MaxPool => tape.max_pool2(h)?,
            };
        }
        Ok(h)
    }

    /// Φ(x) without gradient tracking.
    pub fn features<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), false);
        let out = self.forward(&mut tape, v)?;
        Ok(tape.value(out).clone())
    }
}

fn feature_mse<T: Scalar>(f: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    super::mse_loss(f, target)
}

/// `mean ‖Φ(x̂) − Φ(x)‖² / (w′h′c′)` with gradient w.r.t. `x̂`; the target
/// branch is detached.
pub fn perceptual_loss<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>, f: &FeatureExtractor) -> Result<(f64, Tensor<T>)> {
    super::check_shapes(xhat, x)?;
    let mut tape = Tape::new();
    let v = tape.leaf(xhat.clone(), true);
    let l = record(&mut tape, v, x, f)?;
    let value = tape.value(l).item().f();
    let mut g = tape.backward(l)?;
    Ok((value, g.take(v).expect("input gradient")))
}

pub(super) fn record<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    f: &FeatureExtractor,
) -> Result<Var> {
    super::check_shapes(tape.value(pred), target)?;
    let phi_t = f.features(target)?;
    let phi = f.forward(tape, pred)?;
    let (v, g) = feature_mse(tape.value(phi), &phi_t)?;
    tape.reduce(phi, v, g)
}

fn vgg_layer_names(convs: [usize; 4]) -> Vec<Vec<String>> {
    let mut idx = 0;
    let mut names = Vec::new();
    for &n in &convs {
        let mut block = Vec::new();
        for _ in 0..n {
            block.push(format!("features.{idx}"));
            idx += 2; // conv, relu
        }
        idx += 1; // pool
        names.push(block);
    }
    names
}

fn widths_from_meta(ck: &Checkpoint) -> Result<[usize; 4]> {
    match ck.meta.get("widths") {
        None => Ok(VGG_WIDTHS),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("extractor widths: {e}"))),
    }
}

fn triple(ck: &Checkpoint, key: &str) -> Result<[f64; 3]> {
    serde_json::from_value(ck.meta.get(key).cloned().unwrap_or_default())
        .map_err(|e| Error::Checkpoint(format!("extractor header field '{key}': {e}")))
}

/// Load the VGG prefix up to block `tap` (1..=4). With `pooling_removed`
/// (only valid for tap 4) the feature maps keep the input resolution.
pub fn load_extractor(path: &Path, tap: usize, pooling_removed: bool) -> Result<FeatureExtractor> {
    if !(1..=4).contains(&tap) {
        return Err(Error::Precondition(format!("extractor tap must be 1..=4, got {tap}")));
    }
    if pooling_removed && tap != 4 {
        return Err(Error::Precondition("pooling removal is only defined for tap 4".into()));
    }
    let ck = load_checkpoint(path)?;
    if ck.arch != VGG_ARCH {
        return Err(Error::Checkpoint(format!(
            "expected {VGG_ARCH} weights, found {}",
            ck.arch
        )));
    }
    let widths = widths_from_meta(&ck)?;
    let (mean, std) = (triple(&ck, "mean")?, triple(&ck, "std")?);
    let names = vgg_layer_names(VGG_CONVS_PER_BLOCK);
    let mut layers = Vec::new();
    let mut cin = 3;
    for (b, block) in names.iter().enumerate().take(tap) {
        if b > 0 && !pooling_removed {
            layers.push(ExtractorLayer::MaxPool);
        }
        for name in block {
            let cout = widths[b];
            let get = |suffix: &str, shape: &[usize]| -> Result<Tensor<f64>> {
                let full = format!("{name}.{suffix}");
                let t = ck
                    .get(&full)
                    .ok_or_else(|| Error::Checkpoint(format!("extractor layer {full} missing")))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "extractor layer {full}: shape {:?}, expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t.cast())
            };
            layers.push(ExtractorLayer::Conv {
                name: name.clone(),
                weight: get("weight", &[cout, cin, 3, 3])?,
                bias: get("bias", &[cout])?,
                relu: true,
            });
            cin = cout;
        }
    }
    Ok(FeatureExtractor {
        layers,
        standardize: Some((mean, std)),
        tap,
        pooling_removed,
    })
}

/// Write a seeded random-weight VGG prefix (He-normal weights, zero bias).
pub fn write_random_vgg(path: &Path, widths: [usize; 4], seed: u64, mean: [f64; 3], std: [f64; 3]) -> Result<()> {
    let mut rng = seeded(seed);
    let mut tensors = Vec::new();
    let mut cin = 3;
    for (b, block) in vgg_layer_names(VGG_CONVS_PER_BLOCK).iter().enumerate() {
        for name in block {
            let cout = widths[b];
            let n = cout * cin * 9;
            let scale = (2.0 / (cin * 9) as f64).sqrt();
            let w: Vec<f64> = PixelNormals::new(rng.next_u64(), 0)
                .take(n)
                .into_iter()
                .map(|v| v * scale)
                .collect();
            tensors.push((format!("{name}.weight"), Tensor::from_f64(&[cout, cin, 3, 3], &w)?));
            tensors.push((format!("{name}.bias"), Tensor::zeros(&[cout])));
            cin = cout;
        }
    }
    save_checkpoint(
        path,
        &Checkpoint {
            arch: VGG_ARCH.into(),
            meta: serde_json::json!({ "widths": widths, "mean": mean, "std": std }),
            tensors,
        },
    )
}
