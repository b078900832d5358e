//! Hierarchical residual network: a noise-field predictor with one global
//! skip, a skip around every pair of residual blocks and a skip inside
//! every block.

use serde::{Deserialize, Serialize};

use super::ops;
use super::tape::{Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{seeded, PixelNormals};
use rand::RngCore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub n_filters: usize,
    pub kernel: usize,
    pub n_res_blocks: usize,
    pub levels: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Variance of the zero-mean Normal weight initialisation.
    pub init_variance: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            n_filters: 64,
            kernel: 3,
            n_res_blocks: 4,
            levels: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            init_variance: 1e-5,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(format!("network spec: {m}")));
        if self.n_filters == 0 {
            return bad("n_filters must be positive");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if self.n_res_blocks == 0 || !self.n_res_blocks.is_multiple_of(2) {
            return bad("n_res_blocks must be a positive even number (blocks are skipped in pairs)");
        }
        if self.levels != 3 {
            return bad("only the three-level skip hierarchy is supported");
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_eps must be positive and bn_momentum in (0, 1]");
        }
        if !(self.init_variance >= 0.0) {
            return bad("init_variance must be non-negative");
        }
        Ok(())
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Number of convolution layers along the deepest path.
    pub fn depth(&self) -> usize {
        2 + 2 * self.n_res_blocks
    }

    /// Trainable parameter count (weights, biases, BN affine).
    pub fn param_count(&self) -> usize {
        let (f, k2) = (self.n_filters, self.kernel * self.kernel);
        let conv0 = f * k2 + f;
        let blocks = self.n_res_blocks * 2 * (f * f * k2 + f);
        let bn = self.n_res_blocks * 2 * 2 * f;
        let last = f * k2 + 1;
        conv0 + blocks + bn + last
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HResNet<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub params: Vec<Param<T>>,
    pub stats: Vec<RunningStats>,
    pub mode: Mode,
}

const PER_BLOCK: usize = 8;

/// Indices of one residual block's tensors in the parameter list.
struct BlockIdx {
    conv1: usize,
    bn1: usize,
    conv2: usize,
    bn2: usize,
}

fn block(b: usize) -> BlockIdx {
    let base = 2 + PER_BLOCK * b;
    BlockIdx {
        conv1: base,
        bn1: base + 2,
        conv2: base + 4,
        bn2: base + 6,
    }
}

/// Build the network with Normal(0, init_variance) conv weights, zero biases
/// and unit/zero BN affine parameters.
pub fn build_hresnet<T: Scalar>(spec: &NetworkSpec, init_seed: u64) -> Result<HResNet<T>> {
    spec.validate()?;
    let (f, k) = (spec.n_filters, spec.kernel);
    let mut rng = seeded(init_seed);
    let mut params = Vec::new();
    let sd = spec.init_variance.sqrt();
    let mut normal = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        let z = PixelNormals::new(rng.next_u64(), 0).take(n);
        Tensor::new(shape.to_vec(), z.into_iter().map(|v| T::of(v * sd)).collect()).expect("shape")
    };
    let mut push = |name: String, value: Tensor<T>| params.push(Param { name, value });
    push("conv0.weight".into(), normal(&[f, 1, k, k]));
    push("conv0.bias".into(), Tensor::zeros(&[f]));
    for b in 0..spec.n_res_blocks {
        for j in 1..=2 {
            push(format!("block{b}.conv{j}.weight"), normal(&[f, f, k, k]));
            push(format!("block{b}.conv{j}.bias"), Tensor::zeros(&[f]));
            push(format!("block{b}.bn{j}.weight"), Tensor::full(&[f], T::one()));
            push(format!("block{b}.bn{j}.bias"), Tensor::zeros(&[f]));
        }
    }
    push("final.weight".into(), normal(&[1, f, k, k]));
    push("final.bias".into(), Tensor::zeros(&[1]));
    let stats = (0..2 * spec.n_res_blocks)
        .map(|_| RunningStats {
            mean: vec![0.0; f],
            var: vec![1.0; f],
        })
        .collect();
    Ok(HResNet {
        spec: spec.clone(),
        params,
        stats,
        mode: Mode::Train,
    })
}

impl<T: Scalar> HResNet<T> {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn final_index(&self) -> usize {
        self.params.len() - 2
    }

    /// Zero the final convolution, making the network the identity map.
    pub fn zero_final(&mut self) {
        let i = self.final_index();
        for p in &mut self.params[i..] {
            p.value.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> HResNet<U> {
        HResNet {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            stats: self.stats.clone(),
            mode: self.mode,
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("network input must have 1 channel, got {c}")));
        }
        Ok(())
    }

    /// Record the forward pass on `tape`. Returns the output and the
    /// parameter leaves in `self.params` order. In train mode the running
    /// statistics are updated from the batch.
    pub fn forward_tape(&mut self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(x))?;
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let pad = self.spec.pad();
        let (eps, mom) = (self.spec.bn_eps, self.spec.bn_momentum);
        let train = self.mode == Mode::Train;
        let stats = &mut self.stats;
        let mut bn = |tape: &mut Tape<T>, h: Var, i: usize, s: usize| -> Result<Var> {
            if train {
                let (y, mean, var, m) = tape.batchnorm_train(h, p[i], p[i + 1], eps)?;
                let st = &mut stats[s];
                let unbias = m as f64 / (m as f64 - 1.0);
                for c in 0..mean.len() {
                    st.mean[c] = (1.0 - mom) * st.mean[c] + mom * mean[c];
                    st.var[c] = (1.0 - mom) * st.var[c] + mom * var[c] * unbias;
                }
                Ok(y)
            } else {
                let st = &stats[s];
                tape.batchnorm_eval(h, p[i], p[i + 1], &st.mean, &st.var, eps)
            }
        };
        let h0 = tape.conv2d(x, p[0], Some(p[1]), 1, pad)?;
        let mut junction = h0;
        let mut h = h0;
        for b in 0..self.spec.n_res_blocks {
            let ix = block(b);
            let a = tape.conv2d(h, p[ix.conv1], Some(p[ix.conv1 + 1]), 1, pad)?;
            let a = bn(tape, a, ix.bn1, 2 * b)?;
            let a = tape.relu(a);
            let a = tape.conv2d(a, p[ix.conv2], Some(p[ix.conv2 + 1]), 1, pad)?;
            let a = bn(tape, a, ix.bn2, 2 * b + 1)?;
            let a = tape.add(a, h)?;
            h = tape.relu(a);
            if b % 2 == 1 {
                let s = tape.add(h, junction)?;
                h = tape.relu(s);
                junction = h;
            }
        }
        let fi = self.final_index();
        let r = tape.conv2d(h, p[fi], Some(p[fi + 1]), 1, pad)?;
        let y = tape.add(r, x)?;
        Ok((y, p))
    }

    /// Tape-free forward pass using the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let pad = self.spec.pad();
        let pv = |i: usize| &self.params[i].value;
        let bn = |h: &Tensor<T>, i: usize, s: usize| -> Result<Tensor<T>> {
            let st = &self.stats[s];
            Ok(ops::batchnorm_apply(h, pv(i), pv(i + 1), &st.mean, &st.var, self.spec.bn_eps, false)?.0)
        };
        let h0 = ops::conv2d_forward(x, pv(0), Some(pv(1)), 1, pad)?;
        let mut junction = h0.clone();
        let mut h = h0;
        for b in 0..self.spec.n_res_blocks {
            let ix = block(b);
            let a = ops::conv2d_forward(&h, pv(ix.conv1), Some(pv(ix.conv1 + 1)), 1, pad)?;
            let a = ops::relu(&bn(&a, ix.bn1, 2 * b)?);
            let a = ops::conv2d_forward(&a, pv(ix.conv2), Some(pv(ix.conv2 + 1)), 1, pad)?;
            let a = bn(&a, ix.bn2, 2 * b + 1)?;
            h = ops::relu(&ops::add(&a, &h)?);
            if b % 2 == 1 {
                h = ops::relu(&ops::add(&h, &junction)?);
                junction = h.clone();
            }
        }
        let fi = self.final_index();
        let r = ops::conv2d_forward(&h, pv(fi), Some(pv(fi + 1)), 1, pad)?;
        ops::add(&r, x)
    }

    /// Restore a full single-channel image tile by tile. Tiles overlap by
    /// the receptive-field radius so the result equals a whole-image pass.
    pub fn infer_image(&self, plane: &[f32], width: usize, height: usize, tile: usize) -> Result<Vec<f32>> {
        if plane.len() != width * height {
            return Err(Error::Shape("infer_image: plane size mismatch".into()));
        }
        let halo = self.spec.depth() * self.spec.pad();
        let tile = tile.max(1);
        let mut out = vec![0.0f32; plane.len()];
        let mut r0 = 0;
        while r0 < height {
            let r1 = (r0 + tile).min(height);
            let mut c0 = 0;
            while c0 < width {
                let c1 = (c0 + tile).min(width);
                let (er0, er1) = (r0.saturating_sub(halo), (r1 + halo).min(height));
                let (ec0, ec1) = (c0.saturating_sub(halo), (c1 + halo).min(width));
                let (th, tw) = (er1 - er0, ec1 - ec0);
                let mut buf = Vec::with_capacity(th * tw);
                for r in er0..er1 {
                    buf.extend(plane[r * width + ec0..r * width + ec1].iter().map(|&v| T::of(v as f64)));
                }
                let y = self.infer(&Tensor::new(vec![1, 1, th, tw], buf)?)?;
                for r in r0..r1 {
                    for c in c0..c1 {
                        out[r * width + c] = y.data()[(r - er0) * tw + (c - ec0)].f() as f32;
                    }
                }
                c0 = c1;
            }
            r0 = r1;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn default_param_count_matches_layer_sum() {
        let spec = NetworkSpec::default();
        let net = build_hresnet::<f32>(&spec, 0).unwrap();
        let expected = (9 * 64 + 64) + 4 * 2 * (64 * 64 * 9 + 64) + 8 * 2 * 64 + (64 * 9 + 1);
        assert_eq!(net.param_count(), expected);
        assert_eq!(spec.param_count(), expected);
    }

    #[test]
    fn zeroed_final_conv_is_identity() {
        let spec = NetworkSpec {
            n_filters: 8,
            ..Default::default()
        };
        let mut net = build_hresnet::<f64>(&spec, 1).unwrap();
        net.zero_final();
        let x = uniform_input(&[2, 1, 9, 7], 2);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let (y, _) = net.forward_tape(&mut tape, xv, false).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
        net.set_mode(Mode::Eval);
        assert_eq!(net.infer(&x).unwrap().data(), x.data());
    }

    #[test]
    fn identity_jacobian_through_global_skip() {
        let spec = NetworkSpec {
            n_filters: 4,
            ..Default::default()
        };
        let mut net = build_hresnet::<f64>(&spec, 3).unwrap();
        net.zero_final();
        let x = uniform_input(&[2, 1, 5, 5], 4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let (y, _) = net.forward_tape(&mut tape, xv, false).unwrap();
        // Select output pixel 7 of sample 1.
        let mut sel = Tensor::zeros(&[2, 1, 5, 5]);
        sel.data_mut()[25 + 7] = 1.0;
        let v = tape.value(y).data()[25 + 7];
        let s = tape.reduce(y, v, sel.clone()).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), sel.data());
    }

    #[test]
    fn eval_mode_deterministic_and_batch_consistent() {
        let spec = NetworkSpec {
            n_filters: 8,
            ..Default::default()
        };
        let mut net = build_hresnet::<f32>(&spec, 5).unwrap();
        net.set_mode(Mode::Eval);
        let one = uniform_input(&[1, 1, 8, 8], 6).cast::<f32>();
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let y = net.infer(&Tensor::new(vec![2, 1, 8, 8], two).unwrap()).unwrap();
        assert_eq!(&y.data()[..64], &y.data()[64..]);
        assert_eq!(net.infer(&one).unwrap().data(), &y.data()[..64]);
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let net = build_hresnet::<f32>(&NetworkSpec::default(), 0).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 2, 4, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn near_identity_at_small_init() {
        let mut net = build_hresnet::<f32>(&NetworkSpec::default(), 7).unwrap();
        net.set_mode(Mode::Eval);
        let x = uniform_input(&[1, 1, 64, 64], 8).cast::<f32>();
        let y = net.infer(&x).unwrap();
        let dev = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(dev < 1e-2, "{dev}");
    }

    #[test]
    fn tiled_inference_matches_whole_image() {
        let spec = NetworkSpec {
            n_filters: 4,
            init_variance: 0.09,
            ..Default::default()
        };
        let mut net = build_hresnet::<f32>(&spec, 9).unwrap();
        net.set_mode(Mode::Eval);
        let x = uniform_input(&[1, 1, 37, 29], 10).cast::<f32>();
        let whole = net.infer(&x).unwrap();
        let tiled = net.infer_image(x.data(), 29, 37, 8).unwrap();
        assert_eq!(whole.data(), &tiled[..]);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let spec = NetworkSpec {
            n_filters: 4,
            ..Default::default()
        };
        let mut net = build_hresnet::<f64>(&spec, 11).unwrap();
        let before = net.stats.clone();
        let mut tape = Tape::new();
        let xv = tape.leaf(uniform_input(&[2, 1, 6, 6], 12), false);
        net.forward_tape(&mut tape, xv, true).unwrap();
        assert_ne!(net.stats, before);
    }

    #[test]
    fn end_to_end_gradient_check() {
        use crate::nn::tape::gradcheck::project;
        let spec = NetworkSpec {
            n_filters: 3,
            n_res_blocks: 2,
            init_variance: 0.25,
            ..Default::default()
        };
        let base = build_hresnet::<f64>(&spec, 13).unwrap();
        let x = uniform_input(&[2, 1, 5, 5], 14);
        let loss = |net: &mut HResNet<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), false);
            let (y, p) = net.forward_tape(&mut t, xv, true).unwrap();
            let s = project(&mut t, y, 15);
            (t.value(s).item(), t.backward(s).unwrap(), p)
        };
        let (_, grads, vars) = loss(&mut base.clone());
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (k, var) in vars.iter().enumerate() {
            let a = grads.get(*var).unwrap().clone();
            for i in (0..a.numel()).step_by(7) {
                let mut plus = base.clone();
                plus.params[k].value.data_mut()[i] += h;
                let mut minus = base.clone();
                minus.params[k].value.data_mut()[i] -= h;
                let num = (loss(&mut plus).0 - loss(&mut minus).0) / (2.0 * h);
                let an = a.data()[i];
                worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }
}
