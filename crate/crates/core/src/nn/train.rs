use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::hresnet::{HResNet, Mode};
use super::tape::Tape;
use super::Tensor;
use crate::error::{Error, Result};
use crate::image::PatchPair;
use crate::losses::Loss;
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub halve_every: usize,
    pub epochs: usize,
    pub batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Fraction of patches held out for validation when no explicit
    /// validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            halve_every: 10,
            epochs: 60,
            batch: 256,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.lr0 > 0.0, "lr0 must be positive"),
            (self.epochs > 0 && self.batch > 0, "epochs and batch must be positive"),
            (
                self.halve_every > 0 && self.halve_every <= self.epochs,
                "halve_every must be in 1..=epochs",
            ),
            (
                (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
                "Adam betas must be in [0, 1)",
            ),
            (self.adam_eps > 0.0, "adam_eps must be positive"),
            (
                (0.0..1.0).contains(&self.val_fraction),
                "val_fraction must be in [0, 1)",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("training configuration: {msg}"))),
            None => Ok(()),
        }
    }

    /// Step schedule: halved every `halve_every` epochs (epochs count from 1).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * 0.5f64.powi(((epoch.max(1) - 1) / self.halve_every) as i32)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Validation MSE of the untouched low-dose input.
    pub identity_val_mse: f64,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_mse\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", r.epoch, r.lr, r.train_loss, r.val_mse);
        }
        s
    }
}

/// Deterministic train/validation split by seed.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(derive_seed(seed, 0x5a11)));
    let n_val = if n >= 2 {
        ((n as f64 * fraction).ceil() as usize).min(n - 1)
    } else {
        0
    };
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val)
}

fn batch_tensor(patches: &[&PatchPair], target: bool) -> Result<Tensor<f32>> {
    let s = patches[0].size;
    let items: Vec<&[f32]> = patches
        .iter()
        .map(|p| if target { &p.fd[..] } else { &p.ld[..] })
        .collect();
    Tensor::stack(&items, 1, s, s)
}

/// Mean squared error of the network (eval mode) and of the identity map
/// on a patch set.
pub fn validation_mse(net: &HResNet<f32>, patches: &[&PatchPair], chunk: usize) -> Result<(f64, f64)> {
    if patches.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (mut net_se, mut id_se, mut n) = (0.0, 0.0, 0usize);
    for group in patches.chunks(chunk.max(1)) {
        let x = batch_tensor(group, false)?;
        let y = batch_tensor(group, true)?;
        let out = net.infer(&x)?;
        for ((o, t), l) in out.data().iter().zip(y.data()).zip(x.data()) {
            net_se += (*o as f64 - *t as f64).powi(2);
            id_se += (*l as f64 - *t as f64).powi(2);
        }
        n += y.numel();
    }
    Ok((net_se / n as f64, id_se / n as f64))
}

/// Split `n` shuffled items into batches of `size`; a trailing batch of one
/// joins the previous batch because batch norm needs two samples.
fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + size).min(n);
        out.push((s, e));
        s = e;
    }
    if out.len() > 1 && out.last().is_some_and(|(a, b)| b - a < 2) {
        let (_, e) = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").1 = e;
    }
    out
}

/// Mini-batch training with seeded shuffling. Batches are processed
/// sequentially, so a given seed reproduces the history bit for bit.
pub fn train(
    net: &mut HResNet<f32>,
    patches: &[PatchPair],
    cfg: &TrainConfig,
    loss: &Loss,
    val: Option<&[PatchPair]>,
) -> Result<History> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(Error::Precondition("training needs at least one patch".into()));
    }
    let size = patches[0].size;
    if patches.iter().chain(val.unwrap_or_default()).any(|p| p.size != size) {
        return Err(Error::Precondition("all patches must share one size".into()));
    }
    let (train_idx, val_set): (Vec<usize>, Vec<&PatchPair>) = match val {
        Some(v) => ((0..patches.len()).collect(), v.iter().collect()),
        None => {
            let (t, v) = split_validation(patches.len(), cfg.val_fraction, cfg.seed);
            (t, v.into_iter().map(|i| &patches[i]).collect())
        }
    };
    if train_idx.len() < 2 {
        return Err(Error::Precondition(
            "training needs at least two patches after the validation split".into(),
        ));
    }
    let mut opt = {
        let refs: Vec<&Tensor<f32>> = net.params.iter().map(|p| &p.value).collect();
        Adam::new(cfg.adam(), &refs)
    };
    let mut history = History::default();
    net.set_mode(Mode::Eval);
    history.identity_val_mse = validation_mse(net, &val_set, cfg.batch)?.1;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut seeded(derive_seed(cfg.seed, epoch as u64)));
        net.set_mode(Mode::Train);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (bi, (s, e)) in batches(order.len(), cfg.batch).into_iter().enumerate() {
            let group: Vec<&PatchPair> = order[s..e].iter().map(|&i| &patches[i]).collect();
            let x = batch_tensor(&group, false)?;
            let y = batch_tensor(&group, true)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x, false);
            let (out, pvars) = net.forward_tape(&mut tape, xv, true)?;
            let lv = loss.record(&mut tape, out, &y)?;
            let value = tape.value(lv).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi + 1 });
            }
            let mut grads = tape.backward(lv)?;
            drop(tape);
            let g: Vec<Tensor<f32>> = pvars
                .iter()
                .map(|v| grads.take(*v).expect("parameter gradient"))
                .collect();
            let grefs: Vec<&Tensor<f32>> = g.iter().collect();
            let mut prefs: Vec<&mut Tensor<f32>> = net.params.iter_mut().map(|p| &mut p.value).collect();
            opt.step(&mut prefs, &grefs, lr)?;
            loss_sum += value * group.len() as f64;
            count += group.len();
        }
        net.set_mode(Mode::Eval);
        let (val_mse, _) = validation_mse(net, &val_set, cfg.batch)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / count as f64,
            val_mse,
        };
        log::info!(
            "epoch {epoch}/{}: lr {:.3e} train loss {:.4e} val mse {:.4e}",
            cfg.epochs,
            lr,
            rec.train_loss,
            rec.val_mse
        );
        history.records.push(rec);
    }
    Ok(history)
}
