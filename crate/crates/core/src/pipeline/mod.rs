//! End-to-end experiment driver: phantoms → acquisitions → training data →
//! networks → restorations → evaluation → report.
//!
//! Every stage reads its inputs from the output directory and records a
//! hash of its config subsection and upstream hashes under `stages/`, so a
//! rerun with the same config skips completed work.

mod config;
mod report;
mod store;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::dosesim::{simulate_low_dose, DoseSimConfig};
use crate::error::{Error, Result};
use crate::image::{
    extract_patches, load_float, load_mask, load_raw, normalize_for_net, save_float, save_mask, save_raw, AcqMeta,
    BreastMask, FloatImage, PatchPair, RawImage,
};
use crate::losses::{load_extractor, write_random_vgg, Loss, LossKind};
use crate::mb::mb_restore;
use crate::nn::{build_hresnet, load_checkpoint, save_checkpoint, train, HResNet, Mode};
use crate::phantom::{acquire, generate_phantom, NoiseFreeImage, PhantomSpec};
use crate::rng::derive_seed_str;

pub use config::{
    gamma_label, Counts, EvalConfig, ExperimentConfig, ExtractorConfig, MbSettings, Method, Profile, TrainingData,
};
pub use report::{MetricRow, SnrRow, METRICS_CSV, REPORT_MD, SNR_CSV, TREND_CSV};
pub use store::{bytes_hash, stage_hash, DirLock, StageRecord, Store};

/// Last stage to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub enum Until {
    Data,
    Train,
    Restore,
    Evaluate,
    #[default]
    Report,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

/// Run the configured experiment in `cfg.output_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_until(cfg, Until::Report)
}

pub fn run_until(cfg: &ExperimentConfig, until: Until) -> Result<RunSummary> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let mut p = Pipeline {
        cfg,
        store: Store::new(&cfg.output_dir),
        hashes: BTreeMap::new(),
        order: Vec::new(),
        summary: RunSummary::default(),
    };
    p.store.write(CONFIG_FILE, cfg.to_toml()?.as_bytes())?;
    p.run(until)?;
    Ok(p.summary)
}

pub const CONFIG_FILE: &str = "config.toml";
pub const LINEAGE_JSON: &str = "report/lineage.json";

/// Relative paths of the two files making up a raw/float image.
fn image_files(rel: &str) -> [String; 2] {
    [rel.to_string(), format!("{rel}.json")]
}

fn ckpt_path(g: &str, loss: LossKind) -> String {
    format!("models/{g}/{loss}.ckpt")
}

fn restored_path(g: &str, label: &str, i: usize) -> String {
    format!("restored/{g}/{label}_{i:02}.f32")
}

fn method_label(method: Method, loss: Option<LossKind>) -> String {
    match (method, loss) {
        (Method::Dnn, Some(l)) => format!("dnn-{l}"),
        (Method::Dnn, None) => "dnn".into(),
        (Method::Mb, _) => "mb".into(),
    }
}

const EXTRACTOR_FILE: &str = "models/extractor.vgg";

struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    store: Store,
    hashes: BTreeMap<String, String>,
    order: Vec<String>,
    summary: RunSummary,
}

impl Pipeline<'_> {
    fn run(&mut self, until: Until) -> Result<()> {
        let cfg = self.cfg;
        self.phantoms()?;
        self.acquisitions()?;
        let pl_kinds: Vec<LossKind> = cfg
            .losses
            .iter()
            .copied()
            .filter(|k| k.perceptual_tap().is_some())
            .collect();
        if cfg.runs_dnn() {
            self.training_data()?;
            if !pl_kinds.is_empty() {
                self.extractor()?;
            }
        }
        if until == Until::Data {
            return Ok(());
        }
        if cfg.runs_dnn() {
            for &g in &cfg.gammas {
                for loss in self.training_order() {
                    self.train_stage(g, loss)?;
                }
            }
        }
        if until == Until::Train {
            return Ok(());
        }
        for &g in &cfg.gammas {
            if cfg.runs_dnn() {
                for &loss in &cfg.losses {
                    self.restore_dnn(g, loss)?;
                }
            }
            if cfg.runs_mb() {
                self.restore_mb(g)?;
            }
        }
        if until == Until::Restore {
            return Ok(());
        }
        self.evaluate()?;
        if until == Until::Evaluate {
            return Ok(());
        }
        self.report()
    }

    /// MAE first, so perceptual losses can start from it.
    fn training_order(&self) -> Vec<LossKind> {
        let mut order = self.cfg.losses.clone();
        order.sort_by_key(|k| *k != LossKind::Mae);
        order
    }

    fn pl_init_from_mae(&self, loss: LossKind) -> bool {
        self.cfg.init_pl_from_mae && loss.perceptual_tap().is_some() && self.cfg.losses.contains(&LossKind::Mae)
    }

    /// Run `body` unless the stage's record matches; `body` returns the
    /// artifacts it wrote.
    fn stage<S: Serialize>(
        &mut self,
        id: &str,
        part: &S,
        upstream: &[String],
        body: impl FnOnce(&Store) -> Result<Vec<String>>,
    ) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: id.to_string(),
            source: Box::new(e),
        };
        let up: Vec<&str> = upstream
            .iter()
            .map(|u| {
                self.hashes
                    .get(u)
                    .map(String::as_str)
                    .ok_or_else(|| Error::Invariant(format!("{u} has not run")))
            })
            .collect::<Result<_>>()
            .map_err(wrap)?;
        let hash = stage_hash(id, part, &up).map_err(wrap)?;
        if self.store.is_current(id, &hash) {
            log::info!("stage {id}: up to date");
            self.summary.skipped.push(id.to_string());
        } else {
            log::info!("stage {id}: running");
            let outputs = body(&self.store).map_err(wrap)?;
            let rec = StageRecord {
                stage: id.to_string(),
                hash: hash.clone(),
                inputs: upstream.to_vec(),
                outputs,
            };
            self.store.commit(&rec).map_err(wrap)?;
            self.summary.executed.push(id.to_string());
        }
        self.hashes.insert(id.to_string(), hash);
        self.order.push(id.to_string());
        Ok(())
    }

    fn phantoms(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let n_train = if cfg.runs_dnn() { cfg.data.n_phantoms } else { 0 };
        let part = (&cfg.phantom, &cfg.noise, n_train, cfg.seed);
        self.stage("phantoms", &part, &[], |store| {
            let mut out = save_phantom(store, "phantom/eval", &cfg.phantom, cfg)?;
            for k in 0..n_train {
                let spec = training_phantom_spec(cfg, k);
                out.extend(save_phantom(store, &format!("phantom/train_{k:03}"), &spec, cfg)?);
            }
            Ok(out)
        })
    }

    fn acquisitions(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let part = (&cfg.noise, &cfg.gammas, &cfg.counts, cfg.seed);
        self.stage("acquire", &part, &["phantoms".into()], |store| {
            let y = load_phantom(store, "phantom/eval")?;
            let mut out = Vec::new();
            let mut shoot = |rel: String, gamma: f64, label: String| -> Result<()> {
                let mut img = acquire(&y, &cfg.noise, gamma, derive_seed_str(cfg.seed, &label))?;
                img.meta.tag = label;
                img.meta.lineage.push("phantom/eval.f32".into());
                save_raw(&img, store.output(&rel)?)?;
                out.extend(image_files(&rel));
                Ok(())
            };
            for i in 0..cfg.counts.n_gt {
                shoot(format!("acq/gt_{i:02}.raw"), 1.0, format!("acq/gt/{i}"))?;
            }
            for i in 0..cfg.counts.n_eval {
                shoot(format!("acq/fd_{i:02}.raw"), 1.0, format!("acq/fd/{i}"))?;
            }
            for &g in &cfg.gammas {
                let gl = gamma_label(g);
                for i in 0..cfg.counts.n_ld_per_gamma {
                    shoot(format!("acq/{gl}/ld_{i:02}.raw"), g, format!("acq/{gl}/{i}"))?;
                }
            }
            Ok(out)
        })
    }

    /// Full-dose acquisitions of the training phantoms and their simulated
    /// reduced-dose counterparts.
    fn training_data(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let part = (&cfg.noise, &cfg.gammas, &cfg.data, cfg.seed);
        self.stage("training-data", &part, &["phantoms".into()], |store| {
            let mut out = Vec::new();
            for k in 0..cfg.data.n_phantoms {
                let y = load_phantom(store, &format!("phantom/train_{k:03}"))?;
                let label = format!("data/fd/{k}");
                let mut fd = acquire(&y, &cfg.noise, 1.0, derive_seed_str(cfg.seed, &label))?;
                fd.meta.tag = label;
                let rel = format!("data/fd_{k:03}.raw");
                save_raw(&fd, store.output(&rel)?)?;
                out.extend(image_files(&rel));
                for &g in &cfg.gammas {
                    let gl = gamma_label(g);
                    let label = format!("data/{gl}/{k}");
                    let sim = DoseSimConfig {
                        gamma: g,
                        params: cfg.noise,
                        domain: cfg.data.dose_domain,
                        seed: derive_seed_str(cfg.seed, &label),
                    };
                    let mut ld = simulate_low_dose(&fd, &sim)?;
                    ld.meta.tag = label;
                    let rel = format!("data/{gl}/ld_{k:03}.raw");
                    save_raw(&ld, store.output(&rel)?)?;
                    out.extend(image_files(&rel));
                }
            }
            Ok(out)
        })
    }

    fn extractor(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let file_hash = match &cfg.extractor.path {
            Some(p) => {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                Some(bytes_hash(&bytes))
            }
            None => None,
        };
        let part = (&cfg.extractor, file_hash);
        self.stage("extractor", &part, &[], |store| {
            if cfg.extractor.path.is_some() {
                return Ok(Vec::new());
            }
            let e = &cfg.extractor;
            write_random_vgg(&store.output(EXTRACTOR_FILE)?, e.widths, e.seed, e.mean, e.std)?;
            Ok(vec![EXTRACTOR_FILE.into()])
        })
    }

    fn extractor_path(&self) -> PathBuf {
        match &self.cfg.extractor.path {
            Some(p) => p.clone(),
            None => self.store.path(EXTRACTOR_FILE),
        }
    }

    fn train_stage(&mut self, gamma: f64, loss: LossKind) -> Result<()> {
        let cfg = self.cfg;
        let gl = gamma_label(gamma);
        let id = format!("train-{gl}-{loss}");
        let mut upstream = vec!["training-data".to_string()];
        if loss.perceptual_tap().is_some() {
            upstream.push("extractor".into());
        }
        let from_mae = self.pl_init_from_mae(loss);
        if from_mae {
            upstream.push(format!("train-{gl}-mae"));
        }
        let extractor_path = self.extractor_path();
        let part = (&cfg.train, &cfg.network, &cfg.data, loss, from_mae, cfg.seed);
        self.stage(&id, &part, &upstream, |store| {
            let patches = training_patches(store, cfg, gamma)?;
            let mut net = if from_mae {
                HResNet::from_checkpoint(&load_checkpoint(&store.path(&ckpt_path(&gl, LossKind::Mae)))?)?
            } else {
                build_hresnet::<f32>(&cfg.network, derive_seed_str(cfg.seed, &format!("init/{gl}")))?
            };
            let extractor = match loss.perceptual_tap() {
                Some((tap, pooled)) => Some(Arc::new(load_extractor(&extractor_path, tap, pooled)?)),
                None => None,
            };
            let objective = Loss::new(loss, extractor)?;
            let tcfg = crate::nn::TrainConfig {
                seed: derive_seed_str(cfg.seed, &format!("train/{gl}")),
                ..cfg.train.clone()
            };
            log::info!("training {loss} network for gamma {gamma} on {} patches", patches.len());
            let history = train(&mut net, &patches, &tcfg, &objective, None)?;
            let ck = ckpt_path(&gl, loss);
            save_checkpoint(&store.output(&ck)?, &net.to_checkpoint())?;
            let hist = format!("models/{gl}/{loss}_history.csv");
            store.write(&hist, history.to_csv().as_bytes())?;
            Ok(vec![ck, hist])
        })
    }

    fn restore_dnn(&mut self, gamma: f64, loss: LossKind) -> Result<()> {
        let cfg = self.cfg;
        let gl = gamma_label(gamma);
        let label = method_label(Method::Dnn, Some(loss));
        let id = format!("restore-{gl}-{label}");
        let upstream = vec!["acquire".to_string(), format!("train-{gl}-{loss}")];
        let part = cfg.evaluation.infer_tile;
        self.stage(&id, &part, &upstream, |store| {
            let ck = ckpt_path(&gl, loss);
            let mut net = HResNet::<f32>::from_checkpoint(&load_checkpoint(&store.path(&ck))?)?;
            net.set_mode(Mode::Eval);
            let mut out = Vec::new();
            for i in 0..cfg.counts.n_ld_per_gamma {
                let src = format!("acq/{gl}/ld_{i:02}.raw");
                let ld = load_raw(store.path(&src))?;
                let mut img = restore_with_network(&net, &ld, cfg.evaluation.infer_tile)?;
                img.meta.tag = format!("{label}/{gl}/{i}");
                img.meta.lineage.extend([src, ck.clone()]);
                let rel = restored_path(&gl, &label, i);
                save_float(&img, store.output(&rel)?)?;
                out.extend(image_files(&rel));
            }
            Ok(out)
        })
    }

    fn restore_mb(&mut self, gamma: f64) -> Result<()> {
        let cfg = self.cfg;
        let gl = gamma_label(gamma);
        let id = format!("restore-{gl}-mb");
        let mb = cfg.mb_config(gamma);
        self.stage(&id, &mb, &["acquire".into()], |store| {
            let mut out = Vec::new();
            for i in 0..cfg.counts.n_ld_per_gamma {
                let src = format!("acq/{gl}/ld_{i:02}.raw");
                let ld = load_raw(store.path(&src))?;
                let mut img = mb_restore(&ld, &mb)?;
                img.meta.tag = format!("mb/{gl}/{i}");
                img.meta.lineage.push(src);
                let rel = restored_path(&gl, "mb", i);
                save_float(&img, store.output(&rel)?)?;
                out.extend(image_files(&rel));
            }
            Ok(out)
        })
    }

    fn restore_ids(&self) -> Vec<String> {
        let cfg = self.cfg;
        let mut ids = Vec::new();
        for &g in &cfg.gammas {
            let gl = gamma_label(g);
            if cfg.runs_dnn() {
                ids.extend(cfg.losses.iter().map(|l| format!("restore-{gl}-dnn-{l}")));
            }
            if cfg.runs_mb() {
                ids.push(format!("restore-{gl}-mb"));
            }
        }
        ids
    }

    fn evaluate(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let mut upstream = vec!["acquire".to_string()];
        upstream.extend(self.restore_ids());
        let part = (&cfg.evaluation, &cfg.phantom.mc_clusters, cfg.seed);
        self.stage("evaluate", &part, &upstream, |store| report::evaluate(store, cfg))
    }

    fn report(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let upstream = vec!["evaluate".to_string()];
        let part = (&cfg.losses, &cfg.gammas, cfg.profile, cfg.seed);
        let order = self.order.clone();
        self.stage("report", &part, &upstream, |store| {
            let mut out = report::write_report(store, cfg)?;
            out.push(LINEAGE_JSON.into());
            // The report's own node is added here since its record is
            // committed only after this closure returns.
            let mut nodes: Vec<StageRecord> = order.iter().filter_map(|id| store.record(id)).collect();
            nodes.push(StageRecord {
                stage: "report".into(),
                hash: String::new(),
                inputs: upstream.clone(),
                outputs: out.clone(),
            });
            report::write_lineage(store, &nodes)?;
            Ok(out)
        })
    }
}

fn training_phantom_spec(cfg: &ExperimentConfig, k: usize) -> PhantomSpec {
    PhantomSpec {
        seed: derive_seed_str(cfg.seed, &format!("phantom/train/{k}")),
        ..cfg.phantom.clone()
    }
}

/// Persist Y (f32), its support and its speck map.
fn save_phantom(store: &Store, stem: &str, spec: &PhantomSpec, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let y = generate_phantom(spec)?;
    let mut meta = AcqMeta::full_dose(cfg.noise, spec.seed, stem);
    meta.saturation_dn = y.saturation_dn;
    let img = FloatImage::new(y.width, y.height, y.values.clone(), meta.clone())?;
    let mut out = Vec::new();
    let rel = format!("{stem}.f32");
    save_float(&img, store.output(&rel)?)?;
    out.extend(image_files(&rel));
    for (suffix, mask) in [("support", &y.support), ("specks", &y.specks)] {
        let rel = format!("{stem}_{suffix}.mask");
        save_mask(mask, &meta, store.output(&rel)?)?;
        out.extend(image_files(&rel));
    }
    Ok(out)
}

fn load_phantom(store: &Store, stem: &str) -> Result<NoiseFreeImage> {
    let img = load_float(store.path(&format!("{stem}.f32")))?;
    Ok(NoiseFreeImage {
        width: img.width,
        height: img.height,
        values: img.data,
        support: load_mask(store.path(&format!("{stem}_support.mask")))?,
        specks: load_mask(store.path(&format!("{stem}_specks.mask")))?,
        tau: img.meta.noise.tau,
        saturation_dn: img.meta.saturation_dn,
    })
}

/// Patch pairs for one dose, `patch_count` in total spread evenly over the
/// training phantoms.
pub fn training_patches(store: &Store, cfg: &ExperimentConfig, gamma: f64) -> Result<Vec<PatchPair>> {
    let gl = gamma_label(gamma);
    let n = cfg.data.n_phantoms;
    let mut patches = Vec::with_capacity(cfg.data.patch_count);
    for k in 0..n {
        let count = cfg.data.patch_count / n + usize::from(k < cfg.data.patch_count % n);
        let fd = load_raw(store.path(&format!("data/fd_{k:03}.raw")))?;
        let ld = load_raw(store.path(&format!("data/{gl}/ld_{k:03}.raw")))?;
        let mask: BreastMask = load_mask(store.path(&format!("phantom/train_{k:03}_support.mask")))?;
        let seed = derive_seed_str(cfg.seed, &format!("patches/{gl}/{k}"));
        patches.extend(extract_patches(&ld, &fd, &mask, count, cfg.data.patch_size, seed)?);
    }
    Ok(patches)
}

/// Network restoration of a raw image back to full-dose DN.
pub fn restore_with_network(net: &HResNet<f32>, ld: &RawImage, tile: usize) -> Result<FloatImage> {
    let x = normalize_for_net(ld);
    let y = net.infer_image(&x, ld.width, ld.height, tile)?;
    let sat = ld.meta.saturation_dn as f64;
    let mut meta = ld.meta.clone();
    meta.gamma = 1.0;
    FloatImage::new(ld.width, ld.height, y.iter().map(|&v| v as f64 * sat).collect(), meta)
}

/// Output directory of a config, for callers that only have a path.
pub fn stage_record(dir: &Path, stage: &str) -> Option<StageRecord> {
    Store::new(dir).record(stage)
}
