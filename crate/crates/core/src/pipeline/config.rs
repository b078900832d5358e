//! Experiment configuration: a preset per profile, deep-merged with a TOML
//! file and `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dosesim::DoseDomain;
use crate::error::{Error, Result};
use crate::image::NoiseParams;
use crate::losses::{LossKind, VGG_WIDTHS};
use crate::mb::{BlendWeight, DenoiserSpec, MbConfig};
use crate::metrics::BootstrapConfig;
use crate::nn::{NetworkSpec, TrainConfig};
use crate::phantom::PhantomSpec;

/// Which set of defaults the file is merged over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Scaled to finish on one desktop CPU.
    #[default]
    Desk,
    /// Full-size training recipe (256,000 patches of 64×64, 60 epochs).
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile '{s}' (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mb,
    Dnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    /// Full-dose realisations pooled into the ground truth.
    pub n_gt: usize,
    /// Full-dose realisations scored against it.
    pub n_eval: usize,
    pub n_ld_per_gamma: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingData {
    /// Synthetic phantoms that stand in for the clinical training exams.
    pub n_phantoms: usize,
    /// Total patches per network, spread evenly over the phantoms.
    pub patch_count: usize,
    pub patch_size: usize,
    pub dose_domain: DoseDomain,
}

/// Feature extractor for the perceptual losses: a VGG-16 prefix loaded
/// from `path`, or seeded random weights with the given widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub widths: [usize; 4],
    pub seed: u64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbSettings {
    pub denoiser: DenoiserSpec,
    pub blend_weight: BlendWeight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap: BootstrapConfig,
    /// Tissue is anything darker than the air level by more than this.
    pub segment_threshold_dn: f64,
    /// Side of the square crops exported around each MC cluster.
    pub roi_size: usize,
    /// Tile side for whole-image network inference.
    pub infer_tile: usize,
    /// Fixed SNR-map display window; when absent, the 1st–99th percentile
    /// of all maps at a dose, shared by every method at that dose.
    #[serde(default)]
    pub snr_display: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// The evaluation phantom; training phantoms share its layout with
    /// their own seeds.
    pub phantom: PhantomSpec,
    pub noise: NoiseParams,
    pub gammas: Vec<f64>,
    pub counts: Counts,
    pub data: TrainingData,
    pub train: TrainConfig,
    pub network: NetworkSpec,
    pub losses: Vec<LossKind>,
    pub methods: Vec<Method>,
    /// Start perceptual-loss networks from the trained MAE network of the
    /// same dose when MAE is among the losses.
    pub init_pl_from_mae: bool,
    pub mb: MbSettings,
    pub extractor: ExtractorConfig,
    pub evaluation: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(profile: Profile) -> Self {
        let desk = Self {
            profile,
            seed: 2024,
            output_dir: PathBuf::from("lowdose-run"),
            phantom: PhantomSpec::default_with_seed(7),
            noise: NoiseParams::default(),
            gammas: vec![0.75, 0.5],
            counts: Counts {
                n_gt: 10,
                n_eval: 5,
                n_ld_per_gamma: 5,
            },
            data: TrainingData {
                n_phantoms: 8,
                patch_count: 4000,
                patch_size: 24,
                dose_domain: DoseDomain::Direct,
            },
            train: TrainConfig {
                epochs: 10,
                halve_every: 10,
                batch: 32,
                ..TrainConfig::default()
            },
            network: NetworkSpec::default(),
            losses: LossKind::ALL.to_vec(),
            methods: vec![Method::Dnn, Method::Mb],
            init_pl_from_mae: true,
            mb: MbSettings {
                denoiser: DenoiserSpec::default(),
                blend_weight: BlendWeight::AUTO,
            },
            extractor: ExtractorConfig {
                path: None,
                widths: [8, 16, 32, 64],
                seed: 16,
                mean: [0.485, 0.456, 0.406],
                std: [0.229, 0.224, 0.225],
            },
            evaluation: EvalConfig {
                bootstrap: BootstrapConfig::default(),
                segment_threshold_dn: 1000.0,
                roi_size: 64,
                infer_tile: 128,
                snr_display: None,
            },
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => Self {
                data: TrainingData {
                    n_phantoms: 400,
                    patch_count: 256_000,
                    patch_size: 64,
                    ..desk.data
                },
                train: TrainConfig::default(),
                network: NetworkSpec {
                    init_variance: 1e-4,
                    ..NetworkSpec::default()
                },
                extractor: ExtractorConfig {
                    widths: VGG_WIDTHS,
                    ..desk.extractor
                },
                ..desk
            },
        }
    }

    /// Parse a TOML document merged over the preset named by its `profile`
    /// key (or `profile` if given), then apply `key.path=value` overrides.
    pub fn from_toml(text: &str, profile: Option<Profile>, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse: {e}")))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let profile = match (profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(toml::Value::String(s))) => s.parse()?,
            (None, Some(v)) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
            (None, None) => Profile::Desk,
        };
        user.insert("profile".into(), toml::Value::String(profile_name(profile).into()));
        let mut base = Self::preset(profile);
        rescale_phantom(&mut base.phantom, &user);
        let mut merged =
            toml::Table::try_from(base).map_err(|e| Error::Config(format!("preset serialisation: {e}")))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, profile, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialisation: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.noise.validate()?;
        self.train.validate()?;
        self.network.validate()?;
        self.mb.denoiser.validate()?;
        if self.phantom.tau != self.noise.tau {
            return Err(Error::Config(format!(
                "phantom tau {} differs from noise tau {}",
                self.phantom.tau, self.noise.tau
            )));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(Error::Config(format!("gamma {g} outside (0, 1)")));
        }
        let mut labels: Vec<String> = self.gammas.iter().map(|&g| gamma_label(g)).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.gammas.len() {
            return Err(Error::Config("gammas must be distinct at percent resolution".into()));
        }
        let c = &self.counts;
        if c.n_gt < 2 || c.n_eval < 2 || c.n_ld_per_gamma < 2 {
            return Err(Error::Config(
                "n_gt, n_eval and n_ld_per_gamma must each be at least 2".into(),
            ));
        }
        let d = &self.data;
        if self.methods.contains(&Method::Dnn) && !self.losses.is_empty() {
            if d.n_phantoms == 0 || d.patch_count < d.n_phantoms {
                return Err(Error::Config(
                    "need at least one phantom and one patch per phantom".into(),
                ));
            }
            if d.patch_size == 0 || d.patch_size > self.phantom.width.min(self.phantom.height) {
                return Err(Error::Config(format!(
                    "patch size {} does not fit the phantom",
                    d.patch_size
                )));
            }
        }
        let mut losses = self.losses.clone();
        losses.sort_by_key(|k| k.name());
        losses.dedup();
        if losses.len() != self.losses.len() {
            return Err(Error::Config("losses must not repeat".into()));
        }
        if self.evaluation.roi_size == 0 || self.evaluation.infer_tile == 0 {
            return Err(Error::Config("roi_size and infer_tile must be positive".into()));
        }
        Ok(())
    }

    pub fn mb_config(&self, gamma: f64) -> MbConfig {
        MbConfig {
            params: self.noise,
            gamma,
            denoiser: self.mb.denoiser.clone(),
            blend_weight: self.mb.blend_weight,
        }
    }

    pub fn runs_dnn(&self) -> bool {
        self.methods.contains(&Method::Dnn) && !self.losses.is_empty()
    }

    pub fn runs_mb(&self) -> bool {
        self.methods.contains(&Method::Mb)
    }
}

pub(super) fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Paper => "paper",
    }
}

/// Dose label used in file and stage names: 0.5 → "g050".
pub fn gamma_label(gamma: f64) -> String {
    format!("g{:03}", (gamma * 100.0).round() as i64)
}

/// When the user changes the phantom size, start from the default layout at
/// that size so the pixel-valued geometry follows; keys the user sets
/// explicitly still win in the merge.
fn rescale_phantom(base: &mut PhantomSpec, user: &toml::Table) {
    let Some(t) = user.get("phantom").and_then(|v| v.as_table()) else {
        return;
    };
    let dim = |k: &str| {
        t.get(k)
            .and_then(|v| v.as_integer())
            .and_then(|v| usize::try_from(v).ok())
    };
    let (w, h) = (dim("width"), dim("height"));
    if w.is_some() || h.is_some() {
        let seed = base.seed;
        *base = PhantomSpec::sized(w.unwrap_or(base.width), h.unwrap_or(base.height), seed);
    }
}

/// Recursive table merge; non-table values in `over` replace `base`.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Apply `a.b.c=value`; the value is parsed as TOML, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one item");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{k}' is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
