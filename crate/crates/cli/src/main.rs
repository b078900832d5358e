//! `lowdose`: simulate, restore and score low-dose mammography experiments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lowdose::dosesim::{estimate_noise_params, simulate_low_dose, DoseDomain, DoseSimConfig, FlatSeries};
use lowdose::image::{
    load_float, load_mask, load_raw, save_float, save_mask, save_raw, segment_breast, AcqMeta, FloatImage, Polarity,
};
use lowdose::losses::LossKind;
use lowdose::mb::{dose_rescale, mb_restore};
use lowdose::metrics::{evaluate_mnse, gt_protocol, BootstrapConfig};
use lowdose::nn::{load_checkpoint, HResNet, Mode};
use lowdose::phantom::{acquire, generate_phantom, PhantomSpec};
use lowdose::pipeline::{
    gamma_label, restore_with_network, run_pipeline, run_until, ExperimentConfig, Profile, Until, REPORT_MD,
};
use lowdose::rng::derive_seed_str;

/// Environment variable holding the worker-thread count.
const THREADS_ENV: &str = "LOWDOSE_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "lowdose",
    version,
    about = "Low-dose mammography simulation, restoration and MNSE evaluation"
)]
struct Cli {
    /// Worker threads for pixel-parallel stages (default: all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    threads: Option<usize>,
    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment config, merged over the profile preset.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Preset to merge over (desk or paper); overrides the file's `profile`.
    #[arg(long)]
    profile: Option<Profile>,
    /// Override a config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => String::new(),
        };
        let mut cfg = ExperimentConfig::from_toml(&text, self.profile, &self.overrides)?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Direct,
    Vst,
}

impl From<DomainArg> for DoseDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Direct => DoseDomain::Direct,
            DomainArg::Vst => DoseDomain::Vst,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Mb,
    Dnn,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic noise-free phantom (f32 image plus support mask).
    GenPhantom {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image size; defaults to the config phantom.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        /// Phantom seed; defaults to the config phantom seed.
        #[arg(long = "phantom-seed")]
        phantom_seed: Option<u64>,
        /// Also write this many noisy raw acquisitions next to the phantom.
        #[arg(long, default_value_t = 0)]
        acquisitions: usize,
        /// Dose fraction of those acquisitions.
        #[arg(long, default_value_t = 1.0)]
        dose: f64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Simulate a reduced-dose acquisition from a raw image.
    SimulateDose {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        gamma: f64,
        #[arg(long, value_enum, default_value = "direct")]
        domain: DomainArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fit noise parameters from flat-field frames tagged `flat:<exposure>`
    /// (exposure 0 marks dark frames).
    EstimateParams {
        #[arg(required = true)]
        frames: Vec<PathBuf>,
    },
    /// Train one network (for one dose and loss) through the pipeline stages.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(short, long)]
        gamma: f64,
        #[arg(short, long)]
        loss: LossKind,
        /// Copy the trained checkpoint here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Restore a raw reduced-dose image.
    Restore {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Network weights (required for --method dnn).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Model-based settings come from this config.
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 128)]
        tile: usize,
    },
    /// Score images against a ground truth estimated from full-dose frames;
    /// prints the MNSE report as JSON.
    Evaluate {
        /// Full-dose realisations for the ground truth.
        #[arg(long, num_args = 1.., required = true)]
        gt: Vec<PathBuf>,
        /// Images to score (raw or f32).
        #[arg(long = "eval", num_args = 1.., required = true)]
        eval: Vec<PathBuf>,
        /// Breast mask; segmented from the first GT frame when absent.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 1000.0)]
        threshold: f64,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Regenerate the report of a pipeline run (runs any missing stage).
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenPhantom {
            cfg,
            width,
            height,
            phantom_seed,
            acquisitions,
            dose,
            out,
        } => gen_phantom(&cfg, width, height, phantom_seed, (acquisitions, dose), &out),
        Command::SimulateDose {
            input,
            gamma,
            domain,
            seed,
            out,
        } => {
            let fd = load_raw(&input)?;
            let sim = DoseSimConfig {
                gamma,
                params: fd.meta.noise,
                domain: domain.into(),
                seed,
            };
            let mut ld = simulate_low_dose(&fd, &sim)?;
            ld.meta.lineage.push(input.display().to_string());
            save_raw(&ld, &out)?;
            log::info!("wrote {} (dose {})", out.display(), ld.meta.gamma);
            Ok(())
        }
        Command::EstimateParams { frames } => estimate(&frames),
        Command::Train { cfg, gamma, loss, out } => {
            let mut c = cfg.load()?;
            c.gammas = vec![gamma];
            if loss.perceptual_tap().is_some() && c.init_pl_from_mae {
                c.losses = vec![LossKind::Mae, loss];
            } else {
                c.losses = vec![loss];
            }
            c.methods = vec![lowdose::pipeline::Method::Dnn];
            run_until(&c, Until::Train)?;
            let ck = c.output_dir.join(format!("models/{}/{loss}.ckpt", gamma_label(gamma)));
            if let Some(out) = out {
                std::fs::copy(&ck, &out).with_context(|| format!("copying {}", ck.display()))?;
                println!("{}", out.display());
            } else {
                println!("{}", ck.display());
            }
            Ok(())
        }
        Command::Restore {
            method,
            checkpoint,
            input,
            out,
            cfg,
            tile,
        } => restore(method, checkpoint.as_deref(), &input, &out, &cfg, tile),
        Command::Evaluate {
            gt,
            eval,
            mask,
            threshold,
            resamples,
            seed,
        } => evaluate(&gt, &eval, mask.as_deref(), threshold, resamples, seed),
        Command::Report { cfg } | Command::Run { cfg } => {
            let c = cfg.load()?;
            let summary = run_pipeline(&c)?;
            log::info!(
                "{} stages executed, {} up to date",
                summary.executed.len(),
                summary.skipped.len()
            );
            println!("{}", c.output_dir.join(REPORT_MD).display());
            Ok(())
        }
    }
}

fn gen_phantom(
    cfg: &ConfigArgs,
    width: Option<usize>,
    height: Option<usize>,
    seed: Option<u64>,
    (shots, dose): (usize, f64),
    out: &Path,
) -> Result<()> {
    let c = cfg.load()?;
    let spec = match (width, height) {
        (None, None) => c.phantom.clone(),
        (w, h) => PhantomSpec::sized(
            w.unwrap_or(c.phantom.width),
            h.unwrap_or(c.phantom.height),
            c.phantom.seed,
        ),
    };
    let spec = PhantomSpec {
        seed: seed.unwrap_or(spec.seed),
        ..spec
    };
    let y = generate_phantom(&spec)?;
    let mut meta = AcqMeta::full_dose(c.noise, spec.seed, "phantom");
    meta.saturation_dn = spec.saturation_dn;
    save_float(
        &FloatImage::new(y.width, y.height, y.values.clone(), meta.clone())?,
        out,
    )?;
    let mask_path = out.with_extension("mask");
    save_mask(&y.support, &meta, &mask_path)?;
    log::info!("wrote {} and {}", out.display(), mask_path.display());
    let stem = out.with_extension("");
    for i in 0..shots {
        let tag = format!("acq/{dose}/{i}");
        let mut img = acquire(&y, &c.noise, dose, derive_seed_str(c.seed ^ spec.seed, &tag))?;
        img.meta.tag = tag;
        let path = PathBuf::from(format!("{}_{i:02}.raw", stem.display()));
        save_raw(&img, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn estimate(frames: &[PathBuf]) -> Result<()> {
    let mut groups: BTreeMap<u64, (f64, Vec<_>)> = BTreeMap::new();
    for p in frames {
        let img = load_raw(p)?;
        let exposure: f64 = match img.meta.tag.strip_prefix("flat:") {
            Some(e) => e
                .parse()
                .with_context(|| format!("{}: bad exposure in tag {}", p.display(), img.meta.tag))?,
            None => bail!(
                "{}: tag `{}` is not of the form flat:<exposure>",
                p.display(),
                img.meta.tag
            ),
        };
        groups
            .entry(exposure.to_bits())
            .or_insert((exposure, Vec::new()))
            .1
            .push(img);
    }
    let flats: Vec<FlatSeries> = groups
        .into_values()
        .map(|(exposure, frames)| FlatSeries { exposure, frames })
        .collect();
    let params = estimate_noise_params(&flats)?;
    println!("{}", serde_json::to_string_pretty(&params)?);
    Ok(())
}

fn restore(
    method: MethodArg,
    checkpoint: Option<&Path>,
    input: &Path,
    out: &Path,
    cfg: &ConfigArgs,
    tile: usize,
) -> Result<()> {
    let ld = load_raw(input)?;
    let mut img = match method {
        MethodArg::Dnn => {
            let Some(ck) = checkpoint else {
                bail!("--method dnn needs --checkpoint");
            };
            let mut net = HResNet::<f32>::from_checkpoint(&load_checkpoint(ck)?)?;
            net.set_mode(Mode::Eval);
            let mut img = restore_with_network(&net, &ld, tile)?;
            img.meta.lineage.push(ck.display().to_string());
            img
        }
        MethodArg::Mb => {
            let c = cfg.load()?;
            let mut mb = c.mb_config(ld.meta.gamma);
            mb.params = ld.meta.noise;
            mb_restore(&ld, &mb)?
        }
    };
    img.meta.lineage.push(input.display().to_string());
    save_float(&img, out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

/// DN values of a raw (dose-rescaled to full-dose level) or f32 image.
fn load_values(path: &Path) -> Result<(Vec<f64>, Option<lowdose::RawImage>)> {
    match load_raw(path) {
        Ok(raw) => Ok((dose_rescale(&raw), Some(raw))),
        Err(_) => Ok((
            load_float(path)
                .with_context(|| format!("loading {}", path.display()))?
                .data,
            None,
        )),
    }
}

fn evaluate(
    gt: &[PathBuf],
    eval: &[PathBuf],
    mask: Option<&Path>,
    threshold: f64,
    resamples: usize,
    seed: u64,
) -> Result<()> {
    let mut pool = Vec::new();
    let mut first_raw = None;
    for p in gt {
        let (v, raw) = load_values(p)?;
        if first_raw.is_none() {
            first_raw = raw;
        }
        pool.push(v);
    }
    let set: Vec<Vec<f64>> = eval
        .iter()
        .map(|p| load_values(p).map(|v| v.0))
        .collect::<Result<_>>()?;
    let mask = match (mask, first_raw) {
        (Some(m), _) => load_mask(m)?,
        (None, Some(raw)) => segment_breast(&raw, threshold, Polarity::Attenuation)?,
        (None, None) => bail!("no --mask given and the first GT frame is not a raw image to segment"),
    };
    let pool_refs: Vec<&[f64]> = pool.iter().map(|v| &v[..]).collect();
    let set_refs: Vec<&[f64]> = set.iter().map(|v| &v[..]).collect();
    let cal = gt_protocol(&pool_refs, &[set_refs], &mask)?;
    let corrected: Vec<&[f64]> = cal.sets[0].iter().map(|v| &v[..]).collect();
    let boot = BootstrapConfig {
        resamples,
        seed,
        ..Default::default()
    };
    let report = evaluate_mnse(&corrected, &cal.gt, &mask, &boot)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
