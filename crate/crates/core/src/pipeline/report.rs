//! Evaluation of every restored set against the estimated ground truth,
//! and the tables, trend summary, images and lineage of the final report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{gamma_label, ExperimentConfig};
use super::store::{StageRecord, Store};
use super::{image_files, method_label, restored_path, Method, CONFIG_FILE, LINEAGE_JSON};
use crate::error::{Error, Result};
use crate::image::BreastMask;
use crate::image::{export_png, load_float, load_raw, save_float, save_mask, segment_breast, FloatImage, Polarity};
use crate::mb::dose_rescale;
use crate::metrics::{
    evaluate_mnse, gt_protocol, quantile_sorted, snr_map, BootstrapConfig, MnseReport, SNR_DISPLAY_RANGE,
};
use crate::rng::derive_seed_str;

pub const METRICS_CSV: &str = "eval/metrics.csv";
pub const SNR_CSV: &str = "eval/snr.csv";
pub const REPORT_MD: &str = "report/report.md";
pub const TREND_CSV: &str = "report/trend.csv";
const SUMMARY_JSON: &str = "eval/summary.json";
const MASK_FILE: &str = "eval/mask.mask";
const GT_FILE: &str = "eval/gt.f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub gamma: f64,
    /// `ld`, `dnn-<loss>`, `mb` or `fd`.
    pub method: String,
    pub mnse: MnseReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub gamma: f64,
    pub method: String,
    pub mean_snr: f64,
    pub ci: (f64, f64),
    pub infinite: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Summary {
    mask_pixels: usize,
    rows: Vec<MetricRow>,
    snr: Vec<SnrRow>,
    rois: Vec<String>,
    snr_maps: Vec<String>,
    /// (gamma, lo, hi) display window of the SNR maps at each dose.
    snr_display: Vec<(f64, f64, f64)>,
}

/// 1st–99th percentile of the finite map values inside the mask.
fn pooled_range<'a>(maps: impl Iterator<Item = &'a [f64]>, mask: &BreastMask) -> (f64, f64) {
    let idx = mask.indices();
    let mut v: Vec<f64> = maps
        .flat_map(|m| idx.iter().map(move |&i| m[i]))
        .filter(|x| x.is_finite())
        .collect();
    v.sort_by(f64::total_cmp);
    let (lo, hi) = (quantile_sorted(&v, 0.01), quantile_sorted(&v, 0.99));
    if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        SNR_DISPLAY_RANGE
    }
}

fn floats(store: &Store, rel: &str) -> Result<Vec<f64>> {
    Ok(load_float(store.path(rel))?.data)
}

fn raw_floats(store: &Store, rel: &str) -> Result<Vec<f64>> {
    Ok(load_raw(store.path(rel))?.to_float().data)
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| &x[..]).collect()
}

/// Square crop of side `size` centred on `(row, col)`, shifted to stay
/// inside the image.
fn crop(values: &[f64], width: usize, height: usize, center: (f64, f64), size: usize) -> (Vec<f64>, usize, usize) {
    let (cw, ch) = (size.min(width), size.min(height));
    let start = |c: f64, len: usize, full: usize| ((c.round() as i64 - len as i64 / 2).max(0) as usize).min(full - len);
    let (r0, c0) = (start(center.0, ch, height), start(center.1, cw, width));
    let mut out = Vec::with_capacity(cw * ch);
    for r in r0..r0 + ch {
        out.extend_from_slice(&values[r * width + c0..r * width + c0 + cw]);
    }
    (out, cw, ch)
}

fn window_of(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ((lo + hi) / 2.0, (hi - lo).max(1.0))
}

/// The evaluation stage body.
pub(super) fn evaluate(store: &Store, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let ev = &cfg.evaluation;
    let first = load_raw(store.path("acq/gt_00.raw"))?;
    let (w, h) = (first.width, first.height);
    let mask = segment_breast(&first, ev.segment_threshold_dn, Polarity::Attenuation)?;
    if mask.count() < (w * h).div_ceil(100) {
        return Err(Error::Precondition(format!(
            "segmented breast covers {} of {} pixels; the phantom needs an air region \
             and segment_threshold_dn ({}) must be below the tissue/air contrast",
            mask.count(),
            w * h,
            ev.segment_threshold_dn
        )));
    }
    let mut out = Vec::new();
    save_mask(&mask, &first.meta, store.output(MASK_FILE)?)?;
    out.extend(image_files(MASK_FILE));

    let gt_pool: Vec<Vec<f64>> = (0..cfg.counts.n_gt)
        .map(|i| raw_floats(store, &format!("acq/gt_{i:02}.raw")))
        .collect::<Result<_>>()?;
    let fd: Vec<Vec<f64>> = (0..cfg.counts.n_eval)
        .map(|i| raw_floats(store, &format!("acq/fd_{i:02}.raw")))
        .collect::<Result<_>>()?;

    let mut summary = Summary {
        mask_pixels: mask.count(),
        rows: Vec::new(),
        snr: Vec::new(),
        rois: Vec::new(),
        snr_maps: Vec::new(),
        snr_display: Vec::new(),
    };
    let mut gt_saved = false;
    for &g in &cfg.gammas {
        let gl = gamma_label(g);
        let n = cfg.counts.n_ld_per_gamma;
        let mut sets: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
        let ld = (0..n)
            .map(|i| Ok(dose_rescale(&load_raw(store.path(&format!("acq/{gl}/ld_{i:02}.raw")))?)))
            .collect::<Result<_>>()?;
        sets.push(("ld".into(), ld));
        let mut methods: Vec<String> = Vec::new();
        if cfg.runs_dnn() {
            methods.extend(cfg.losses.iter().map(|&l| method_label(Method::Dnn, Some(l))));
        }
        if cfg.runs_mb() {
            methods.push(method_label(Method::Mb, None));
        }
        for m in methods {
            let imgs = (0..n)
                .map(|i| floats(store, &restored_path(&gl, &m, i)))
                .collect::<Result<_>>()?;
            sets.push((m, imgs));
        }
        sets.push(("fd".into(), fd.clone()));

        let mut maps: Vec<(String, Vec<f64>)> = Vec::new();
        let set_refs: Vec<Vec<&[f64]>> = sets.iter().map(|(_, v)| refs(v)).collect();
        let cal = gt_protocol(&refs(&gt_pool), &set_refs, &mask)?;
        if !gt_saved {
            let gt_img = FloatImage::new(w, h, cal.gt.mean.clone(), first.meta.clone())?;
            save_float(&gt_img, store.output(GT_FILE)?)?;
            out.extend(image_files(GT_FILE));
            for (c, cluster) in cfg.phantom.mc_clusters.iter().enumerate() {
                let (v, cw, chh) = crop(&cal.gt.mean, w, h, cluster.center, ev.roi_size);
                let (level, window) = window_of(&v);
                let rel = format!("eval/roi/c{c}_gt.png");
                export_png(&v, cw, chh, level, window, store.output(&rel)?)?;
                summary.rois.push(rel);
            }
            gt_saved = true;
        }
        for ((label, _), corrected) in sets.iter().zip(&cal.sets) {
            let boot = BootstrapConfig {
                seed: derive_seed_str(ev.bootstrap.seed, &format!("{}/{gl}/{label}", cfg.seed)),
                ..ev.bootstrap
            };
            let crefs = refs(corrected);
            let mnse = evaluate_mnse(&crefs, &cal.gt, &mask, &boot)?;
            let snr = snr_map(&crefs, &mask, &boot)?;
            for (c, cluster) in cfg.phantom.mc_clusters.iter().enumerate() {
                let (gv, _, _) = crop(&cal.gt.mean, w, h, cluster.center, ev.roi_size);
                let (level, window) = window_of(&gv);
                let (v, cw, chh) = crop(&corrected[0], w, h, cluster.center, ev.roi_size);
                let rel = format!("eval/roi/c{c}_{gl}_{label}.png");
                export_png(&v, cw, chh, level, window, store.output(&rel)?)?;
                summary.rois.push(rel);
            }
            summary.rows.push(MetricRow {
                gamma: g,
                method: label.clone(),
                mnse,
            });
            summary.snr.push(SnrRow {
                gamma: g,
                method: label.clone(),
                mean_snr: snr.mean_snr,
                ci: snr.ci,
                infinite: snr.infinite,
            });
            maps.push((format!("eval/snr/{gl}_{label}.png"), snr.map));
        }
        let (lo, hi) = match ev.snr_display {
            Some([lo, hi]) => (lo, hi),
            None => pooled_range(maps.iter().map(|(_, m)| &m[..]), &mask),
        };
        for (rel, map) in maps.drain(..) {
            export_png(&map, w, h, (lo + hi) / 2.0, hi - lo, store.output(&rel)?)?;
            summary.snr_maps.push(rel);
        }
        summary.snr_display.push((g, lo, hi));
    }
    store.write(METRICS_CSV, metrics_csv(&summary.rows).as_bytes())?;
    store.write(SNR_CSV, snr_csv(&summary.snr).as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Invariant(e.to_string()))?;
    store.write(SUMMARY_JSON, json.as_bytes())?;
    out.extend([METRICS_CSV.into(), SNR_CSV.into(), SUMMARY_JSON.into()]);
    out.extend(summary.rois.iter().cloned());
    out.extend(summary.snr_maps.iter().cloned());
    Ok(out)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s =
        String::from("gamma,method,total,rn,b2,phi1,total_lo,total_hi,rn_lo,rn_hi,b2_lo,b2_hi,p,pixels,excluded\n");
    for r in rows {
        let m = &r.mnse;
        let _ = writeln!(
            s,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{},{},{}",
            r.gamma,
            r.method,
            m.total,
            m.rn,
            m.b2,
            m.phi1,
            m.ci_total.0,
            m.ci_total.1,
            m.ci_rn.0,
            m.ci_rn.1,
            m.ci_b2.0,
            m.ci_b2.1,
            m.p,
            m.pixels,
            m.excluded
        );
    }
    s
}

pub fn snr_csv(rows: &[SnrRow]) -> String {
    let mut s = String::from("gamma,method,mean_snr,ci_lo,ci_hi,infinite\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.9e},{:.9e},{:.9e},{}",
            r.gamma, r.method, r.mean_snr, r.ci.0, r.ci.1, r.infinite
        );
    }
    s
}

/// Per-dose orderings of the network rows by R_N and by B², lowest first.
fn trend_csv(rows: &[MetricRow], gammas: &[f64]) -> String {
    let mut s = String::from("gamma,metric,order,lowest\n");
    for &g in gammas {
        let dnn: Vec<&MetricRow> = rows
            .iter()
            .filter(|r| r.gamma == g && r.method.starts_with("dnn-"))
            .collect();
        if dnn.is_empty() {
            continue;
        }
        for (metric, key) in [("rn", 0usize), ("b2", 1)] {
            let val = |r: &MetricRow| if key == 0 { r.mnse.rn } else { r.mnse.b2 };
            let mut sorted = dnn.clone();
            sorted.sort_by(|a, b| val(a).total_cmp(&val(b)));
            let names: Vec<&str> = sorted.iter().map(|r| &r.method["dnn-".len()..]).collect();
            let _ = writeln!(s, "{g},{metric},{},{}", names.join(" < "), names[0]);
        }
    }
    s
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

pub(super) fn write_report(store: &Store, cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(store.path(SUMMARY_JSON)).map_err(|e| Error::io(store.path(SUMMARY_JSON), e))?;
    let summary: Summary = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: store.path(SUMMARY_JSON),
        reason: e.to_string(),
    })?;
    let trend = trend_csv(&summary.rows, &cfg.gammas);
    store.write(TREND_CSV, trend.as_bytes())?;

    let mut md = String::from("# Low-dose restoration report\n\n");
    let _ = writeln!(
        md,
        "Profile `{}`, seed {}. Ground truth from {} full-dose realisations; {} full-dose and {} reduced-dose \
         realisations per set; {} pixels inside the breast mask.\n",
        super::config::profile_name(cfg.profile),
        cfg.seed,
        cfg.counts.n_gt,
        cfg.counts.n_eval,
        cfg.counts.n_ld_per_gamma,
        summary.mask_pixels
    );
    md.push_str("MNSE values are normalised squared errors ×100. Brackets hold 95 % bootstrap intervals.\n");
    for &g in &cfg.gammas {
        let _ = writeln!(md, "\n## Dose {:.0} %\n", g * 100.0);
        md.push_str("| Method | Total MNSE | R_N | B² | Mean SNR |\n|---|---|---|---|---|\n");
        for r in summary.rows.iter().filter(|r| r.gamma == g) {
            let m = &r.mnse;
            let snr = summary
                .snr
                .iter()
                .find(|s| s.gamma == g && s.method == r.method)
                .map(|s| format!("{:.1} [{:.1}, {:.1}]", s.mean_snr, s.ci.0, s.ci.1))
                .unwrap_or_default();
            let _ = writeln!(
                md,
                "| {} | {} [{}, {}] | {} [{}, {}] | {} [{}, {}] | {} |",
                r.method.to_uppercase(),
                pct(m.total),
                pct(m.ci_total.0),
                pct(m.ci_total.1),
                pct(m.rn),
                pct(m.ci_rn.0),
                pct(m.ci_rn.1),
                pct(m.b2),
                pct(m.ci_b2.0),
                pct(m.ci_b2.1),
                snr
            );
        }
    }
    if trend.lines().count() > 1 {
        md.push_str(
            "\n## Loss trends\n\nNetwork losses ordered from lowest to highest (data, not a pass/fail gate).\n\n",
        );
        md.push_str("| Dose | Metric | Order |\n|---|---|---|\n");
        for line in trend.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let _ = writeln!(
                md,
                "| {:.0} % | {} | {} |",
                f[0].parse::<f64>().unwrap_or(0.0) * 100.0,
                f[1],
                f[2]
            );
        }
    }
    md.push_str("\n## Images\n\n");
    let ranges: Vec<String> = summary
        .snr_display
        .iter()
        .map(|(g, lo, hi)| format!("{:.0} %: {lo:.1}–{hi:.1}", g * 100.0))
        .collect();
    let _ = writeln!(
        md,
        "SNR maps in `eval/snr/`, display windows by dose {}. Crops around each microcalcification cluster: `eval/roi/`.",
        ranges.join(", ")
    );
    for (c, _) in cfg.phantom.mc_clusters.iter().enumerate() {
        let _ = writeln!(md, "\n![cluster {c} ground truth](../eval/roi/c{c}_gt.png)");
    }
    store.write(REPORT_MD, md.as_bytes())?;
    Ok(vec![REPORT_MD.into(), TREND_CSV.into()])
}

#[derive(Serialize)]
struct Lineage<'a> {
    config: &'a str,
    stages: &'a [StageRecord],
}

pub(super) fn write_lineage(store: &Store, nodes: &[StageRecord]) -> Result<()> {
    let json = serde_json::to_string_pretty(&Lineage {
        config: CONFIG_FILE,
        stages: nodes,
    })
    .map_err(|e| Error::Invariant(e.to_string()))?;
    store.write(LINEAGE_JSON, json.as_bytes())
}
