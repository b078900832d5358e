use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seeded};

/// Pairwise summation with a fixed tree, so the result does not depend on
/// thread scheduling.
pub fn psum(v: &[f64]) -> f64 {
    if v.len() <= 256 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        psum(a) + psum(b)
    }
}

pub fn pmean(v: &[f64]) -> f64 {
    psum(v) / v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap intervals for the means of several per-pixel
/// series that share one resampling of the pixel index set. With zero
/// resamples every interval collapses to the point estimate.
pub fn bootstrap_means(series: &[&[f64]], cfg: &BootstrapConfig) -> Vec<(f64, f64)> {
    let n = series.first().map_or(0, |s| s.len());
    if cfg.resamples == 0 || n == 0 {
        return series.iter().map(|s| (pmean(s), pmean(s))).collect();
    }
    let draws: Vec<Vec<f64>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seeded(derive_seed(cfg.seed, r as u64));
            let mut acc = vec![0.0; series.len()];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                for (a, s) in acc.iter_mut().zip(series) {
                    *a += s[i];
                }
            }
            acc.into_iter().map(|a| a / n as f64).collect()
        })
        .collect();
    let alpha = (1.0 - cfg.level) / 2.0;
    (0..series.len())
        .map(|k| {
            let mut v: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            v.sort_by(f64::total_cmp);
            (quantile_sorted(&v, alpha), quantile_sorted(&v, 1.0 - alpha))
        })
        .collect()
}
