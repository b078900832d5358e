//! Generalized Anscombe transform and its exact unbiased inverse.

use crate::image::NoiseParams;

fn electronic_term(p: &NoiseParams) -> f64 {
    p.sigma_e2 / (p.lambda * p.lambda)
}

/// Stabilise one DN value: `2·sqrt(max(0, (x − τ)/λ + 3/8 + σ_e²/λ²))`.
#[inline]
pub fn gat_scalar(x: f64, p: &NoiseParams) -> f64 {
    let t = (x - p.tau) / p.lambda;
    2.0 * (t + 0.375 + electronic_term(p)).max(0.0).sqrt()
}

pub fn gat_forward(x: &[f64], params: &NoiseParams) -> Vec<f64> {
    x.iter().map(|&v| gat_scalar(v, params)).collect()
}

/// Below this stabilised value the asymptotic inverse is not used.
pub fn inverse_threshold(p: &NoiseParams) -> f64 {
    2.0 * (0.375 + electronic_term(p)).sqrt() + 0.5
}

/// Algebraic inverse of [`gat_scalar`], clamped at `x = τ`.
#[inline]
pub fn gat_algebraic_inverse(d: f64, p: &NoiseParams) -> f64 {
    let t = (0.25 * d * d - 0.375 - electronic_term(p)).max(0.0);
    p.lambda * t + p.tau
}

/// Closed-form approximation of the exact unbiased inverse.
#[inline]
pub fn exact_unbiased_inverse_scalar(d: f64, p: &NoiseParams) -> f64 {
    if !(d >= inverse_threshold(p)) {
        return gat_algebraic_inverse(d.max(0.0), p);
    }
    let s = 1.5f64.sqrt();
    let t = 0.25 * d * d + 0.25 * s / d - 1.375 / (d * d) + 0.625 * s / (d * d * d) - 0.125 - electronic_term(p);
    p.lambda * t.max(0.0) + p.tau
}

pub fn gat_exact_unbiased_inverse(d: &[f64], params: &NoiseParams) -> Vec<f64> {
    d.iter().map(|&v| exact_unbiased_inverse_scalar(v, params)).collect()
}
