//! Acceptance suite. Each criterion runs in isolation (a panic counts as a
//! failure), prints one PASS/FAIL line with its measurements, and the test
//! fails at the end if any criterion is red.
//!
//! Expected values come from the noise model and closed forms computed here,
//! not from the library under test.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lowdose::dosesim::{simulate_low_dose, DoseDomain, DoseSimConfig};
use lowdose::image::load_raw;
use lowdose::losses::{load_extractor, write_random_vgg, Loss, LossKind};
use lowdose::mb::{dose_rescale, exact_unbiased_inverse_scalar, gat_forward, mb_restore, MbConfig};
use lowdose::metrics::{estimate_gt, evaluate_mnse, gt_protocol, BootstrapConfig};
use lowdose::nn::{build_hresnet, HResNet, Mode, NetworkSpec, Tape, Tensor, Var};
use lowdose::phantom::{acquire, generate_phantom, NoiseFreeImage, PhantomSpec};
use lowdose::pipeline::{run_pipeline, ExperimentConfig, Method, Profile, LINEAGE_JSON, METRICS_CSV};
use lowdose::{BreastMask, NoiseParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Bypasses the harness capture so the lines appear in plain `cargo test`.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run_criterion(id: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> (bool, String) {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f));
    let elapsed = t0.elapsed();
    let (mut pass, mut detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, format!("panicked: {msg}"))
        }
    };
    if let Some(b) = budget {
        if elapsed > b {
            pass = false;
            detail.push_str(&format!("; over runtime budget {:.0} s", b.as_secs_f64()));
        }
    }
    let line = format!(
        "criterion {id:>2} {:<4} {name} [{:.1} s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    emit(&line);
    (pass, line)
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(|x| &x[..]).collect()
}

fn no_bootstrap() -> BootstrapConfig {
    BootstrapConfig {
        resamples: 0,
        ..Default::default()
    }
}

fn detector() -> NoiseParams {
    NoiseParams::new(5.0, 4.0, 50.0)
}

// ---------------------------------------------------------------- 1

fn noise_model_fidelity() -> Outcome {
    let p = detector();
    let signal = 1000.0;
    let y = NoiseFreeImage::constant(10, 10, signal, p.tau);
    let npix = 100;
    let reps = 10_000usize;
    let mut ok = true;
    let mut parts = Vec::new();
    for (gi, &g) in [1.0, 0.75, 0.5].iter().enumerate() {
        let mut sum = vec![0.0f64; npix];
        let mut sq = vec![0.0f64; npix];
        for r in 0..reps {
            let img = acquire(&y, &p, g, 1_000_000 * (gi as u64 + 1) + r as u64).unwrap();
            for (i, &v) in img.pixels.iter().enumerate() {
                let v = v as f64;
                sum[i] += v;
                sq[i] += v * v;
            }
        }
        let n = reps as f64;
        let mut mean = 0.0;
        let mut var = 0.0;
        for i in 0..npix {
            let m = sum[i] / n;
            mean += m;
            var += (sq[i] - n * m * m) / (n - 1.0);
        }
        mean /= npix as f64;
        var /= npix as f64;
        let want_mean = g * signal + p.tau;
        let want_var = g * p.lambda * signal + p.sigma_e2;
        let em = (mean - want_mean).abs() / want_mean;
        let ev = (var - want_var).abs() / want_var;
        ok &= em < 0.002 && ev < 0.02;
        parts.push(format!(
            "γ={g}: mean err {:.4}%, var err {:.3}%",
            100.0 * em,
            100.0 * ev
        ));
    }
    outcome(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 2

/// Two-sample Kolmogorov–Smirnov statistic; handles ties by advancing both
/// samples past each distinct value before comparing the ECDFs.
fn ks_statistic(a: &[u16], b: &[u16]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn simulation_equivalence() -> Outcome {
    let p = detector();
    let (w, h) = (500, 200);
    let n = (w * h) as f64;
    let y = NoiseFreeImage::constant(w, h, 1000.0, p.tau);
    // c(0.01) = sqrt(-ln(0.005)/2)
    let crit = (-(0.005f64).ln() / 2.0).sqrt() * (2.0 / n).sqrt();
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, &g) in [0.75, 0.5].iter().enumerate() {
        for (m, domain) in [DoseDomain::Direct, DoseDomain::Vst].into_iter().enumerate() {
            let base = 10 * (k as u64 * 2 + m as u64);
            let fd = acquire(&y, &p, 1.0, 7_000 + base).unwrap();
            let sim = simulate_low_dose(
                &fd,
                &DoseSimConfig {
                    gamma: g,
                    params: p,
                    domain,
                    seed: 7_001 + base,
                },
            )
            .unwrap();
            let real = acquire(&y, &p, g, 7_002 + base).unwrap();
            let d = ks_statistic(&sim.pixels, &real.pixels);
            ok &= d < crit;
            parts.push(format!("γ={g} {domain:?}: D={d:.5}"));
        }
    }
    outcome(ok, format!("critical D={crit:.5}; {}", parts.join(", ")))
}

// ---------------------------------------------------------------- 3

fn gat_suite() -> Outcome {
    let p = detector();
    let (w, h) = (320, 320);
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, &t) in [100.0, 250.0, 500.0, 1000.0, 2000.0].iter().enumerate() {
        let signal = t * p.lambda;
        let y = NoiseFreeImage::constant(w, h, signal, p.tau);
        let x: Vec<f64> = acquire(&y, &p, 1.0, 9_000 + k as u64)
            .unwrap()
            .pixels
            .iter()
            .map(|&v| v as f64)
            .collect();
        let d = gat_forward(&x, &p);
        let n = d.len() as f64;
        let md = d.iter().sum::<f64>() / n;
        let vd = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / (n - 1.0);
        let var_ok = (0.9..=1.1).contains(&vd);
        let est = exact_unbiased_inverse_scalar(md, &p);
        let bias = (est - (signal + p.tau)).abs() / signal;
        let bias_ok = md < 20.0 || bias < 0.005;
        ok &= var_ok && bias_ok;
        parts.push(format!("{t}λ: var {vd:.4}, E[d] {md:.2}, bias {:.4}%", 100.0 * bias));
    }
    outcome(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 4

fn mnse_identity() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 1000,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let worst = std::cell::Cell::new(0.0f64);
    let strategy = (
        any::<u64>(),
        2usize..12,
        2usize..12,
        2usize..7,
        2usize..7,
        0.0f64..4.0,
        0.0f64..0.5,
    );
    let result = runner.run(&strategy, |(seed, w, h, p, n, log_level, rel_noise)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let npix = w * h;
        let base: Vec<f64> = (0..npix)
            .map(|_| 2.0 + 10f64.powf(log_level) * rng.random::<f64>())
            .collect();
        let mut bits: Vec<bool> = (0..npix).map(|_| rng.random::<f64>() < 0.8).collect();
        bits[rng.random_range(0..npix)] = true;
        let mask = BreastMask::new(w, h, bits).unwrap();
        let draw = |rng: &mut ChaCha8Rng, gain: f64| -> Vec<f64> {
            base.iter()
                .map(|&b| (b * gain * (1.0 + rel_noise * (rng.random::<f64>() - 0.5))).max(1.5))
                .collect()
        };
        let pool: Vec<Vec<f64>> = (0..n).map(|_| draw(&mut rng, 1.0)).collect();
        let gain = 0.5 + rng.random::<f64>();
        let eval: Vec<Vec<f64>> = (0..p).map(|_| draw(&mut rng, gain)).collect();
        let gt = estimate_gt(&refs(&pool), &mask).unwrap();
        let r = evaluate_mnse(&refs(&eval), &gt, &mask, &no_bootstrap()).unwrap();
        let scale = r.total.abs().max(r.b2.abs() + r.rn.abs());
        let rel = (r.total - (r.b2 + r.rn)).abs() / scale.max(f64::MIN_POSITIVE);
        worst.set(worst.get().max(rel));
        prop_assert!(rel <= 1e-12, "relative gap {rel:e}");
        Ok(())
    });
    match result {
        Ok(()) => outcome(true, format!("1000 cases, worst relative gap {:.2e}", worst.get())),
        Err(e) => outcome(false, format!("{e}")),
    }
}

// ---------------------------------------------------------------- 5

fn rn_dose_ratio() -> Outcome {
    let p = NoiseParams::new(5.0, 0.0, 50.0);
    let y = generate_phantom(&PhantomSpec::default_with_seed(31)).unwrap();
    let mask = &y.support;
    let shots = |g: f64, count: u64, seed0: u64| -> Vec<Vec<f64>> {
        (0..count)
            .map(|i| dose_rescale(&acquire(&y, &p, g, seed0 + i).unwrap()))
            .collect()
    };
    let pool = shots(1.0, 10, 100);
    let sets = [shots(1.0, 5, 200), shots(0.75, 5, 300), shots(0.5, 5, 400)];
    let set_refs: Vec<Vec<&[f64]>> = sets.iter().map(|s| refs(s)).collect();
    let cal = gt_protocol(&refs(&pool), &set_refs, mask).unwrap();
    let rn: Vec<f64> = cal
        .sets
        .iter()
        .map(|s| evaluate_mnse(&refs(s), &cal.gt, mask, &no_bootstrap()).unwrap().rn)
        .collect();
    let r50 = rn[2] / rn[0];
    let r75 = rn[1] / rn[0];
    let ok = (r50 / 2.0 - 1.0).abs() <= 0.05 && (r75 / (4.0 / 3.0) - 1.0).abs() <= 0.05;
    outcome(
        ok,
        format!(
            "R_N(1)={:.4}, R_N(0.75)/R_N(1)={r75:.4} (want 1.3333), R_N(0.5)/R_N(1)={r50:.4} (want 2)",
            rn[0]
        ),
    )
}

// ---------------------------------------------------------------- 6

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller keeps this independent of the crate's own sampler.
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks a graph `build(tape, leaves) -> output` through the projection
/// `Σ r·y` with fixed random `r`. Returns the max relative error over every
/// entry of every leaf.
fn check_layer<F>(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars);
    let r = randn(rng, tape.value(y).shape());
    let proj = |t: &Tensor<f64>| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let value = proj(tape.value(y));
    let root = tape.reduce(y, value, r.clone()).unwrap();
    let grads = tape.backward(root).unwrap();
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let o = build(&mut t, &vs);
        proj(t.value(o))
    };
    let mut worst = 0.0f64;
    for (k, inp) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient");
        for i in 0..inp.numel() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += FD_STEP;
            let plus = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * FD_STEP;
            let minus = eval(&xs);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Checks `Loss::eval`'s gradient with respect to the prediction on up to
/// `budget` randomly chosen entries. Returns the max relative error and the
/// number of entries whose difference interval had to be shrunk.
///
/// ReLUs inside the perceptual extractor put kinks arbitrarily close to any
/// input, so a central difference can straddle one. Estimates at `h` and
/// `h/2` agree on a smooth interval; when they do not, the step is reduced.
fn check_loss(loss: &Loss, xhat: &Tensor<f64>, x: &Tensor<f64>, rng: &mut ChaCha8Rng, budget: usize) -> (f64, usize) {
    let (_, grad) = loss.eval(xhat, x).unwrap();
    let scale = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let n = xhat.numel();
    let coords: Vec<usize> = if n <= budget {
        (0..n).collect()
    } else {
        (0..budget).map(|_| rng.random_range(0..n)).collect()
    };
    let central = |i: usize, h: f64| {
        let mut p = xhat.clone();
        p.data_mut()[i] += h;
        let plus = loss.eval(&p, x).unwrap().0;
        p.data_mut()[i] -= 2.0 * h;
        let minus = loss.eval(&p, x).unwrap().0;
        (plus - minus) / (2.0 * h)
    };
    let mut worst = 0.0f64;
    let mut shrunk = 0;
    for i in coords {
        let mut numeric = f64::NAN;
        for (k, h) in [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0].into_iter().enumerate() {
            let (d1, d2) = (central(i, h), central(i, h / 2.0));
            numeric = d2;
            if (d1 - d2).abs() <= 1e-5 * d1.abs().max(d2.abs()).max(1e-3 * scale) {
                shrunk += usize::from(k > 0);
                break;
            }
        }
        worst = worst.max(rel_err(grad.data()[i], numeric));
    }
    (worst, shrunk)
}

fn gradient_correctness() -> Outcome {
    const SHAPES: usize = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ead);
    let mut layer_worst: Vec<(&str, f64)> = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let (n, ci, co) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let (h, w) = (rng.random_range(k..8), rng.random_range(k..8));
        let inputs = [
            randn(&mut rng, &[n, ci, h, w]),
            randn(&mut rng, &[co, ci, k, k]),
            randn(&mut rng, &[co]),
        ];
        worst = worst.max(check_layer(&inputs, &mut rng, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap()
        }));
    }
    layer_worst.push(("conv2d", worst));

    let bn_shape = |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(2..4),
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..6),
        ]
    };
    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let s = bn_shape(&mut rng);
        let inputs = [randn(&mut rng, &s), randn(&mut rng, &[s[1]]), randn(&mut rng, &[s[1]])];
        worst = worst.max(check_layer(&inputs, &mut rng, |t, v| {
            t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0
        }));
    }
    layer_worst.push(("batchnorm(train)", worst));

    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let s = bn_shape(&mut rng);
        let inputs = [randn(&mut rng, &s), randn(&mut rng, &[s[1]]), randn(&mut rng, &[s[1]])];
        let mean: Vec<f64> = (0..s[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..s[1]).map(|_| rng.random_range(0.2..2.0)).collect();
        worst = worst.max(check_layer(&inputs, &mut rng, |t, v| {
            t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap()
        }));
    }
    layer_worst.push(("batchnorm(eval)", worst));

    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let s = bn_shape(&mut rng);
        let mut x = randn(&mut rng, &s);
        // Keep inputs clear of the kink at 0.
        for v in x.data_mut() {
            if v.abs() < 1e-2 {
                *v += 2e-2f64.copysign(*v);
            }
        }
        worst = worst.max(check_layer(&[x], &mut rng, |t, v| t.relu(v[0])));
    }
    layer_worst.push(("relu", worst));

    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let s = bn_shape(&mut rng);
        let inputs = [randn(&mut rng, &s), randn(&mut rng, &s)];
        worst = worst.max(check_layer(&inputs, &mut rng, |t, v| t.add(v[0], v[1]).unwrap()));
    }
    layer_worst.push(("add", worst));

    let mut worst = 0.0f64;
    for _ in 0..SHAPES {
        let s = [
            rng.random_range(1..3),
            rng.random_range(1..4),
            2 * rng.random_range(1..4),
            2 * rng.random_range(1..4),
        ];
        let x = randn(&mut rng, &s);
        worst = worst.max(check_layer(&[x], &mut rng, |t, v| t.max_pool2(v[0]).unwrap()));
    }
    layer_worst.push(("max_pool2", worst));

    let mut worst = 0.0f64;
    let (mean, std) = ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]);
    for _ in 0..SHAPES {
        let s = [
            rng.random_range(1..3),
            1,
            rng.random_range(1..6),
            rng.random_range(1..6),
        ];
        let x = randn(&mut rng, &s);
        worst = worst.max(check_layer(&[x], &mut rng, |t, v| {
            t.gray_to_rgb(v[0], mean, std).unwrap()
        }));
    }
    layer_worst.push(("gray_to_rgb", worst));

    let dir = tempfile::tempdir().unwrap();
    let vgg = dir.path().join("extractor.vgg");
    write_random_vgg(&vgg, [8, 16, 32, 64], 16, mean, std).unwrap();
    let mut loss_worst: Vec<(&str, f64)> = Vec::new();
    let mut shrunk = 0;
    for kind in LossKind::ALL {
        let extractor = kind
            .perceptual_tap()
            .map(|(tap, no_pool)| Arc::new(load_extractor(&vgg, tap, no_pool).unwrap()));
        let loss = Loss::new(kind, extractor).unwrap();
        let mut worst = 0.0f64;
        for _ in 0..SHAPES {
            let (lo, hi) = match kind {
                LossKind::Mse | LossKind::Mae => (2, 10),
                LossKind::Ssim => (11, 16),
                _ => (8, 14),
            };
            let s = [
                rng.random_range(1..3),
                1,
                rng.random_range(lo..hi),
                rng.random_range(lo..hi),
            ];
            let x = Tensor::new(
                s.to_vec(),
                (0..s.iter().product()).map(|_| rng.random::<f64>()).collect(),
            )
            .unwrap();
            let mut xhat = x.clone();
            for v in xhat.data_mut() {
                // Offsets of at least 0.05 keep MAE away from its kinks.
                let d = rng.random_range(0.05..0.2);
                *v += if rng.random_bool(0.5) { d } else { -d };
            }
            let budget = if matches!(kind, LossKind::Mse | LossKind::Mae) {
                usize::MAX
            } else {
                48
            };
            let (e, s) = check_loss(&loss, &xhat, &x, &mut rng, budget);
            worst = worst.max(e);
            shrunk += s;
        }
        loss_worst.push((kind.name(), worst));
    }

    let layers_ok = layer_worst.iter().all(|(_, e)| *e < 1e-4);
    let losses_ok = loss_worst.iter().all(|(_, e)| *e < 1e-3);
    let fmt = |v: &[(&str, f64)]| {
        v.iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    outcome(
        layers_ok && losses_ok,
        format!(
            "{SHAPES} shapes each; layers: {}; losses: {} ({shrunk} loss entries needed a smaller step to clear a kink)",
            fmt(&layer_worst),
            fmt(&loss_worst)
        ),
    )
}

// ---------------------------------------------------------------- 7

fn hresnet_structure() -> Outcome {
    let spec = NetworkSpec::default();
    let (f, k) = (spec.n_filters, spec.kernel * spec.kernel);
    // conv0 + residual blocks (two convs and two BNs each) + final conv.
    let formula = (f * k + f) + spec.n_res_blocks * 2 * (f * f * k + f) + spec.n_res_blocks * 2 * 2 * f + (f * k + 1);
    let net: HResNet<f32> = build_hresnet(&spec, 11).unwrap();
    let count_ok = net.param_count() == formula && formula == 297_665 && spec.param_count() == formula;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Tensor::new(vec![1, 1, 64, 64], (0..64 * 64).map(|_| rng.random::<f32>()).collect()).unwrap();
    let mut zeroed = net.clone();
    zeroed.zero_final();
    zeroed.set_mode(Mode::Eval);
    let exact = zeroed.infer(&x).unwrap().data() == x.data();

    let mut worst = 0.0f32;
    for seed in 0..5 {
        let mut n: HResNet<f32> = build_hresnet(&spec, 100 + seed).unwrap();
        n.set_mode(Mode::Eval);
        let y = n.infer(&x).unwrap();
        let dev = y
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        worst = worst.max(dev);
    }
    let near_ok = worst < 1e-2;
    outcome(
        count_ok && exact && near_ok,
        format!(
            "params {} (formula {formula}), zeroed-final identity exact: {exact}, max |f(x)-x| over 5 inits {worst:.2e} (init variance {:e})",
            net.param_count(),
            spec.init_variance
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

#[derive(Clone, Copy, Debug)]
struct Row {
    total: f64,
    rn: f64,
    b2: f64,
}

fn read_metrics(dir: &Path) -> Vec<(f64, String, Row)> {
    let text = std::fs::read_to_string(dir.join(METRICS_CSV)).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f[i].parse::<f64>().unwrap();
            (
                num(0),
                f[1].to_string(),
                Row {
                    total: num(2),
                    rn: num(3),
                    b2: num(4),
                },
            )
        })
        .collect()
}

fn row(rows: &[(f64, String, Row)], gamma: f64, method: &str) -> Row {
    rows.iter()
        .find(|(g, m, _)| *g == gamma && m == method)
        .unwrap_or_else(|| panic!("no metrics row for {method} at {gamma}"))
        .2
}

struct DeskRun {
    dir: tempfile::TempDir,
    rows: Vec<(f64, String, Row)>,
    elapsed: Duration,
}

fn desk_run() -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset(Profile::Desk);
    cfg.output_dir = dir.path().to_path_buf();
    cfg.gammas = vec![0.5];
    cfg.losses = vec![LossKind::Mse];
    cfg.methods = vec![Method::Dnn, Method::Mb];
    let t0 = Instant::now();
    run_pipeline(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let rows = read_metrics(dir.path());
    DeskRun { dir, rows, elapsed }
}

fn restoration_efficacy(run: &DeskRun) -> Outcome {
    let cfg = ExperimentConfig::preset(Profile::Desk);
    let ld = row(&run.rows, 0.5, "ld");
    let dnn = row(&run.rows, 0.5, "dnn-mse");
    let ok = dnn.total < ld.total && dnn.rn < ld.rn && dnn.b2 > ld.b2 && run.elapsed < Duration::from_secs(30 * 60);
    outcome(
        ok,
        format!(
            "{} patches {}x{}, {} epochs; LD total/R_N/B² {:.4}/{:.4}/{:.4}, DNN {:.4}/{:.4}/{:.4}; pipeline {:.0} s",
            cfg.data.patch_count,
            cfg.data.patch_size,
            cfg.data.patch_size,
            cfg.train.epochs,
            ld.total,
            ld.rn,
            ld.b2,
            dnn.total,
            dnn.rn,
            dnn.b2,
            run.elapsed.as_secs_f64()
        ),
    )
}

/// Percent figures in the reference results are MNSE × 100 at a detector
/// whose full-dose R_N is 10.49 %; B² < 1 % is applied relative to the
/// full-dose R_N so it does not depend on the simulated detector gain.
const REFERENCE_FD_RN: f64 = 0.1049;

fn mb_benchmark(run: &DeskRun) -> Outcome {
    let cfg = ExperimentConfig::preset(Profile::Desk);
    let fd = row(&run.rows, 0.5, "fd");
    let mb = row(&run.rows, 0.5, "mb");
    let rn_ratio = mb.rn / fd.rn;
    let b2_rel = mb.b2 / fd.rn;
    let b2_bound = 0.01 / REFERENCE_FD_RN;

    // Time the restoration on its own, from the same stored acquisitions.
    let lds: Vec<_> = (0..cfg.counts.n_ld_per_gamma)
        .map(|i| load_raw(run.dir.path().join(format!("acq/g050/ld_{i:02}.raw"))).unwrap())
        .collect();
    let t0 = Instant::now();
    for ld in &lds {
        mb_restore(ld, &MbConfig::new(cfg.noise, 0.5)).unwrap();
    }
    let mb_time = t0.elapsed();

    let ok = (rn_ratio - 1.0).abs() <= 0.2 && b2_rel < b2_bound && mb_time < Duration::from_secs(300);
    outcome(
        ok,
        format!(
            "R_N MB/FD {rn_ratio:.3} ({:.4}/{:.4}); B²/R_N(FD) {:.2}% (bound {:.2}%, i.e. B² < 1% at R_N(FD) = 10.49%); {} restorations in {:.1} s",
            mb.rn,
            fd.rn,
            100.0 * b2_rel,
            100.0 * b2_bound,
            lds.len(),
            mb_time.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn small_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Profile::Desk);
    cfg.output_dir = dir.to_path_buf();
    cfg.seed = seed;
    cfg.phantom = PhantomSpec::sized(128, 128, 7);
    cfg.counts.n_gt = 4;
    cfg.counts.n_eval = 3;
    cfg.counts.n_ld_per_gamma = 3;
    cfg.data.n_phantoms = 2;
    cfg.data.patch_count = 48;
    cfg.data.patch_size = 16;
    cfg.train.epochs = 1;
    cfg.train.halve_every = 1;
    cfg.train.batch = 8;
    cfg.evaluation.bootstrap.resamples = 50;
    cfg.evaluation.roi_size = 32;
    cfg.evaluation.infer_tile = 64;
    cfg
}

const ARTIFACTS: [&str; 4] = [
    "eval/metrics.csv",
    "eval/snr.csv",
    "report/trend.csv",
    "report/report.md",
];

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(a.path(), 5)).unwrap();
    run_pipeline(&small_config(b.path(), 5)).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let identical = ARTIFACTS.iter().all(|f| read(a.path(), f) == read(b.path(), f));

    // A rerun in place must find every stage current and change nothing.
    let before: Vec<Vec<u8>> = ARTIFACTS.iter().map(|f| read(a.path(), f)).collect();
    let rerun = run_pipeline(&small_config(a.path(), 5)).unwrap();
    let idempotent = rerun.executed.is_empty()
        && ARTIFACTS.iter().zip(&before).all(|(f, v)| read(a.path(), f) == *v)
        && a.path().join(LINEAGE_JSON).exists();

    // Guard against a vacuous comparison: another seed must change the metrics.
    run_pipeline(&small_config(c.path(), 6)).unwrap();
    let sensitive = read(a.path(), METRICS_CSV) != read(c.path(), METRICS_CSV);

    outcome(
        identical && idempotent && sensitive,
        format!(
            "two fresh runs byte-identical: {identical}; rerun skipped {} stages, executed {:?}; other seed differs: {sensitive}",
            rerun.skipped.len(),
            rerun.executed
        ),
    )
}

/// Comma-separated criterion numbers to run; all when unset.
const SELECT_ENV: &str = "LOWDOSE_ACCEPTANCE";

#[test]
fn acceptance() {
    let selected: Option<Vec<usize>> = std::env::var(SELECT_ENV)
        .ok()
        .map(|v| v.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: usize| selected.as_ref().is_none_or(|s| s.contains(&id));
    let mut lines = Vec::new();
    let mut all = true;
    let mut record = |r: (bool, String)| {
        all &= r.0;
        lines.push(r.1);
    };
    let secs = Duration::from_secs;
    type Entry = (usize, &'static str, Option<Duration>, fn() -> Outcome);
    let cheap: [Entry; 7] = [
        (1, "noise-model fidelity", Some(secs(30)), noise_model_fidelity),
        (2, "simulation equivalence (KS)", Some(secs(60)), simulation_equivalence),
        (3, "GAT suite", Some(secs(60)), gat_suite),
        (4, "MNSE identity", Some(secs(10)), mnse_identity),
        (5, "R_N dose ratio", Some(secs(120)), rn_dose_ratio),
        (6, "gradient correctness", Some(secs(300)), gradient_correctness),
        (7, "HResNet structure", None, hresnet_structure),
    ];
    for (id, name, budget, f) in cheap {
        if wanted(id) {
            record(run_criterion(id, name, budget, f));
        }
    }

    if wanted(8) || wanted(9) {
        match catch_unwind(desk_run) {
            Ok(run) => {
                record(run_criterion(8, "desk-scale restoration", None, || {
                    restoration_efficacy(&run)
                }));
                record(run_criterion(9, "MB benchmark", None, || mb_benchmark(&run)));
            }
            Err(_) => {
                for (id, name) in [(8, "desk-scale restoration"), (9, "MB benchmark")] {
                    record(run_criterion(id, name, None, || {
                        outcome(false, "desk pipeline run failed")
                    }));
                }
            }
        }
    }
    if wanted(10) {
        record(run_criterion(10, "determinism", None, determinism));
    }

    emit("acceptance summary:");
    for l in &lines {
        emit(&format!("  {l}"));
    }
    assert!(all, "one or more acceptance criteria failed");
}
