//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! The reference computations here (pooling unfold, windowed SSIM, noise
//! measurement, finite differences) are written out directly rather than
//! reusing the library paths they check.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qrnn3d::cli::gradient_suite;
use qrnn3d::gcs::phi;
use qrnn3d::hsio::{extract_patches, gen_synthetic, Augmentation, HsiCube};
use qrnn3d::metrics::{gaussian_window, psnr, sam, ssim, ssim_per_band};
use qrnn3d::net::{build_network, build_random_network, DirectionScheme, NetworkConfig};
use qrnn3d::noise::{add_noniid_gaussian, synthesize_case};
use qrnn3d::qru::{qru_pool_forward, Direction, PoolingTrace, QruUnit, Sampling, UnitKind, UnitSpec};
use qrnn3d::tensor::{FeatureTensor, Shape};
use qrnn3d::train::{schedule_for_epoch, train, AdamState, NoiseModel, Schedule, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn lib<T>(r: qrnn3d::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: Shape, r: &mut ChaCha8Rng) -> FeatureTensor<f32> {
    FeatureTensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------- 1

fn parameter_counts() -> Check {
    use DirectionScheme::*;
    use UnitKind::*;
    let rows: [(&str, NetworkConfig, f64); 10] = [
        ("QRU3D", NetworkConfig::benchmark(), 0.86),
        ("QRU2D", NetworkConfig::variant(Qru2d, 1.0, Alternating), 0.29),
        ("C3D", NetworkConfig::variant(C3d, 1.0, Alternating), 0.43),
        ("WC3D", NetworkConfig::variant(C3d, 2.0, Alternating), 1.72),
        ("WQRU2D", NetworkConfig::variant(Qru2d, 1.75, Alternating), 0.88),
        ("U", NetworkConfig::variant(Qru3d, 1.0, Unidirectional), 0.86),
        ("B", NetworkConfig::variant(Qru3d, 1.0, Bidirectional), 1.72),
        ("A", NetworkConfig::variant(Qru3d, 1.0, Alternating), 0.86),
        ("width 12", NetworkConfig::variant(Qru3d, 0.75, Alternating), 0.48),
        ("width 20", NetworkConfig::variant(Qru3d, 1.25, Alternating), 1.34),
    ];
    let mut parts = Vec::new();
    for (name, cfg, expected) in rows {
        let m = cfg.param_count() as f64 / 1e6;
        let built = lib(build_network(&cfg, 0))?.param_count() as f64 / 1e6;
        ensure!(built == m, "{name}: built model has {built}M, config says {m}M");
        let rel = (m - expected).abs() / expected;
        ensure!(rel <= 0.02, "{name}: {m:.4}M vs {expected}M ({:.1}% off)", rel * 100.0);
        parts.push(format!("{name} {m:.3}M"));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 2

fn layer_shapes() -> Check {
    let model = lib(build_network(&NetworkConfig::benchmark(), 0))?;
    let expected = [(16, 1), (16, 1), (32, 2), (32, 2), (64, 4), (64, 4), (64, 4), (32, 2), (32, 2), (16, 1), (16, 1), (1, 1)];
    let t = Instant::now();
    for bands in [31, 5, 10] {
        let x = random_tensor(Shape::new(1, 1, 64, 64, bands), &mut rng(bands as u64));
        let out = lib(model.forward(&x, false))?;
        ensure!(out.layer_shapes.len() == 12, "{} layer shapes reported", out.layer_shapes.len());
        for (l, (s, &(c, d))) in out.layer_shapes.iter().zip(&expected).enumerate() {
            let want = Shape::new(1, c, 64 / d, 64 / d, bands);
            ensure!(*s == want, "B={bands} layer {}: {s:?}, expected {want:?}", l + 1);
        }
        ensure!(out.output.shape() == x.shape(), "B={bands}: output {:?}", out.output.shape());
        ensure!(out.output.all_finite(), "B={bands}: non-finite output");
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "three forward passes took {secs:.1} s");
    Ok(format!("12 layer shapes match for B in {{31, 5, 10}}, {secs:.1} s"))
}

// ---------------------------------------------------------------- 3

/// `⟨unit(x), R⟩` in f64, differentiated by central differences on a sample
/// of parameters and compared with the unit's backward pass.
fn independent_fd(spec: UnitSpec, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let unit: QruUnit<f64> = QruUnit::<f32>::he_init(spec, &mut r).cast();
    let x: FeatureTensor<f64> = random_tensor(Shape::new(1, spec.cin, 5, 5, 4), &mut r).cast();
    let (out, trace) = lib(unit.forward_traced(&x))?;
    let weights = FeatureTensor::from_fn(out.shape(), |_| r.random_range(-1.0..1.0));
    let (_, grads) = lib(unit.backward(&trace, &weights))?;
    let objective = |u: &QruUnit<f64>| -> f64 {
        let y = u.forward(&x).expect("forward");
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst: f64 = 0.0;
    let eps = 1e-5;
    for (ti, g) in analytic.iter().enumerate() {
        for _ in 0..12 {
            let k = r.random_range(0..g.len());
            let mut plus = unit.clone();
            plus.params.tensors_mut()[ti][k] += eps;
            let mut minus = unit.clone();
            minus.params.tensors_mut()[ti][k] -= eps;
            let numeric = (objective(&plus) - objective(&minus)) / (2.0 * eps);
            let err = (numeric - g[k]).abs() / numeric.abs().max(g[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let t = Instant::now();
    let reports = lib(gradient_suite(1e-3, 0))?;
    let failed: Vec<_> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, r)| format!("{n} {:.2e}", r.max_rel_error())).collect();
    ensure!(failed.is_empty(), "suite failures: {}", failed.join(", "));
    let worst = reports.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 300.0, "suite took {secs:.0} s");
    let mut own = 0.0f64;
    for (k, (kind, direction, sampling)) in [
        (UnitKind::Qru3d, Direction::Bidirectional, Sampling::Same),
        (UnitKind::Qru3d, Direction::Backward, Sampling::Down),
        (UnitKind::Qru2d, Direction::Forward, Sampling::Same),
        (UnitKind::C3d, Direction::Forward, Sampling::Same),
    ]
    .into_iter()
    .enumerate()
    {
        let spec = UnitSpec { kind, cin: 2, cout: 2, direction, sampling };
        own = own.max(independent_fd(spec, 40 + k as u64)?);
    }
    ensure!(own < 1e-5, "direct finite differences disagree: {own:.2e}");
    Ok(format!("{} checks, max rel {worst:.2e}; direct FD max rel {own:.2e}; {secs:.1} s", reports.len()))
}

// ---------------------------------------------------------------- 4

fn phi_sum() -> Check {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let bands = r.random_range(1..=16);
        let shape = Shape::new(1, r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=4), bands);
        let direction = if trial % 2 == 0 { Direction::Forward } else { Direction::Backward };
        let z = FeatureTensor::<f32>::from_fn(shape, |_| (r.random_range(-3.0f32..3.0)).tanh());
        let f = FeatureTensor::<f32>::from_fn(shape, |_| 1.0 / (1.0 + (-r.random_range(-4.0f32..4.0)).exp()));
        let h = lib(qru_pool_forward(&z, &f, direction))?;
        let trace = PoolingTrace { z: z.clone(), f: f.clone(), h: h.clone(), direction };
        for (row, base) in (0..shape.numel()).step_by(bands).enumerate() {
            let zr = &z.data()[base..base + bands];
            let fr = &f.data()[base..base + bands];
            for j in 0..bands {
                let sources: Vec<usize> = match direction {
                    Direction::Forward => (0..=j).collect(),
                    _ => (j..bands).collect(),
                };
                let mut total = 0.0f64;
                for &i in &sources {
                    let mut term = (1.0 - fr[i] as f64) * zr[i] as f64;
                    let (lo, hi) = if i <= j { (i + 1, j + 1) } else { (j, i) };
                    term *= fr[lo..hi].iter().map(|&v| v as f64).product::<f64>();
                    let lib_term = lib(phi(&trace, i, j))?.data()[row];
                    worst = worst.max((lib_term - term).abs());
                    total += term;
                }
                worst = worst.max((total - h.data()[base + j] as f64).abs());
            }
        }
    }
    ensure!(worst <= 1e-5, "max |sum phi - h| = {worst:.2e}");
    Ok(format!("100 traces, max deviation {worst:.2e}"))
}

// ---------------------------------------------------------------- 5

fn band_diff(a: &FeatureTensor<f32>, b: &FeatureTensor<f32>) -> Vec<f64> {
    let nb = a.shape().bands;
    let mut d = vec![0.0f64; nb];
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        d[i % nb] = d[i % nb].max((x - y).abs() as f64);
    }
    d
}

fn perturb_bands(x: &FeatureTensor<f32>, keep: impl Fn(usize) -> bool, r: &mut ChaCha8Rng) -> FeatureTensor<f32> {
    let nb = x.shape().bands;
    let mut y = x.clone();
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        if !keep(i % nb) {
            *v += r.random_range(0.2f32..0.6);
        }
    }
    y
}

fn causality() -> Check {
    let mut r = rng(5);
    let spec = UnitSpec { kind: UnitKind::Qru3d, cin: 1, cout: 4, direction: Direction::Forward, sampling: Sampling::Same };
    let unit = QruUnit::<f32>::he_init(spec, &mut r);
    let nb = 8;
    let x = random_tensor(Shape::new(1, 1, 6, 6, nb), &mut r);
    let base = lib(unit.forward(&x))?;
    let mut leak: f64 = 0.0;
    for b in 0..nb - 2 {
        let y = perturb_bands(&x, |k| k <= b + 1, &mut r);
        let d = band_diff(&lib(unit.forward(&y))?, &base);
        leak = leak.max(d[..=b].iter().cloned().fold(0.0, f64::max));
    }
    ensure!(leak < 1e-6, "forward unit output moved by {leak:.2e} under later-band changes");

    let second = UnitSpec { cin: 4, direction: Direction::Backward, ..spec };
    let pair = (unit, QruUnit::<f32>::he_init(second, &mut r));
    let pair_fwd = |t: &FeatureTensor<f32>| -> qrnn3d::Result<FeatureTensor<f32>> { pair.1.forward(&pair.0.forward(t)?) };
    let base = lib(pair_fwd(&x))?;
    let mut weakest = f64::INFINITY;
    for i in 0..nb {
        let y = perturb_bands(&x, |k| k != i, &mut r);
        let d = band_diff(&lib(pair_fwd(&y))?, &base);
        weakest = weakest.min(d.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    ensure!(weakest > 0.0, "forward+backward stack: some output band ignores some input band");

    let net = lib(build_random_network(&NetworkConfig::benchmark(), 5))?;
    let nb = 12;
    let x = FeatureTensor::from_fn(Shape::new(1, 1, 8, 8, nb), |_| r.random_range(0.0f32..1.0));
    let base = lib(net.predict(&x))?;
    let mut net_weakest = f64::INFINITY;
    for i in 0..nb {
        let y = perturb_bands(&x, |k| k != i, &mut r);
        let d = band_diff(&lib(net.predict(&y))?, &base);
        net_weakest = net_weakest.min(d.iter().cloned().fold(f64::INFINITY, f64::min));
    }
    ensure!(net_weakest > 0.0, "12-layer network: some output band ignores some input band");
    Ok(format!(
        "forward leak {leak:.1e}; min cross-band response: stack {weakest:.1e}, network {net_weakest:.1e}"
    ))
}

// ---------------------------------------------------------------- 6

struct NoiseTally {
    bands: Vec<usize>,
    column_fractions: Vec<f64>,
    stripe_offsets: Vec<f64>,
    impulse_fractions: Vec<f64>,
}

/// Reads the sparse corruption off `y - g`, with `g` the Gaussian-only cube.
fn measure_sparse(case: u8, g: &HsiCube, y: &HsiCube) -> Result<NoiseTally, String> {
    let (h, w, nb) = (g.height(), g.width(), g.bands());
    let mut tally = NoiseTally { bands: Vec::new(), column_fractions: Vec::new(), stripe_offsets: Vec::new(), impulse_fractions: Vec::new() };
    for b in 0..nb {
        let changed: Vec<(usize, usize)> =
            (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).filter(|&(r, c)| y.get(r, c, b) != g.get(r, c, b)).collect();
        if changed.is_empty() {
            continue;
        }
        tally.bands.push(b);
        match case {
            2 | 3 => {
                let mut cols: Vec<usize> = changed.iter().map(|&(_, c)| c).collect();
                cols.sort_unstable();
                cols.dedup();
                for &c in &cols {
                    let d0 = y.get(0, c, b) as f64 - g.get(0, c, b) as f64;
                    for r in 0..h {
                        let d = y.get(r, c, b) as f64 - g.get(r, c, b) as f64;
                        if case == 2 {
                            ensure!((d - d0).abs() < 1e-5, "band {b} column {c}: stripe offset not constant");
                        } else {
                            ensure!(y.get(r, c, b) == 0.0, "band {b} column {c}: dead column not zero");
                        }
                    }
                    if case == 2 {
                        tally.stripe_offsets.push(d0.abs());
                    }
                }
                tally.column_fractions.push(cols.len() as f64 / w as f64);
            }
            _ => {
                ensure!(
                    changed.iter().all(|&(r, c)| { let v = y.get(r, c, b); v == 0.0 || v == 1.0 }),
                    "band {b}: impulse values outside {{0, 1}}"
                );
                tally.impulse_fractions.push(changed.len() as f64 / (h * w) as f64);
            }
        }
    }
    Ok(tally)
}

fn noise_statistics() -> Check {
    let (mut sig_lo, mut sig_hi, mut worst_sigma_rel) = (f64::INFINITY, 0.0f64, 0.0f64);
    let (mut cols, mut offs, mut imps) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let x = gen_synthetic(64, 64, 31, 100 + seed);
        let (y1, rep1) = lib(synthesize_case(&x, 1, seed))?;
        for b in 0..31 {
            let d: Vec<f64> = x.band(b).iter().zip(y1.band(b)).map(|(a, c)| (c - a) as f64 * 255.0).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            sig_lo = sig_lo.min(rep1.sigma[b]);
            sig_hi = sig_hi.max(rep1.sigma[b]);
            worst_sigma_rel = worst_sigma_rel.max((sd - rep1.sigma[b]).abs() / rep1.sigma[b]);
        }
        let (g, _) = add_noniid_gaussian(&x, seed);
        for case in 2..=4u8 {
            let (y, rep) = lib(synthesize_case(&x, case, seed))?;
            let t = measure_sparse(case, &g, &y)?;
            ensure!(t.bands.len() == 10, "seed {seed} case {case}: {} bands corrupted, expected 10", t.bands.len());
            let reported: Vec<usize> = rep.sparse_bands().iter().map(|b| b - 1).collect();
            ensure!(reported == t.bands, "seed {seed} case {case}: report bands {reported:?} vs measured {:?}", t.bands);
            cols.extend(t.column_fractions);
            offs.extend(t.stripe_offsets);
            imps.extend(t.impulse_fractions);
        }
    }
    let range = |v: &[f64]| (v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(0.0, f64::max));
    let (clo, chi) = range(&cols);
    let (olo, ohi) = range(&offs);
    let (ilo, ihi) = range(&imps);
    ensure!((10.0..=70.0).contains(&sig_lo) && (10.0..=70.0).contains(&sig_hi), "sigma range [{sig_lo}, {sig_hi}]");
    ensure!(worst_sigma_rel < 0.06, "measured sigma off by {:.1}%", worst_sigma_rel * 100.0);
    ensure!(clo >= 0.05 && chi <= 0.15, "column fraction range [{clo:.3}, {chi:.3}]");
    ensure!(olo >= 0.05 - 1e-6 && ohi <= 0.15 + 1e-6, "stripe offset range [{olo:.3}, {ohi:.3}]");
    ensure!(ilo >= 0.10 - 1e-3 && ihi <= 0.70 + 1e-3, "impulse fraction range [{ilo:.3}, {ihi:.3}]");
    Ok(format!(
        "20 seeds: sigma [{sig_lo:.1}, {sig_hi:.1}] (measured within {:.1}%), columns [{clo:.3}, {chi:.3}], impulses [{ilo:.3}, {ihi:.3}]",
        worst_sigma_rel * 100.0
    ))
}

// ---------------------------------------------------------------- 7

/// SSIM evaluated window by window with explicit weighted moments.
fn direct_ssim_band(x: &HsiCube, y: &HsiCube, b: usize) -> f64 {
    let g = gaussian_window();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (x.height(), x.width());
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j] / norm;
                    mx += k * x.get(r + i, c + j, b) as f64;
                    my += k * y.get(r + i, c + j, b) as f64;
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j] / norm;
                    let dx = x.get(r + i, c + j, b) as f64 - mx;
                    let dy = y.get(r + i, c + j, b) as f64 - my;
                    vx += k * dx * dx;
                    vy += k * dy * dy;
                    cxy += k * dx * dy;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn metrics() -> Check {
    let mut r = rng(7);
    let x = HsiCube::from_fn(32, 32, 6, |_, _, _| r.random_range(0.0f32..0.8));
    let shifted = HsiCube::from_fn(32, 32, 6, |h, w, b| x.get(h, w, b) + 0.1);
    let p = lib(psnr(&shifted, &x))?;
    ensure!((p - 20.0).abs() <= 1e-6, "psnr(x, x+0.1) = {p}");
    let s = lib(ssim(&x, &x))?;
    ensure!((s - 1.0).abs() <= 1e-12, "ssim(x, x) = {s}");
    let doubled = HsiCube::from_fn(32, 32, 6, |h, w, b| 2.0 * x.get(h, w, b));
    let a = lib(sam(&doubled, &x))?;
    ensure!(a.abs() <= 1e-6, "sam(2x, x) = {a}");
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut r = rng(70 + seed);
        let a = HsiCube::from_fn(64, 64, 4, |_, _, _| r.random_range(0.0f32..1.0));
        let b = HsiCube::from_fn(64, 64, 4, |h, w, k| (a.get(h, w, k) + r.random_range(-0.2f32..0.2)).clamp(0.0, 1.0));
        let fast = lib(ssim_per_band(&b, &a))?;
        for (k, v) in fast.iter().enumerate() {
            worst = worst.max((v - direct_ssim_band(&b, &a, k)).abs());
        }
    }
    ensure!(worst <= 1e-4, "SSIM differs from the windowed reference by {worst:.2e}");
    Ok(format!("psnr {p:.9}, ssim {s}, sam {a:.1e}, SSIM vs windowed reference {worst:.1e}"))
}

// ---------------------------------------------------------------- 8

fn desk_training() -> Check {
    let scene = gen_synthetic(64, 64, 8, 1);
    let patches = lib(extract_patches(&scene, "train", 16, 6, &Augmentation::none()))?.patches;
    let train_set: Vec<HsiCube> = patches.into_iter().take(64).collect();
    let other = gen_synthetic(64, 64, 8, 2);
    let validation: Vec<HsiCube> = lib(extract_patches(&other, "held-out", 16, 16, &Augmentation::none()))?.patches.into_iter().take(8).collect();
    let mut model = lib(build_network(&NetworkConfig::desk(), 0))?;
    let mut adam = AdamState::for_model(&model);
    let schedule = lib(Schedule::constant(50, NoiseModel::Fixed { sigma: 25.0 }, 1e-3, 16))?;
    let options = TrainOptions { seed: 0, max_steps: Some(200), validation, ..Default::default() };
    let t = Instant::now();
    let log = lib(train(&mut model, &mut adam, &train_set, &schedule, &options))?;
    let secs = t.elapsed().as_secs_f64();
    let first = log.records.first().ok_or("no epochs recorded")?;
    let last = log.records.last().ok_or("no epochs recorded")?;
    let ratio = last.mean_loss / first.mean_loss;
    let gain = last.val_psnr.unwrap_or(f64::NAN) - last.val_noisy_psnr.unwrap_or(f64::NAN);
    ensure!(log.total_steps() <= 200, "{} steps taken", log.total_steps());
    ensure!(ratio < 0.5, "loss ratio {ratio:.3}");
    ensure!(gain >= 3.0, "validation gain {gain:.2} dB");
    Ok(format!("{} steps, loss ratio {ratio:.3}, gain {gain:.2} dB, {secs:.0} s", log.total_steps()))
}

// ---------------------------------------------------------------- 9

fn schedule_table() -> Check {
    let s = Schedule::incremental();
    let blind = NoiseModel::Blind { lo: 30.0, hi: 70.0 };
    let complex = NoiseModel::Complex { cases: vec![1, 2, 3, 4] };
    let fixed = NoiseModel::Fixed { sigma: 50.0 };
    let rows: [(std::ops::Range<usize>, u8, f64, usize, &NoiseModel); 8] = [
        (0..20, 1, 1e-3, 16, &fixed),
        (20..30, 1, 1e-4, 16, &fixed),
        (30..35, 2, 1e-3, 64, &blind),
        (35..45, 2, 1e-4, 64, &blind),
        (45..50, 2, 1e-5, 64, &blind),
        (50..85, 3, 1e-3, 64, &complex),
        (85..95, 3, 1e-4, 64, &complex),
        (95..100, 3, 1e-5, 64, &complex),
    ];
    let mut cells = 0;
    for (epochs, stage, lr, batch, noise) in rows {
        for e in epochs {
            let got = lib(s.at(e))?;
            ensure!(lib(schedule_for_epoch(e))? == *got, "epoch {e}: schedule_for_epoch disagrees with the schedule");
            ensure!(got.stage == stage, "epoch {e}: stage {}", got.stage);
            ensure!(got.lr == lr, "epoch {e}: lr {}", got.lr);
            ensure!(got.batch_size == batch, "epoch {e}: batch {}", got.batch_size);
            ensure!(&got.noise == noise, "epoch {e}: noise {:?}", got.noise);
            cells += 4;
        }
    }
    ensure!(s.total_epochs() == 100, "schedule ends at {}", s.total_epochs());
    ensure!(s.at(100).is_err() && schedule_for_epoch(100).is_err(), "epoch 100 should be outside the schedule");
    ensure!(s.stage_ends() == vec![30, 50, 100], "stage ends {:?}", s.stage_ends());
    Ok(format!("{cells} cells over 100 epochs, stage ends {:?}", s.stage_ends()))
}

// ---------------------------------------------------------------- 10

const RUN_CONFIG: &str = r#"seed = 3

[model]
preset = "desk"

[data]
synthetic_scenes = 1
synthetic_extent = [32, 32, 8]
patch_size = 16
patch_stride = 8
validation = 2

[train]
schedule = { kind = "constant", epochs = 2, lr = 1e-3, batch_size = 4, noise = { kind = "fixed", sigma = 25.0 } }
"#;

fn run_workflow(dir: &Path, threads: &str) -> Result<(), String> {
    fs::write(dir.join("run.toml"), RUN_CONFIG).map_err(|e| e.to_string())?;
    let steps: [&[&str]; 6] = [
        &["gen-synthetic", "--height", "32", "--width", "32", "--bands", "12", "--seed", "9", "clean.hsi"],
        &["add-noise", "--case", "5", "--seed", "7", "clean.hsi", "noisy.hsi"],
        &["train", "--config", "run.toml", "--out", "run"],
        &["denoise", "--weights", "run/epoch-002.q3dw", "noisy.hsi", "denoised.hsi"],
        &["eval", "--reference", "clean.hsi", "--estimate", "noisy=noisy.hsi", "--estimate", "qrnn3d=denoised.hsi", "--out", "eval.csv"],
        &["gcs", "--weights", "run/epoch-002.q3dw", "--out", "gcs", "noisy.hsi"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_qrnn3d"))
            .args(args)
            .current_dir(dir)
            .env("QRNN3D_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(out.status.success(), "{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr));
    }
    Ok(())
}

fn snapshot(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).expect("under root").display().to_string();
                files.insert(rel, fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn cli_determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_workflow(a.path(), "1")?;
    run_workflow(b.path(), "3")?;
    let (sa, sb) = (snapshot(a.path())?, snapshot(b.path())?);
    ensure!(sa.keys().eq(sb.keys()), "file sets differ: {:?} vs {:?}", sa.keys(), sb.keys());
    for (name, bytes) in &sa {
        ensure!(sb[name] == *bytes, "{name} differs between runs");
    }
    for needed in ["noisy.hsi.report.json", "run/train_log.csv", "eval.csv", "gcs.csv", "gcs.pgm", "denoised.hsi.meta.json"] {
        ensure!(sa.contains_key(needed), "{needed} was not written");
    }
    Ok(format!("{} files identical across two runs (1 and 3 threads)", sa.len()))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter counts", parameter_counts),
        ("layer output shapes", layer_shapes),
        ("gradient checks", gradient_checks),
        ("pooling unfold", phi_sum),
        ("spectral causality", causality),
        ("noise statistics", noise_statistics),
        ("quality metrics", metrics),
        ("desk training", desk_training),
        ("training schedule", schedule_table),
        ("cli determinism", cli_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let started = Instant::now();
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = Duration::as_secs_f64(&t.elapsed());
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name:<20} {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name:<20} {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{failures} failing, {:.0} s total", started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
