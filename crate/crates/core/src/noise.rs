//! Seeded corruption regimes: i.i.d. Gaussian and the complex Cases 1–5.
//!
//! Every draw comes from `ChaCha8Rng`. A stream is addressed by
//! `(seed, purpose, index)`: the generator is built with
//! `seed_from_u64(seed)` and then `set_stream((purpose << 32) | index)`,
//! where `index` is the zero-based band (or a fixed slot for cube-level
//! choices). Evaluation order therefore never changes the result, and the
//! Gaussian part of a case and its sparse part never share draws.
//!
//! σ is given on the 0–255 scale and applied as `σ / 255`. Nothing is
//! clipped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::hsio::HsiCube;

const GAUSS: u64 = 1;
const SIGMA: u64 = 2;
const STRIPE_PICK: u64 = 3;
const STRIPE: u64 = 4;
const DEAD_PICK: u64 = 5;
const DEAD: u64 = 6;
const IMPULSE_PICK: u64 = 7;
const IMPULSE: u64 = 8;
const MIX: u64 = 9;

pub const SIGMA_RANGE: (f64, f64) = (10.0, 70.0);
pub const COLUMN_FRACTION: (f64, f64) = (0.05, 0.15);
pub const STRIPE_AMPLITUDE: (f64, f64) = (0.05, 0.15);
pub const IMPULSE_FRACTION: (f64, f64) = (0.10, 0.70);

/// Generator for one `(seed, purpose, index)` substream.
pub fn stream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (index & 0xffff_ffff));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseRegime {
    IidGaussian { sigma: f64 },
    Case(u8),
}

impl std::fmt::Display for NoiseRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseRegime::IidGaussian { sigma } => write!(f, "gaussian-sigma-{sigma}"),
            NoiseRegime::Case(c) => write!(f, "case-{c}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub regime: NoiseRegime,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, x: &HsiCube) -> Result<(HsiCube, CorruptionReport)> {
        match self.regime {
            NoiseRegime::IidGaussian { sigma } => {
                let y = add_gaussian_iid(x, sigma, self.seed)?;
                let mut report = CorruptionReport::new(self.regime.to_string(), self.seed, x.bands());
                report.sigma = vec![sigma; x.bands()];
                Ok((y, report))
            }
            NoiseRegime::Case(c) => synthesize_case(x, c, self.seed),
        }
    }
}

/// Columns hit by stripe or deadline noise in one band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnCorruption {
    /// 1-based band index.
    pub band: usize,
    pub columns: Vec<usize>,
    pub fraction: f64,
    /// Per-column offsets (stripes only; empty for deadlines).
    pub offsets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseCorruption {
    /// 1-based band index.
    pub band: usize,
    pub probability: f64,
    pub pixels: usize,
    pub fraction: f64,
}

/// What a corruption call did, band by band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub regime: String,
    pub seed: u64,
    pub bands: usize,
    /// Applied Gaussian σ per band on the 0–255 scale (0 where none).
    pub sigma: Vec<f64>,
    pub stripes: Vec<ColumnCorruption>,
    pub deadlines: Vec<ColumnCorruption>,
    pub impulses: Vec<ImpulseCorruption>,
}

impl CorruptionReport {
    pub fn new(regime: impl Into<String>, seed: u64, bands: usize) -> Self {
        CorruptionReport {
            regime: regime.into(),
            seed,
            bands,
            sigma: vec![0.0; bands],
            stripes: Vec::new(),
            deadlines: Vec::new(),
            impulses: Vec::new(),
        }
    }

    pub fn sparse_count(&self) -> usize {
        self.stripes.len() + self.deadlines.len() + self.impulses.len()
    }

    /// 1-based bands carrying any sparse corruption, sorted.
    pub fn sparse_bands(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .stripes
            .iter()
            .map(|c| c.band)
            .chain(self.deadlines.iter().map(|c| c.band))
            .chain(self.impulses.iter().map(|c| c.band))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    fn merge_sparse(&mut self, other: CorruptionReport) {
        self.stripes.extend(other.stripes);
        self.deadlines.extend(other.deadlines);
        self.impulses.extend(other.impulses);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

fn gaussian_band(y: &mut HsiCube, band: usize, sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma / 255.0).expect("finite sigma");
    let mut rng = stream(seed, GAUSS, band as u64);
    let stride = y.bands();
    for v in y.data_mut().iter_mut().skip(band).step_by(stride) {
        *v = (*v as f64 + normal.sample(&mut rng)) as f32;
    }
}

/// `y = x + n`, `n ~ N(0, (σ/255)²)` element-wise.
pub fn add_gaussian_iid(x: &HsiCube, sigma: f64, seed: u64) -> Result<HsiCube> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return config_err(format!("noise sigma must be non-negative, got {sigma}"));
    }
    let mut y = x.clone();
    for b in 0..x.bands() {
        gaussian_band(&mut y, b, sigma, seed);
    }
    Ok(y)
}

/// Case 1: per-band σ_b ~ U[10, 70].
pub fn add_noniid_gaussian(x: &HsiCube, seed: u64) -> (HsiCube, CorruptionReport) {
    let mut y = x.clone();
    let mut report = CorruptionReport::new("case-1", seed, x.bands());
    for b in 0..x.bands() {
        let sigma = stream(seed, SIGMA, b as u64).random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
        report.sigma[b] = sigma;
        gaussian_band(&mut y, b, sigma, seed);
    }
    (y, report)
}

/// Number of bands a sparse corruption hits: a third of the bands, at least one.
pub fn affected_band_count(bands: usize) -> usize {
    (bands / 3).max(1)
}

fn pick_bands(bands: usize, seed: u64, purpose: u64) -> Vec<usize> {
    let mut rng = stream(seed, purpose, 0);
    let mut v = sample(&mut rng, bands, affected_band_count(bands)).into_vec();
    v.sort_unstable();
    v
}

fn pick_columns(width: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let u = rng.random_range(COLUMN_FRACTION.0..=COLUMN_FRACTION.1);
    let lo = ((COLUMN_FRACTION.0 * width as f64).ceil() as usize).max(1);
    let hi = ((COLUMN_FRACTION.1 * width as f64).floor() as usize).max(lo).min(width);
    let count = ((u * width as f64).round() as usize).clamp(lo, hi);
    let mut cols = sample(rng, width, count).into_vec();
    cols.sort_unstable();
    (cols, count as f64 / width as f64)
}

fn stripe_band(y: &mut HsiCube, band: usize, seed: u64) -> ColumnCorruption {
    let mut rng = stream(seed, STRIPE, band as u64);
    let (columns, fraction) = pick_columns(y.width(), &mut rng);
    let offsets: Vec<f64> = columns
        .iter()
        .map(|_| {
            let a = rng.random_range(STRIPE_AMPLITUDE.0..=STRIPE_AMPLITUDE.1);
            if rng.random_bool(0.5) {
                a
            } else {
                -a
            }
        })
        .collect();
    for (&c, &o) in columns.iter().zip(&offsets) {
        for h in 0..y.height() {
            let v = y.get(h, c, band) as f64 + o;
            y.set(h, c, band, v as f32);
        }
    }
    ColumnCorruption { band: band + 1, columns, fraction, offsets }
}

fn deadline_band(y: &mut HsiCube, band: usize, seed: u64) -> ColumnCorruption {
    let mut rng = stream(seed, DEAD, band as u64);
    let (columns, fraction) = pick_columns(y.width(), &mut rng);
    for &c in &columns {
        for h in 0..y.height() {
            y.set(h, c, band, 0.0);
        }
    }
    ColumnCorruption { band: band + 1, columns, fraction, offsets: Vec::new() }
}

fn impulse_band(y: &mut HsiCube, band: usize, seed: u64) -> ImpulseCorruption {
    let mut rng = stream(seed, IMPULSE, band as u64);
    let p = rng.random_range(IMPULSE_FRACTION.0..=IMPULSE_FRACTION.1);
    let area = y.height() * y.width();
    let count = ((p * area as f64).round() as usize).min(area);
    let w = y.width();
    for pix in sample(&mut rng, area, count) {
        let v = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        y.set(pix / w, pix % w, band, v);
    }
    ImpulseCorruption { band: band + 1, probability: p, pixels: count, fraction: count as f64 / area as f64 }
}

/// Column offsets on a third of the bands.
pub fn add_stripes(x: &HsiCube, seed: u64) -> (HsiCube, CorruptionReport) {
    let mut y = x.clone();
    let mut report = CorruptionReport::new("stripes", seed, x.bands());
    for b in pick_bands(x.bands(), seed, STRIPE_PICK) {
        report.stripes.push(stripe_band(&mut y, b, seed));
    }
    (y, report)
}

/// Zeroed columns on a third of the bands.
pub fn add_deadline(x: &HsiCube, seed: u64) -> (HsiCube, CorruptionReport) {
    let mut y = x.clone();
    let mut report = CorruptionReport::new("deadline", seed, x.bands());
    for b in pick_bands(x.bands(), seed, DEAD_PICK) {
        report.deadlines.push(deadline_band(&mut y, b, seed));
    }
    (y, report)
}

/// Salt-and-pepper pixels on a third of the bands.
pub fn add_impulse(x: &HsiCube, seed: u64) -> (HsiCube, CorruptionReport) {
    let mut y = x.clone();
    let mut report = CorruptionReport::new("impulse", seed, x.bands());
    for b in pick_bands(x.bands(), seed, IMPULSE_PICK) {
        report.impulses.push(impulse_band(&mut y, b, seed));
    }
    (y, report)
}

/// Cases 1–4 put Case-1 Gaussian noise under stripes, deadlines or
/// impulses. Case 5 gives every band the Gaussian and then, per band,
/// each sparse type with probability 1/3, forcing one if none fired.
pub fn synthesize_case(x: &HsiCube, case: u8, seed: u64) -> Result<(HsiCube, CorruptionReport)> {
    if !(1..=5).contains(&case) {
        return config_err(format!("noise case must be 1..=5, got {case}"));
    }
    let (g, mut report) = add_noniid_gaussian(x, seed);
    report.regime = format!("case-{case}");
    let y = match case {
        1 => g,
        2..=4 => {
            let (y, sparse) = match case {
                2 => add_stripes(&g, seed),
                3 => add_deadline(&g, seed),
                _ => add_impulse(&g, seed),
            };
            report.merge_sparse(sparse);
            y
        }
        _ => {
            let mut y = g;
            let bands = x.bands();
            let mut plan: Vec<[bool; 3]> = (0..bands)
                .map(|b| {
                    let mut rng = stream(seed, MIX, b as u64);
                    [rng.random_bool(1.0 / 3.0), rng.random_bool(1.0 / 3.0), rng.random_bool(1.0 / 3.0)]
                })
                .collect();
            if plan.iter().all(|p| !p.iter().any(|&on| on)) {
                let mut rng = stream(seed, MIX, u32::MAX as u64);
                let band = rng.random_range(0..bands);
                plan[band][rng.random_range(0..3)] = true;
            }
            for (b, p) in plan.iter().enumerate() {
                if p[0] {
                    report.stripes.push(stripe_band(&mut y, b, seed));
                }
                if p[1] {
                    report.deadlines.push(deadline_band(&mut y, b, seed));
                }
                if p[2] {
                    report.impulses.push(impulse_band(&mut y, b, seed));
                }
            }
            y
        }
    };
    Ok((y, report))
}
