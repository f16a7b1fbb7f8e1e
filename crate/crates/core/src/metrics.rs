//! Band-averaged PSNR and SSIM, and the spectral angle mapper.
//!
//! The peak value is 1. PSNR of identical cubes is `f64::INFINITY`.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::hsio::HsiCube;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

/// PSNR of each band in dB.
pub fn psnr_per_band(x: &HsiCube, reference: &HsiCube) -> Result<Vec<f64>> {
    x.same_extents(reference)?;
    let bands = x.bands();
    let mut sq = vec![0.0f64; bands];
    for (i, (a, b)) in x.data().iter().zip(reference.data()).enumerate() {
        let d = *a as f64 - *b as f64;
        sq[i % bands] += d * d;
    }
    let n = (x.height() * x.width()) as f64;
    Ok(sq
        .into_iter()
        .map(|s| if s == 0.0 { f64::INFINITY } else { 10.0 * (n / s).log10() })
        .collect())
}

/// Mean of the per-band PSNR values.
pub fn psnr(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    let v = psnr_per_band(x, reference)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of a row-major image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let xx = filter_valid(&prod(x, x), h, w, &k);
    let yy = filter_valid(&prod(y, y), h, w, &k);
    let xy = filter_valid(&prod(x, y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let sx = xx[i] - a * a;
        let sy = yy[i] - b * b;
        let sxy = xy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * sxy + c2)) / ((a * a + b * b + c1) * (sx + sy + c2));
    }
    total / mx.len() as f64
}

/// SSIM of each band (11×11 Gaussian window, σ = 1.5, valid positions only).
pub fn ssim_per_band(x: &HsiCube, reference: &HsiCube) -> Result<Vec<f64>> {
    x.same_extents(reference)?;
    if x.height() < SSIM_WINDOW || x.width() < SSIM_WINDOW {
        return config_err(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.height(),
            x.width()
        ));
    }
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
    Ok((0..x.bands())
        .map(|b| ssim_band(&widen(x.band(b)), &widen(reference.band(b)), x.height(), x.width()))
        .collect())
}

pub fn ssim(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    let v = ssim_per_band(x, reference)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean spectral angle in radians over pixels where both spectra are nonzero.
pub fn sam(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    x.same_extents(reference)?;
    let (mut total, mut count) = (0.0, 0usize);
    for h in 0..x.height() {
        for w in 0..x.width() {
            let (p, q) = (x.spectrum(h, w), reference.spectrum(h, w));
            let (mut dot, mut np, mut nq) = (0.0f64, 0.0f64, 0.0f64);
            for (a, b) in p.iter().zip(q) {
                let (a, b) = (*a as f64, *b as f64);
                dot += a * b;
                np += a * a;
                nq += b * b;
            }
            if np == 0.0 || nq == 0.0 {
                continue;
            }
            total += (dot / (np.sqrt() * nq.sqrt())).clamp(-1.0, 1.0).acos();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("every pixel has a zero spectrum".into()));
    }
    Ok(total / count as f64)
}

pub fn evaluate(x: &HsiCube, reference: &HsiCube) -> Result<MetricsTriple> {
    Ok(MetricsTriple { psnr: psnr(x, reference)?, ssim: ssim(x, reference)?, sam: sam(x, reference)? })
}
