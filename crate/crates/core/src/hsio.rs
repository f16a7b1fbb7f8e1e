//! Hyperspectral cube container, the `HSI1` file format, patch extraction
//! with augmentation, normalisation and a synthetic scene generator.
//!
//! `HSI1` layout (little-endian): magic `b"HSI1"`, version `u16` (= 1),
//! height, width, bands as `u32`, then `height·width·bands` `f32` values in
//! row-major order with band fastest.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::{FeatureTensor, Shape};

pub const HSI_MAGIC: &[u8; 4] = b"HSI1";
pub const HSI_VERSION: u16 = 1;
pub const HSI_HEADER_LEN: usize = 4 + 2 + 12;

/// One hyperspectral image, `height × width × bands`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return dim_err(format!("cube extents must be positive, got {height}x{width}x{bands}"));
        }
        if data.len() != height * width * bands {
            return dim_err(format!(
                "{} values do not fill a {height}x{width}x{bands} cube",
                data.len()
            ));
        }
        Ok(HsiCube { height, width, bands, data })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube { height, width, bands, data: vec![0.0; height * width * bands] }
    }

    pub fn from_fn(height: usize, width: usize, bands: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * bands);
        for h in 0..height {
            for w in 0..width {
                for b in 0..bands {
                    data.push(f(h, w, b));
                }
            }
        }
        HsiCube { height, width, bands, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, h: usize, w: usize, b: usize) -> usize {
        (h * self.width + w) * self.bands + b
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, b: usize) -> f32 {
        self.data[self.index(h, w, b)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, b: usize, v: f32) {
        let i = self.index(h, w, b);
        self.data[i] = v;
    }

    /// One band as a row-major `height × width` image.
    pub fn band(&self, b: usize) -> Vec<f32> {
        self.data.iter().skip(b).step_by(self.bands).copied().collect()
    }

    /// Spectrum at one pixel.
    pub fn spectrum(&self, h: usize, w: usize) -> &[f32] {
        let i = self.index(h, w, 0);
        &self.data[i..i + self.bands]
    }

    pub fn same_extents(&self, other: &HsiCube) -> Result<()> {
        if self.extents() != other.extents() {
            return dim_err(format!("cube extents {:?} vs {:?}", self.extents(), other.extents()));
        }
        Ok(())
    }

    /// View as a `1 × 1 × H × W × B` tensor.
    pub fn to_tensor(&self) -> FeatureTensor<f32> {
        FeatureTensor::from_vec(Shape::new(1, 1, self.height, self.width, self.bands), self.data.clone())
            .expect("cube extents are positive")
    }

    /// Sample `n` of a single-channel tensor.
    pub fn from_tensor(t: &FeatureTensor<f32>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.channels != 1 || n >= s.batch {
            return dim_err(format!("cannot take cube {n} from tensor {s}"));
        }
        let vol = s.volume();
        HsiCube::new(s.height, s.width, s.bands, t.data()[n * vol..(n + 1) * vol].to_vec())
    }

    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return dim_err(format!(
                "crop {height}x{width} at ({row},{col}) exceeds {}x{}",
                self.height, self.width
            ));
        }
        Ok(HsiCube::from_fn(height, width, self.bands, |h, w, b| self.get(row + h, col + w, b)))
    }

    /// Rotate the spatial plane by `quarter_turns × 90°` counter-clockwise.
    pub fn rotate90(&self, quarter_turns: u8) -> Self {
        let (h0, w0) = (self.height, self.width);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => HsiCube::from_fn(w0, h0, self.bands, |h, w, b| self.get(w, w0 - 1 - h, b)),
            2 => HsiCube::from_fn(h0, w0, self.bands, |h, w, b| self.get(h0 - 1 - h, w0 - 1 - w, b)),
            _ => HsiCube::from_fn(w0, h0, self.bands, |h, w, b| self.get(h0 - 1 - w, h, b)),
        }
    }

    /// Bicubic (Keys, a = -0.5) spatial resize by `factor`, replicating edges.
    pub fn resize(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return config_err(format!("scale factor must be positive, got {factor}"));
        }
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let oh = ((self.height as f64 * factor).round() as usize).max(1);
        let ow = ((self.width as f64 * factor).round() as usize).max(1);
        let taps = |out: usize, n_in: usize, n_out: usize| -> [(usize, f64); 4] {
            let scale = n_in as f64 / n_out as f64;
            let x = (out as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let t = x - base;
            let mut res = [(0usize, 0.0); 4];
            for (k, r) in res.iter_mut().enumerate() {
                let idx = (base as isize + k as isize - 1).clamp(0, n_in as isize - 1) as usize;
                *r = (idx, cubic(t - (k as f64 - 1.0)));
            }
            res
        };
        let rows: Vec<_> = (0..oh).map(|o| taps(o, self.height, oh)).collect();
        let cols: Vec<_> = (0..ow).map(|o| taps(o, self.width, ow)).collect();
        Ok(HsiCube::from_fn(oh, ow, self.bands, |h, w, b| {
            let mut acc = 0.0;
            for &(r, wr) in &rows[h] {
                for &(c, wc) in &cols[w] {
                    acc += wr * wc * self.get(r, c, b) as f64;
                }
            }
            acc as f32
        }))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

pub fn encode_hsi(cube: &HsiCube) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HSI_HEADER_LEN + 4 * cube.data.len());
    buf.extend_from_slice(HSI_MAGIC);
    buf.extend_from_slice(&HSI_VERSION.to_le_bytes());
    for v in cube.extents() {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in &cube.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_hsi(bytes: &[u8]) -> Result<HsiCube> {
    let fail = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < HSI_HEADER_LEN {
        return Err(fail(bytes.len(), format!("header needs {HSI_HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != HSI_MAGIC {
        return Err(fail(0, format!("bad magic {:?}, expected HSI1", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != HSI_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, b) = (dim(6), dim(10), dim(14));
    if h == 0 || w == 0 || b == 0 {
        return Err(fail(6, format!("zero extent in {h}x{w}x{b}")));
    }
    let expected = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(b))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| fail(6, "extents overflow".into()))?;
    let payload = &bytes[HSI_HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(
            HSI_HEADER_LEN + payload.len().min(expected),
            format!("payload should be {expected} bytes for {h}x{w}x{b}, found {}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    HsiCube::new(h, w, b, data)
}

pub fn write_hsi(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_hsi(cube))?;
    Ok(())
}

pub fn read_hsi(path: impl AsRef<Path>) -> Result<HsiCube> {
    decode_hsi(&fs::read(path)?)
}

/// Where a patch came from; enough to cut it again from the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub source: String,
    pub scale: f64,
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub quarter_turns: u8,
}

impl PatchOrigin {
    pub fn extract(&self, source: &HsiCube) -> Result<HsiCube> {
        let scaled = source.resize(self.scale)?;
        Ok(scaled.crop(self.row, self.col, self.size, self.size)?.rotate90(self.quarter_turns))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    /// Emit all four 90° rotations of each crop.
    pub rotations: bool,
    /// Spatial down-scaling factors applied to the source before cropping.
    pub scales: Vec<f64>,
}

impl Augmentation {
    pub fn none() -> Self {
        Augmentation { rotations: false, scales: vec![1.0] }
    }

    /// Rotations and the ×{1, 0.75, 0.5} scale set.
    pub fn standard() -> Self {
        Augmentation { rotations: true, scales: vec![1.0, 0.75, 0.5] }
    }
}

#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    pub patches: Vec<HsiCube>,
    pub origins: Vec<PatchOrigin>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn extend(&mut self, other: PatchSet) {
        self.patches.extend(other.patches);
        self.origins.extend(other.origins);
    }
}

fn grid(extent: usize, size: usize, stride: usize) -> Vec<usize> {
    if extent < size {
        return Vec::new();
    }
    (0..=(extent - size) / stride).map(|k| k * stride).collect()
}

/// Overlapping `size × size` crops over the full spectrum, enumerated by
/// scale, then row, then column, then rotation.
pub fn extract_patches(
    cube: &HsiCube,
    source: &str,
    size: usize,
    stride: usize,
    augment: &Augmentation,
) -> Result<PatchSet> {
    if size == 0 || stride == 0 {
        return config_err("patch size and stride must be positive");
    }
    if cube.height < size || cube.width < size {
        return config_err(format!(
            "cube {}x{} is smaller than the {size}x{size} patch",
            cube.height, cube.width
        ));
    }
    let turns: &[u8] = if augment.rotations { &[0, 1, 2, 3] } else { &[0] };
    let mut set = PatchSet::default();
    for &scale in &augment.scales {
        let scaled = cube.resize(scale)?;
        for row in grid(scaled.height, size, stride) {
            for col in grid(scaled.width, size, stride) {
                let crop = scaled.crop(row, col, size, size)?;
                for &q in turns {
                    set.patches.push(crop.rotate90(q));
                    set.origins.push(PatchOrigin {
                        source: source.to_string(),
                        scale,
                        row,
                        col,
                        size,
                        quarter_turns: q,
                    });
                }
            }
        }
    }
    Ok(set)
}

/// Affine map used by [`normalize`]: `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: f64,
    pub scale: f64,
}

impl Normalization {
    pub fn invert(&self, cube: &HsiCube) -> HsiCube {
        let mut out = cube.clone();
        for v in out.data.iter_mut() {
            *v = (*v as f64 * self.scale + self.offset) as f32;
        }
        out
    }
}

/// Per-cube min-max rescale to `[0, 1]`.
pub fn normalize(cube: &HsiCube) -> Result<(HsiCube, Normalization)> {
    let (lo, hi) = cube.min_max();
    if !(hi > lo) {
        return config_err("cannot normalise a constant cube");
    }
    let norm = Normalization { offset: lo as f64, scale: hi as f64 - lo as f64 };
    let mut out = cube.clone();
    for v in out.data.iter_mut() {
        *v = ((*v as f64 - norm.offset) / norm.scale) as f32;
    }
    Ok((out, norm))
}

/// Seeded synthetic scene: a few smooth endmember spectra mixed by
/// spatially textured abundance maps. Values lie in `[0.05, 0.95]`.
pub fn gen_synthetic(height: usize, width: usize, bands: usize, seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let endmembers = 4;
    let spectra: Vec<Vec<f64>> = (0..endmembers)
        .map(|_| {
            let base = rng.random_range(0.15..0.6);
            let bumps: Vec<(f64, f64, f64)> = (0..2)
                .map(|_| (rng.random_range(0.0..1.0), rng.random_range(0.15..0.5), rng.random_range(-0.3..0.35)))
                .collect();
            (0..bands)
                .map(|b| {
                    let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
                    let v = base
                        + bumps.iter().map(|&(c, w, a)| a * (-((t - c) / w).powi(2)).exp()).sum::<f64>();
                    v.clamp(0.05, 0.95)
                })
                .collect()
        })
        .collect();
    struct Texture {
        waves: Vec<(f64, f64, f64, f64)>,
        rect: (f64, f64, f64, f64, f64),
    }
    let textures: Vec<Texture> = (0..endmembers)
        .map(|_| Texture {
            waves: (0..3)
                .map(|_| {
                    (
                        rng.random_range(-0.6..0.6),
                        rng.random_range(-0.6..0.6),
                        rng.random_range(0.0..std::f64::consts::TAU),
                        rng.random_range(0.3..1.0),
                    )
                })
                .collect(),
            rect: (
                rng.random_range(0.0..0.7),
                rng.random_range(0.0..0.7),
                rng.random_range(0.15..0.4),
                rng.random_range(0.15..0.4),
                rng.random_range(1.0..3.0),
            ),
        })
        .collect();
    let mut cube = HsiCube::zeros(height, width, bands);
    let mut weights = vec![0.0f64; endmembers];
    for h in 0..height {
        for w in 0..width {
            let (y, x) = (h as f64 / height as f64, w as f64 / width as f64);
            for (k, tex) in textures.iter().enumerate() {
                let mut s: f64 = tex.waves.iter().map(|&(fy, fx, ph, a)| a * (fy * h as f64 + fx * w as f64 + ph).sin()).sum();
                let (ry, rx, rh, rw, boost) = tex.rect;
                if y >= ry && y < ry + rh && x >= rx && x < rx + rw {
                    s += boost;
                }
                weights[k] = s.exp();
            }
            let total: f64 = weights.iter().sum();
            for b in 0..bands {
                let v: f64 = weights.iter().zip(&spectra).map(|(a, s)| a * s[b]).sum::<f64>() / total;
                cube.set(h, w, b, v as f32);
            }
        }
    }
    cube
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, b: usize) -> HsiCube {
        HsiCube::from_fn(h, w, b, |i, j, k| (i * 100 + j * 10 + k) as f32 / 1000.0)
    }

    #[test]
    fn file_size_and_round_trip() {
        let c = HsiCube::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let bytes = encode_hsi(&c);
        assert_eq!(bytes.len(), 34);
        assert_eq!(decode_hsi(&bytes).unwrap(), c);
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let bytes = encode_hsi(&ramp(3, 3, 2));
        let err = decode_hsi(&bytes[..bytes.len() - 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("72") && msg.contains("67"), "{msg}");
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode_hsi(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(decode_hsi(&bad), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn patch_grid_and_rotation_counts() {
        let c = ramp(128, 128, 3);
        let p = extract_patches(&c, "c", 64, 64, &Augmentation::none()).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.patches.iter().all(|q| q.bands() == 3));
        let rot = Augmentation { rotations: true, scales: vec![1.0] };
        assert_eq!(extract_patches(&c, "c", 64, 64, &rot).unwrap().len(), 16);
        assert!(extract_patches(&ramp(32, 80, 2), "c", 64, 16, &rot).is_err());
    }

    #[test]
    fn provenance_reextracts_identical_patches() {
        let c = gen_synthetic(40, 36, 5, 3);
        let set = extract_patches(&c, "syn", 16, 8, &Augmentation::standard()).unwrap();
        assert!(!set.is_empty());
        for (p, o) in set.patches.iter().zip(&set.origins).step_by(7) {
            assert_eq!(&o.extract(&c).unwrap(), p);
        }
    }

    #[test]
    fn four_rotations_return_home() {
        let c = ramp(3, 5, 2);
        let r = c.rotate90(1);
        assert_eq!((r.height(), r.width()), (5, 3));
        assert_eq!(r.rotate90(3), c);
        assert_eq!(c.rotate90(2).rotate90(2), c);
    }

    #[test]
    fn resize_halves_and_preserves_constants() {
        let c = HsiCube::from_fn(8, 6, 2, |_, _, b| 0.25 + b as f32 * 0.5);
        let r = c.resize(0.5).unwrap();
        assert_eq!(r.extents(), [4, 3, 2]);
        for h in 0..4 {
            for w in 0..3 {
                assert!((r.get(h, w, 1) - 0.75).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_behaviour() {
        let unit = HsiCube::new(1, 2, 2, vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        assert_eq!(normalize(&unit).unwrap().0, unit);
        let raw = HsiCube::new(1, 2, 2, vec![3.0, 7.5, -2.0, 11.0]).unwrap();
        let (n, t) = normalize(&raw).unwrap();
        let (lo, hi) = n.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        let back = t.invert(&n);
        for (a, b) in back.data().iter().zip(raw.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(normalize(&HsiCube::from_fn(2, 2, 2, |_, _, _| 0.3)).is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_bounded() {
        let a = gen_synthetic(16, 16, 8, 1);
        assert_eq!(a, gen_synthetic(16, 16, 8, 1));
        assert_ne!(a, gen_synthetic(16, 16, 8, 2));
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.05 && hi <= 0.95);
    }
}
