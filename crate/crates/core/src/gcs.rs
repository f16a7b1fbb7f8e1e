//! Global correlation along the spectrum: how much each candidate band
//! `z_i` contributes to each hidden state `h_j` of a pooling pass.
//!
//! Band indices are zero-based in the API; CSV output labels them from 1.
//! For a forward pass `Φ_j(z_i) = f_j ⊙ … ⊙ f_{i+1} ⊙ (1 - f_i) ⊙ z_i` for
//! `i ≤ j`. A backward pass mirrors this with `i ≥ j`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::net::Model;
use crate::qru::{BranchTrace, Direction, PoolingTrace};
use crate::tensor::{FeatureTensor, Scalar};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const RELATIVE_THRESHOLD: f64 = 0.1;

fn band_values<T: Scalar>(t: &FeatureTensor<T>, b: usize) -> Vec<f64> {
    let nb = t.shape().bands;
    t.data().iter().skip(b).step_by(nb).map(|v| v.as_f64()).collect()
}

fn check_order(direction: Direction, i: usize, j: usize, bands: usize) -> Result<()> {
    if i >= bands || j >= bands {
        return config_err(format!("band pair ({i},{j}) outside 0..{bands}"));
    }
    match direction {
        Direction::Forward if i > j => config_err(format!("forward trace needs i <= j, got ({i},{j})")),
        Direction::Backward if i < j => config_err(format!("backward trace needs i >= j, got ({i},{j})")),
        Direction::Bidirectional => config_err("a pooling trace runs one direction"),
        _ => Ok(()),
    }
}

/// Contribution of `z_i` to `h_j` as one band slice (`N × C × H × W × 1`).
pub fn phi<T: Scalar>(trace: &PoolingTrace<T>, i: usize, j: usize) -> Result<FeatureTensor<f64>> {
    let bands = trace.h.shape().bands;
    check_order(trace.direction, i, j, bands)?;
    let mut acc: Vec<f64> = band_values(&trace.f, i).iter().zip(band_values(&trace.z, i)).map(|(f, z)| (1.0 - f) * z).collect();
    let between: Vec<usize> = if i <= j { (i + 1..=j).collect() } else { (j..i).collect() };
    for k in between {
        for (a, f) in acc.iter_mut().zip(band_values(&trace.f, k)) {
            *a *= f;
        }
    }
    FeatureTensor::from_vec(trace.h.shape().with_bands(1), acc)
}

/// `B × B` matrix; `entries[i * B + j]` is the contribution of band `i`
/// to band `j`, `None` where undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcsMatrix {
    pub bands: usize,
    pub entries: Vec<Option<f64>>,
    /// Elements per band of the hidden state.
    pub numel: usize,
    /// Per output band `j`, how many elements of `h_j` fell under ε and were dropped.
    pub excluded: Vec<usize>,
    pub epsilon: f64,
}

impl GcsMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.bands + j]
    }

    /// `‖1‖_F` over one band.
    pub fn unit_norm(&self) -> f64 {
        (self.numel as f64).sqrt()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("i\\j");
        for j in 0..self.bands {
            let _ = write!(s, ",{}", j + 1);
        }
        s.push('\n');
        for i in 0..self.bands {
            let _ = write!(s, "{}", i + 1);
            for j in 0..self.bands {
                match self.get(i, j) {
                    Some(v) => {
                        let _ = write!(s, ",{v:.6e}");
                    }
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Binary greyscale PGM with one pixel per cell, scaled so that
    /// `‖1‖_F` maps to white. Absent cells are black.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.bands, self.bands).into_bytes();
        let full = self.unit_norm();
        for v in &self.entries {
            let g = v.map_or(0.0, |v| (v / full).clamp(0.0, 1.0) * 255.0);
            out.push(g.round() as u8);
        }
        out
    }
}

/// `GCS_ij = ‖Φ_j(z_i) ⊘ h_j‖_F`, dropping elements with `|h_j| < ε`.
pub fn gcs_matrix<T: Scalar>(trace: &PoolingTrace<T>, epsilon: f64) -> Result<GcsMatrix> {
    if trace.direction == Direction::Bidirectional {
        return config_err("a pooling trace runs one direction");
    }
    let bands = trace.h.shape().bands;
    let numel = trace.h.shape().numel() / bands;
    let z: Vec<Vec<f64>> = (0..bands).map(|b| band_values(&trace.z, b)).collect();
    let f: Vec<Vec<f64>> = (0..bands).map(|b| band_values(&trace.f, b)).collect();
    let mut entries = vec![None; bands * bands];
    let mut excluded = vec![0; bands];
    for j in 0..bands {
        let h = band_values(&trace.h, j);
        let keep: Vec<bool> = h.iter().map(|v| v.abs() >= epsilon).collect();
        excluded[j] = keep.iter().filter(|k| !**k).count();
        if excluded[j] == numel {
            continue;
        }
        let sources: Vec<usize> = match trace.direction {
            Direction::Forward => (0..=j).rev().collect(),
            _ => (j..bands).collect(),
        };
        let mut carry = vec![1.0f64; numel];
        for i in sources {
            let mut sq = 0.0;
            for e in 0..numel {
                if keep[e] {
                    let r = carry[e] * (1.0 - f[i][e]) * z[i][e] / h[e];
                    sq += r * r;
                }
                carry[e] *= f[i][e];
            }
            entries[i * bands + j] = Some(sq.sqrt());
        }
    }
    Ok(GcsMatrix { bands, entries, numel, excluded, epsilon })
}

/// Combined view of a bidirectional layer: the forward branch supplies the
/// diagonal and `i < j`, the backward branch supplies `i > j`.
pub fn overlay(forward: &GcsMatrix, backward: &GcsMatrix) -> Result<GcsMatrix> {
    if forward.bands != backward.bands || forward.numel != backward.numel {
        return Err(Error::Dimension("GCS matrices of different sizes".into()));
    }
    let b = forward.bands;
    let entries = (0..b * b)
        .map(|k| if k / b > k % b { backward.entries[k] } else { forward.entries[k] })
        .collect();
    Ok(GcsMatrix { entries, ..forward.clone() })
}

/// Relative-band tally for one output band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandCount {
    pub total: usize,
    /// Relative bands `i < j`.
    pub forward: usize,
    /// Relative bands `i > j`.
    pub backward: usize,
    /// Whether band `j` counts itself.
    pub own: bool,
}

/// Band `i` is relative to `j` when `GCS_ij ≥ 0.1 · ‖1‖_F`.
pub fn relative_bands(gcs: &GcsMatrix) -> Vec<BandCount> {
    let threshold = RELATIVE_THRESHOLD * gcs.unit_norm();
    (0..gcs.bands)
        .map(|j| {
            let mut c = BandCount { total: 0, forward: 0, backward: 0, own: false };
            for i in 0..gcs.bands {
                if gcs.get(i, j).is_some_and(|v| v >= threshold) {
                    c.total += 1;
                    match i.cmp(&j) {
                        std::cmp::Ordering::Less => c.forward += 1,
                        std::cmp::Ordering::Greater => c.backward += 1,
                        std::cmp::Ordering::Equal => c.own = true,
                    }
                }
            }
            c
        })
        .collect()
}

/// Distribution of relative-band counts pooled over bands and images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeHistogram {
    /// `counts[k]` = number of output bands with exactly `k` relative bands.
    pub counts: Vec<usize>,
}

impl RelativeHistogram {
    pub fn observations(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let total = self.observations().max(1) as f64;
        let mut s = String::from("relative_bands,count,fraction\n");
        for (k, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{k},{c},{:.6}", *c as f64 / total);
        }
        s
    }
}

pub fn relative_band_histogram(corpus: &[GcsMatrix]) -> Result<RelativeHistogram> {
    if corpus.is_empty() {
        return Err(Error::Empty("relative-band histogram needs at least one matrix".into()));
    }
    let max_b = corpus.iter().map(|g| g.bands).max().unwrap_or(0);
    let mut counts = vec![0; max_b + 1];
    for g in corpus {
        for c in relative_bands(g) {
            counts[c.total] += 1;
        }
    }
    Ok(RelativeHistogram { counts })
}

/// GCS of one gated layer. A batched input is treated as one image whose
/// elements are pooled into each Frobenius norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGcs {
    pub layer: usize,
    pub forward: Option<GcsMatrix>,
    pub backward: Option<GcsMatrix>,
    /// Overlay for bidirectional layers, otherwise the single branch.
    pub combined: GcsMatrix,
}

/// Run `model` on `input` and analyse the pooling of `layer`.
pub fn layer_gcs(model: &Model<f32>, input: &FeatureTensor<f32>, layer: usize, epsilon: f64) -> Result<LayerGcs> {
    if layer >= model.units.len() {
        return config_err(format!("model has {} layers, asked for {layer}", model.units.len()));
    }
    let out = model.forward(input, true)?;
    let trace = out.trace.expect("traced forward keeps traces");
    let mut forward = None;
    let mut backward = None;
    for branch in &trace.units[layer].branches {
        match branch {
            BranchTrace::Gated(t) => {
                let m = gcs_matrix(t, epsilon)?;
                match t.direction {
                    Direction::Backward => backward = Some(m),
                    _ => forward = Some(m),
                }
            }
            BranchTrace::Plain { .. } => return config_err(format!("layer {layer} has no recurrent pooling")),
        }
    }
    let combined = match (&forward, &backward) {
        (Some(f), Some(b)) => overlay(f, b)?,
        (Some(m), None) | (None, Some(m)) => m.clone(),
        (None, None) => return Err(Error::State("layer produced no pooling trace".into())),
    };
    Ok(LayerGcs { layer, forward, backward, combined })
}
