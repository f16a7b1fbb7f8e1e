//! Staged training schedules.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::hsio::HsiCube;
use crate::noise::{add_gaussian_iid, synthesize_case};

/// How clean patches are corrupted during a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum NoiseModel {
    /// i.i.d. Gaussian with a known σ (0–255 scale).
    Fixed { sigma: f64 },
    /// i.i.d. Gaussian with σ drawn uniformly from `[lo, hi]` per sample.
    Blind { lo: f64, hi: f64 },
    /// One of the listed complex cases, chosen uniformly per sample.
    Complex { cases: Vec<u8> },
}

impl NoiseModel {
    /// Corrupt one sample. `rng` supplies the per-sample choices and the
    /// seed handed to the noise generator.
    pub fn corrupt(&self, x: &HsiCube, rng: &mut impl Rng) -> Result<HsiCube> {
        match self {
            NoiseModel::Fixed { sigma } => add_gaussian_iid(x, *sigma, rng.random()),
            NoiseModel::Blind { lo, hi } => {
                let sigma = rng.random_range(*lo..=*hi);
                add_gaussian_iid(x, sigma, rng.random())
            }
            NoiseModel::Complex { cases } => {
                if cases.is_empty() {
                    return config_err("complex noise stage lists no cases");
                }
                let case = cases[rng.random_range(0..cases.len())];
                Ok(synthesize_case(x, case, rng.random())?.0)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::Fixed { sigma } if !(*sigma >= 0.0) => config_err(format!("negative sigma {sigma}")),
            NoiseModel::Blind { lo, hi } if !(*lo >= 0.0 && lo <= hi) => {
                config_err(format!("blind sigma range [{lo}, {hi}] is empty or negative"))
            }
            NoiseModel::Complex { cases } if cases.is_empty() || cases.iter().any(|c| !(1..=5).contains(c)) => {
                config_err(format!("complex cases must be non-empty and within 1..=5, got {cases:?}"))
            }
            _ => Ok(()),
        }
    }
}

/// One contiguous run of epochs sharing noise, learning rate and batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: u8,
    pub epochs: Range<usize>,
    pub noise: NoiseModel,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    segments: Vec<StageSpec>,
}

impl Schedule {
    /// Segments must start at epoch 0 and tile the range without gaps.
    pub fn new(segments: Vec<StageSpec>) -> Result<Self> {
        if segments.is_empty() {
            return config_err("schedule has no stages");
        }
        let mut next = 0;
        for s in &segments {
            if s.epochs.start != next || s.epochs.end <= s.epochs.start {
                return config_err(format!("stage epochs {:?} do not continue from epoch {next}", s.epochs));
            }
            if !(s.lr > 0.0) || s.batch_size == 0 {
                return config_err(format!("stage at {:?} needs positive lr and batch size", s.epochs));
            }
            s.noise.validate()?;
            next = s.epochs.end;
        }
        Ok(Schedule { segments })
    }

    /// The three-stage incremental policy over 100 epochs.
    pub fn incremental() -> Self {
        let fixed = NoiseModel::Fixed { sigma: 50.0 };
        let blind = NoiseModel::Blind { lo: 30.0, hi: 70.0 };
        let complex = NoiseModel::Complex { cases: vec![1, 2, 3, 4] };
        let seg = |stage, epochs, noise: &NoiseModel, lr, batch_size| StageSpec {
            stage,
            epochs,
            noise: noise.clone(),
            lr,
            batch_size,
        };
        Schedule::new(vec![
            seg(1, 0..20, &fixed, 1e-3, 16),
            seg(1, 20..30, &fixed, 1e-4, 16),
            seg(2, 30..35, &blind, 1e-3, 64),
            seg(2, 35..45, &blind, 1e-4, 64),
            seg(2, 45..50, &blind, 1e-5, 64),
            seg(3, 50..85, &complex, 1e-3, 64),
            seg(3, 85..95, &complex, 1e-4, 64),
            seg(3, 95..100, &complex, 1e-5, 64),
        ])
        .expect("built-in schedule is contiguous")
    }

    /// A single stage of `epochs` epochs.
    pub fn constant(epochs: usize, noise: NoiseModel, lr: f64, batch_size: usize) -> Result<Self> {
        Schedule::new(vec![StageSpec { stage: 1, epochs: 0..epochs, noise, lr, batch_size }])
    }

    pub fn segments(&self) -> &[StageSpec] {
        &self.segments
    }

    pub fn total_epochs(&self) -> usize {
        self.segments.last().map_or(0, |s| s.epochs.end)
    }

    pub fn at(&self, epoch: usize) -> Result<&StageSpec> {
        self.segments.iter().find(|s| s.epochs.contains(&epoch)).map_or_else(
            || config_err(format!("epoch {epoch} outside schedule 0..{}", self.total_epochs())),
            Ok,
        )
    }

    /// Epoch counts after which a stage ends (checkpoint points).
    pub fn stage_ends(&self) -> Vec<usize> {
        let mut ends: Vec<usize> = self
            .segments
            .windows(2)
            .filter(|w| w[0].stage != w[1].stage)
            .map(|w| w[0].epochs.end)
            .collect();
        ends.push(self.total_epochs());
        ends
    }
}

/// Stage of the incremental policy active at `epoch` (0-based, below 100).
pub fn schedule_for_epoch(epoch: usize) -> Result<StageSpec> {
    Schedule::incremental().at(epoch).cloned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incremental_cells() {
        let s = schedule_for_epoch(22).unwrap();
        assert_eq!((s.stage, s.lr, s.batch_size, s.noise), (1, 1e-4, 16, NoiseModel::Fixed { sigma: 50.0 }));
        let s = schedule_for_epoch(47).unwrap();
        assert_eq!((s.stage, s.lr, s.batch_size), (2, 1e-5, 64));
        assert_eq!(s.noise, NoiseModel::Blind { lo: 30.0, hi: 70.0 });
        let s = schedule_for_epoch(90).unwrap();
        assert_eq!((s.stage, s.lr), (3, 1e-4));
        assert!(schedule_for_epoch(100).is_err());
        assert_eq!(Schedule::incremental().stage_ends(), vec![30, 50, 100]);
    }

    #[test]
    fn gaps_are_rejected() {
        let n = NoiseModel::Fixed { sigma: 1.0 };
        let a = StageSpec { stage: 1, epochs: 0..3, noise: n.clone(), lr: 1e-3, batch_size: 2 };
        let b = StageSpec { stage: 2, epochs: 4..6, noise: n, lr: 1e-3, batch_size: 2 };
        assert!(Schedule::new(vec![a, b]).is_err());
        assert!(Schedule::new(vec![]).is_err());
        assert!(Schedule::constant(5, NoiseModel::Complex { cases: vec![6] }, 1e-3, 1).is_err());
    }
}
