//! The training loop and checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{read_adam, write_adam, AdamState};
use super::mse_loss;
use super::schedule::Schedule;
use crate::error::{config_err, Error, Result};
use crate::hsio::HsiCube;
use crate::metrics::psnr;
use crate::net::{read_weights, write_weights, Model};
use crate::noise::stream;
use crate::tensor::FeatureTensor;

const SHUFFLE: u64 = 101;
const TRAIN_NOISE: u64 = 102;
const VAL_NOISE: u64 = 103;

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// First epoch to run; set to a checkpoint's epoch when resuming.
    pub start_epoch: usize,
    /// Stop before this epoch (defaults to the end of the schedule).
    pub end_epoch: Option<usize>,
    /// Stop after this many optimiser steps in total for this call.
    pub max_steps: Option<usize>,
    /// Where stage-end checkpoints are written.
    pub checkpoint_dir: Option<PathBuf>,
    /// Held-out clean patches for validation PSNR.
    pub validation: Vec<HsiCube>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub mean_loss: f64,
    /// Mean PSNR of the denoised validation patches.
    pub val_psnr: Option<f64>,
    /// Mean PSNR of the noisy validation inputs.
    pub val_noisy_psnr: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn total_steps(&self) -> usize {
        self.records.iter().map(|r| r.steps).sum()
    }

    /// CSV without wall time, so identical runs give identical files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,stage,lr,batch_size,steps,mean_loss,val_psnr,val_noisy_psnr\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:e},{},{},{:.9e},{},{}",
                r.epoch,
                r.stage,
                r.lr,
                r.batch_size,
                r.steps,
                r.mean_loss,
                opt(r.val_psnr),
                opt(r.val_noisy_psnr)
            );
        }
        s
    }
}

/// Weights and optimiser file names for the checkpoint taken after `epochs` epochs.
pub fn checkpoint_paths(dir: &Path, epochs: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("epoch-{epochs:03}.q3dw")), dir.join(format!("epoch-{epochs:03}.q3da")))
}

pub fn save_checkpoint(dir: &Path, epochs: usize, model: &Model<f32>, adam: &AdamState) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let (w, a) = checkpoint_paths(dir, epochs);
    write_weights(&w, model)?;
    write_adam(&a, adam)?;
    Ok((w, a))
}

pub fn load_checkpoint(dir: &Path, epochs: usize) -> Result<(Model<f32>, AdamState)> {
    let (w, a) = checkpoint_paths(dir, epochs);
    let model = read_weights(w)?;
    let adam = read_adam(a)?;
    let layout: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    if adam.layout() != layout {
        return Err(Error::Format { offset: 0, message: "optimiser state does not match the weights".into() });
    }
    Ok((model, adam))
}

fn validation_psnr(
    model: &Model<f32>,
    clean: &[HsiCube],
    noisy: &[HsiCube],
) -> Result<(Option<f64>, Option<f64>)> {
    if clean.is_empty() {
        return Ok((None, None));
    }
    let (mut out, mut inp) = (0.0, 0.0);
    for (c, n) in clean.iter().zip(noisy) {
        let y = model.predict(&n.to_tensor())?;
        out += psnr(&HsiCube::from_tensor(&y, 0)?, c)?;
        inp += psnr(n, c)?;
    }
    let k = clean.len() as f64;
    Ok((Some(out / k), Some(inp / k)))
}

/// Run the schedule from `options.start_epoch`. Each epoch shuffles the
/// patches with a `(seed, epoch)` stream, corrupts every sample with noise
/// drawn from its own seed, and takes one Adam step per batch. The last
/// batch of an epoch may be short.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState,
    data: &[HsiCube],
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(Error::Empty("training needs at least one patch".into()));
    }
    if data.iter().any(|p| p.extents() != data[0].extents()) {
        return config_err("training patches must share one shape");
    }
    let end = options.end_epoch.unwrap_or(schedule.total_epochs()).min(schedule.total_epochs());
    if options.start_epoch > end {
        return config_err(format!("start epoch {} is past end epoch {end}", options.start_epoch));
    }
    let ends = schedule.stage_ends();
    let mut log = TrainLog::default();
    let mut steps_left = options.max_steps.unwrap_or(usize::MAX);
    let mut val_noisy: Option<(u8, Vec<HsiCube>)> = None;
    for epoch in options.start_epoch..end {
        if steps_left == 0 {
            break;
        }
        let started = Instant::now();
        let stage = schedule.at(epoch)?.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(options.seed, SHUFFLE, epoch as u64));
        let mut noise_rng = stream(options.seed, TRAIN_NOISE, epoch as u64);
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for batch in order.chunks(stage.batch_size) {
            if steps_left == 0 {
                break;
            }
            let mut clean = Vec::with_capacity(batch.len());
            let mut noisy = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut sample_rng = stream(noise_rng.random(), TRAIN_NOISE, 0);
                noisy.push(stage.noise.corrupt(&data[i], &mut sample_rng)?.to_tensor());
                clean.push(data[i].to_tensor());
            }
            let input = FeatureTensor::stack(&noisy)?;
            let target = FeatureTensor::stack(&clean)?;
            let out = model.forward(&input, true)?;
            let (loss, grad) = mse_loss(&out.output, &target)?;
            let grads = model.backward(out.trace.as_ref(), &grad)?;
            let g = grads.tensors();
            adam.step(&mut model.tensors_mut(), &g, stage.lr)?;
            loss_sum += loss;
            steps += 1;
            steps_left -= 1;
        }
        if val_noisy.as_ref().is_none_or(|(s, _)| *s != stage.stage) {
            let mut rng = stream(options.seed, VAL_NOISE, stage.stage as u64);
            let cubes = options
                .validation
                .iter()
                .map(|c| stage.noise.corrupt(c, &mut stream(rng.random(), VAL_NOISE, 0)))
                .collect::<Result<Vec<_>>>()?;
            val_noisy = Some((stage.stage, cubes));
        }
        let (val_psnr, val_noisy_psnr) =
            validation_psnr(model, &options.validation, &val_noisy.as_ref().expect("set above").1)?;
        let record = EpochRecord {
            epoch,
            stage: stage.stage,
            lr: stage.lr,
            batch_size: stage.batch_size,
            steps,
            mean_loss: loss_sum / steps.max(1) as f64,
            val_psnr,
            val_noisy_psnr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch} stage {} lr {:e}: loss {:.6e}, val psnr {}, {:.1} s",
            record.stage,
            record.lr,
            record.mean_loss,
            val_psnr.map_or("-".into(), |v| format!("{v:.2} dB")),
            record.wall_seconds
        );
        log.records.push(record);
        if let Some(dir) = &options.checkpoint_dir {
            if ends.contains(&(epoch + 1)) || epoch + 1 == end || steps_left == 0 {
                let (w, _) = save_checkpoint(dir, epoch + 1, model, adam)?;
                info!("checkpoint {}", w.display());
            }
        }
    }
    Ok(log)
}
