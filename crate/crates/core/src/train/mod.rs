//! Objective, optimiser, schedules, gradient checking and the training loop.

mod adam;
mod gradcheck;
mod schedule;
mod trainer;

pub use adam::{adam_step, read_adam, read_adam_from, write_adam, write_adam_to, AdamState, ADAM_MAGIC, ADAM_VERSION};
pub use gradcheck::{
    check_gradients, grad_check_conv, grad_check_model, grad_check_unit, relative_error, GradCheckReport, GroupReport,
    FD_EPSILON, REL_FLOOR,
};
pub use schedule::{schedule_for_epoch, NoiseModel, Schedule, StageSpec};
pub use trainer::{checkpoint_paths, load_checkpoint, save_checkpoint, train, EpochRecord, TrainLog, TrainOptions};

use crate::error::Result;
use crate::tensor::FeatureTensor;

/// Mean squared error and its gradient `2 (pred - target) / count`.
pub fn mse_loss(pred: &FeatureTensor<f32>, target: &FeatureTensor<f32>) -> Result<(f64, FeatureTensor<f32>)> {
    pred.ensure_shape(target, "mse_loss")?;
    let n = pred.data().len() as f64;
    let mut sum = 0.0f64;
    let grad: Vec<f32> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = *p as f64 - *t as f64;
            sum += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((sum / n, FeatureTensor::from_vec(pred.shape(), grad)?))
}
