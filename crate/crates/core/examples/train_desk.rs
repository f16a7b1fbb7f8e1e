//! Train the 3-layer desk model on synthetic patches with σ = 25 Gaussian noise.
//!
//! `cargo run --release --example train_desk`

use std::time::Instant;

use qrnn3d::hsio::{extract_patches, gen_synthetic, Augmentation};
use qrnn3d::net::{build_network, NetworkConfig};
use qrnn3d::train::{train, AdamState, NoiseModel, Schedule, TrainOptions};

fn main() -> qrnn3d::Result<()> {
    let scene = gen_synthetic(64, 64, 8, 1);
    let train_set: Vec<_> = extract_patches(&scene, "synthetic-1", 16, 6, &Augmentation::none())?.patches.into_iter().take(64).collect();
    // Validation comes from a scene the model never sees.
    let other = gen_synthetic(64, 64, 8, 2);
    let validation = extract_patches(&other, "synthetic-2", 16, 16, &Augmentation::none())?.patches.into_iter().take(8).collect();

    let mut model = build_network(&NetworkConfig::desk(), 0)?;
    let mut adam = AdamState::for_model(&model);
    let schedule = Schedule::constant(50, NoiseModel::Fixed { sigma: 25.0 }, 1e-3, 16)?;
    let options = TrainOptions { seed: 0, max_steps: Some(200), validation, ..Default::default() };

    let t = Instant::now();
    let log = train(&mut model, &mut adam, &train_set, &schedule, &options)?;
    for r in log.records.iter().step_by(5) {
        println!(
            "epoch {:>2}  loss {:.3e}  val {:.2} dB (noisy {:.2} dB)",
            r.epoch,
            r.mean_loss,
            r.val_psnr.unwrap_or(f64::NAN),
            r.val_noisy_psnr.unwrap_or(f64::NAN)
        );
    }
    let last = log.records.last().expect("at least one epoch");
    println!("{} steps in {:.1} s", log.total_steps(), t.elapsed().as_secs_f64());
    println!(
        "loss ratio {:.3}, PSNR gain {:.2} dB",
        last.mean_loss / log.records[0].mean_loss,
        last.val_psnr.unwrap_or(f64::NAN) - last.val_noisy_psnr.unwrap_or(f64::NAN)
    );
    Ok(())
}
