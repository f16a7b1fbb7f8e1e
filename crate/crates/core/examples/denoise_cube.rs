//! Train the desk model for a few hundred steps, then denoise a held-out
//! cube corrupted with case-2 noise and compare against the noisy input.

use qrnn3d::hsio::{extract_patches, gen_synthetic, Augmentation, HsiCube};
use qrnn3d::metrics::evaluate;
use qrnn3d::net::{build_network, NetworkConfig};
use qrnn3d::noise::synthesize_case;
use qrnn3d::train::{train, AdamState, NoiseModel, Schedule, TrainOptions};

fn main() -> qrnn3d::Result<()> {
    let scene = gen_synthetic(96, 96, 10, 4);
    let patches = extract_patches(&scene, "scene", 16, 8, &Augmentation::none())?.patches;
    let mut model = build_network(&NetworkConfig::desk(), 0)?;
    let mut adam = AdamState::for_model(&model);
    let schedule = Schedule::constant(12, NoiseModel::Complex { cases: vec![1, 2] }, 1e-3, 16)?;
    let log = train(&mut model, &mut adam, &patches, &schedule, &TrainOptions::default())?;
    println!("trained {} steps, final loss {:.3e}", log.total_steps(), log.records.last().map_or(f64::NAN, |r| r.mean_loss));

    let clean = gen_synthetic(64, 64, 10, 99);
    let (noisy, _) = synthesize_case(&clean, 2, 3)?;
    let denoised = HsiCube::from_tensor(&model.predict(&noisy.to_tensor())?, 0)?;
    for (name, est) in [("noisy", &noisy), ("denoised", &denoised)] {
        let m = evaluate(est, &clean)?;
        println!("{name:<9} PSNR {:.2} dB  SSIM {:.4}  SAM {:.4}", m.psnr, m.ssim, m.sam);
    }
    Ok(())
}
