//! Spectral contribution matrix of the first bidirectional layer of a
//! briefly trained desk model, with the relative-band counts per band.

use qrnn3d::gcs::{layer_gcs, relative_band_histogram, relative_bands, DEFAULT_EPSILON};
use qrnn3d::hsio::{extract_patches, gen_synthetic, Augmentation};
use qrnn3d::net::{build_network, NetworkConfig};
use qrnn3d::noise::add_gaussian_iid;
use qrnn3d::train::{train, AdamState, NoiseModel, Schedule, TrainOptions};

fn main() -> qrnn3d::Result<()> {
    let scene = gen_synthetic(64, 64, 12, 1);
    let patches = extract_patches(&scene, "scene", 16, 8, &Augmentation::none())?.patches;
    let mut model = build_network(&NetworkConfig::desk(), 0)?;
    let mut adam = AdamState::for_model(&model);
    let schedule = Schedule::constant(5, NoiseModel::Fixed { sigma: 30.0 }, 1e-3, 8)?;
    train(&mut model, &mut adam, &patches, &schedule, &TrainOptions::default())?;

    let layer = model.first_bidirectional().expect("desk model starts bidirectional");
    let mut matrices = Vec::new();
    for seed in 0..3 {
        let noisy = add_gaussian_iid(&gen_synthetic(32, 32, 12, 10 + seed), 30.0, seed)?;
        matrices.push(layer_gcs(&model, &noisy.to_tensor(), layer, DEFAULT_EPSILON)?.combined);
    }
    let g = &matrices[0];
    println!("layer {layer} contribution matrix (row i -> column j):");
    for i in 0..g.bands {
        let row: Vec<String> = (0..g.bands).map(|j| g.get(i, j).map_or("   NA".into(), |v| format!("{v:5.2}"))).collect();
        println!("{:>2} {}", i + 1, row.join(" "));
    }
    for (j, c) in relative_bands(g).iter().enumerate() {
        println!("band {:>2}: {} relative ({} before, {} after)", j + 1, c.total, c.forward, c.backward);
    }
    println!("histogram over 3 images: {:?}", relative_band_histogram(&matrices)?.counts);
    Ok(())
}
