//! Parameter counts of the benchmark network and its ablation variants,
//! plus the per-layer output shapes of one forward pass.

use std::time::Instant;

use qrnn3d::net::{build_network, DirectionScheme, NetworkConfig};
use qrnn3d::qru::UnitKind;
use qrnn3d::tensor::{FeatureTensor, Shape};

fn main() -> qrnn3d::Result<()> {
    let rows = [
        ("QRU2D", NetworkConfig::variant(UnitKind::Qru2d, 1.0, DirectionScheme::Alternating)),
        ("WQRU2D", NetworkConfig::variant(UnitKind::Qru2d, 1.75, DirectionScheme::Alternating)),
        ("C3D", NetworkConfig::variant(UnitKind::C3d, 1.0, DirectionScheme::Alternating)),
        ("WC3D", NetworkConfig::variant(UnitKind::C3d, 2.0, DirectionScheme::Alternating)),
        ("QRU3D", NetworkConfig::benchmark()),
        ("U", NetworkConfig::benchmark().with_scheme(DirectionScheme::Unidirectional)),
        ("B", NetworkConfig::benchmark().with_scheme(DirectionScheme::Bidirectional)),
        ("A", NetworkConfig::benchmark()),
    ];
    println!("{:<8} {:>12}", "model", "params");
    for (name, cfg) in &rows {
        println!("{name:<8} {:>12} ({:.2}M)", cfg.param_count(), cfg.param_count() as f64 / 1e6);
    }

    let model = build_network(&NetworkConfig::benchmark(), 0)?;
    let x = FeatureTensor::from_fn(Shape::new(1, 1, 64, 64, 31), |i| ((i % 97) as f32) / 97.0);
    let t = Instant::now();
    let out = model.forward(&x, false)?;
    println!("\nforward 64x64x31 in {:.2?}", t.elapsed());
    for (l, (unit, s)) in model.units.iter().zip(&out.layer_shapes).enumerate() {
        println!(
            "layer {l:>2} {:<6} {:<3} {:>3}@{}x{}x{}",
            unit.spec.kind.to_string(),
            unit.spec.direction.short(),
            s.channels,
            s.height,
            s.width,
            s.bands
        );
    }
    Ok(())
}
