//! PSNR, SSIM and SAM for a few simple degradations of the same cube.

use qrnn3d::hsio::{gen_synthetic, HsiCube};
use qrnn3d::metrics::evaluate;
use qrnn3d::noise::add_gaussian_iid;

fn main() -> qrnn3d::Result<()> {
    let clean = gen_synthetic(64, 64, 31, 3);
    let (h, w, b) = (clean.height(), clean.width(), clean.bands());
    let cases = [
        ("identical", clean.clone()),
        ("offset +0.1", HsiCube::from_fn(h, w, b, |i, j, k| clean.get(i, j, k) + 0.1)),
        ("scaled x0.8", HsiCube::from_fn(h, w, b, |i, j, k| 0.8 * clean.get(i, j, k))),
        ("sigma 25", add_gaussian_iid(&clean, 25.0, 0)?),
        ("blurred", clean.resize(0.5)?.resize(2.0)?),
    ];
    println!("{:<12} {:>9} {:>7} {:>7}", "estimate", "PSNR", "SSIM", "SAM");
    for (name, est) in &cases {
        let m = evaluate(est, &clean)?;
        println!("{name:<12} {:>9.3} {:>7.4} {:>7.4}", m.psnr, m.ssim, m.sam);
    }
    Ok(())
}
