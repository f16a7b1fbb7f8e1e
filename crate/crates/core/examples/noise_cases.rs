//! Corrupt one synthetic cube with each complex noise case and report what
//! was applied and how much it costs in PSNR.

use qrnn3d::hsio::gen_synthetic;
use qrnn3d::metrics::psnr;
use qrnn3d::noise::{add_gaussian_iid, synthesize_case};

fn main() -> qrnn3d::Result<()> {
    let clean = gen_synthetic(64, 64, 31, 0);
    for sigma in [30.0, 50.0, 70.0] {
        let y = add_gaussian_iid(&clean, sigma, 1)?;
        println!("gaussian sigma {sigma:>4}: {:.2} dB", psnr(&y, &clean)?);
    }
    for case in 1..=5 {
        let (y, report) = synthesize_case(&clean, case, 7)?;
        let sigma_lo = report.sigma.iter().cloned().fold(f64::INFINITY, f64::min);
        let sigma_hi = report.sigma.iter().cloned().fold(0.0, f64::max);
        println!(
            "case {case}: {:.2} dB  sigma {sigma_lo:.1}..{sigma_hi:.1}  stripes {:>2}  deadlines {:>2}  impulses {:>2}  bands hit {:?}",
            psnr(&y, &clean)?,
            report.stripes.len(),
            report.deadlines.len(),
            report.impulses.len(),
            report.sparse_bands()
        );
    }
    Ok(())
}
