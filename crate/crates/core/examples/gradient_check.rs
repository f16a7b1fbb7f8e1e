//! Finite-difference check of every layer kind and a small network.

fn main() -> qrnn3d::Result<()> {
    for (name, report) in qrnn3d::cli::gradient_suite(1e-3, 0)? {
        println!("{name:<22} {}", report);
    }
    Ok(())
}
