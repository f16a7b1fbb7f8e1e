//! Print the built-in incremental schedule and round-trip a custom one
//! through a TOML run configuration.

use qrnn3d::config::RunConfig;
use qrnn3d::train::Schedule;

const CONFIG: &str = r#"
seed = 11

[train.schedule]
kind = "custom"
stages = [
  { stage = 1, epochs = { start = 0, end = 10 }, lr = 1e-3, batch_size = 16, noise = { kind = "fixed", sigma = 50.0 } },
  { stage = 2, epochs = { start = 10, end = 20 }, lr = 1e-4, batch_size = 16, noise = { kind = "complex", cases = [1, 2, 3, 4] } },
]
"#;

fn main() -> qrnn3d::Result<()> {
    let s = Schedule::incremental();
    for seg in s.segments() {
        println!(
            "stage {} epochs {:>2}..{:<3} lr {:.0e} batch {:>2} noise {:?}",
            seg.stage, seg.epochs.start, seg.epochs.end, seg.lr, seg.batch_size, seg.noise
        );
    }
    println!("checkpoints after epochs {:?}", s.stage_ends());

    let cfg = RunConfig::from_toml(CONFIG)?;
    let custom = cfg.train.schedule.build()?;
    println!("\ncustom schedule: {} epochs, stage ends {:?}", custom.total_epochs(), custom.stage_ends());
    println!("epoch 12 runs {:?}", custom.at(12)?);
    Ok(())
}
