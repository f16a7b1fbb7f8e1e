//! Write a cube to disk in the HSI1 format, read it back and cut it into
//! augmented training patches.

use qrnn3d::hsio::{extract_patches, gen_synthetic, read_hsi, write_hsi, Augmentation};

fn main() -> qrnn3d::Result<()> {
    let dir = std::env::temp_dir().join("qrnn3d-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("scene.hsi");
    let cube = gen_synthetic(96, 96, 31, 5);
    write_hsi(&path, &cube)?;
    let back = read_hsi(&path)?;
    assert_eq!(back, cube);
    println!("{} bytes at {}", std::fs::metadata(&path)?.len(), path.display());

    for (name, aug) in [("plain", Augmentation::none()), ("augmented", Augmentation::standard())] {
        let set = extract_patches(&back, "scene", 64, 16, &aug)?;
        let first = &set.origins[0];
        let last = set.origins.last().expect("patches");
        println!("{name:<10} {:>3} patches; first {first:?}", set.len());
        println!("{:<10} last {last:?}", "");
    }
    Ok(())
}
