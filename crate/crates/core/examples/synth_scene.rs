//! Generate a synthetic scene and write it as a PPM image.

use std::fs::File;
use std::io::BufWriter;

use cidkd::synth::{generate_dataset, generate_scene, write_ppm, SceneSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let scene = generate_scene(&spec, 0)?;
    println!("requested {} objects, placed {}", scene.requested, scene.annotations.len());
    for a in &scene.annotations {
        println!("  class {} at {:?}", a.class, a.bbox);
    }
    let path = std::env::temp_dir().join("cidkd_scene.ppm");
    write_ppm(&mut BufWriter::new(File::create(&path)?), &scene.image)?;
    println!("wrote {}", path.display());

    let ds = generate_dataset(&spec, "train", 0, 50, 1)?;
    println!(
        "50 images: {} instances, foreground fraction {:.4}",
        ds.num_instances(),
        ds.foreground_fraction()
    );
    Ok(())
}
