//! FLOP counts of the default models and of the fusion module at detector scale.

use cidkd::experiment::{flop_summary, light_ml_delta, ExperimentConfig};
use cidkd::lightml::LightMLParams;

fn main() -> cidkd::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.set("seed", "0")?;
    let s = flop_summary(&cfg.resolve()?)?;
    println!("teacher {} FLOPs, student {}, student with Light-ML {}", s.teacher, s.student, s.student_light_ml);

    let r = light_ml_delta(256, &LightMLParams::default(), &[8, 16, 32, 64, 128], (800, 1333))?;
    println!("Light-ML on a 256-channel, 5-level head at 800x1333: {:.3} GFLOPs", r.gflops());
    for layer in r.layers.iter().take(4) {
        println!("  {layer:?}");
    }
    Ok(())
}
