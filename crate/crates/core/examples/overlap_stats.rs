//! Per-instance anchor overlap and positive-area statistics on a mixed-size dataset.

use cidkd::experiment::{prepare_data, run_stats, ExperimentConfig};

fn main() -> cidkd::Result<()> {
    let dir = std::env::temp_dir().join("cidkd_stats");
    let mut cfg = ExperimentConfig::default();
    for kv in [
        "seed=0",
        "data.train_images=1",
        "data.test_images=60",
        "data.height=192",
        "data.width=192",
        "data.max_size=80",
        "data.fg_fraction=0.3",
    ] {
        cfg.apply(kv)?;
    }
    cfg.set("output.dir", &dir.to_string_lossy())?;
    let s = cfg.resolve()?;
    let data = prepare_data(&s)?;
    let st = run_stats(&s, &data.test, None, 0, &dir)?;
    println!("{} small and {} larger instances", st.instances_small, st.instances_large);
    println!("median DIoU: small {:?}, larger {:?}", st.median_diou_small, st.median_diou_large);
    println!("median positive-area ratio: small {:?}, larger {:?}", st.median_area_ratio_small, st.median_area_ratio_large);
    println!("histograms in {}", dir.display());
    Ok(())
}
