//! Valuable-region weight maps of a trained teacher under the three selection rules.

use cidkd::detector::{assign_targets, predict, Role};
use cidkd::distill::{compute_vlr_weights, VlrMode};
use cidkd::experiment::{prepare_data, run_training, ExperimentConfig};
use cidkd::geometry::AnchorGrid;
use cidkd::tensor::Tensor;

fn main() -> cidkd::Result<()> {
    let dir = std::env::temp_dir().join("cidkd_cid_weights");
    let mut cfg = ExperimentConfig::default();
    for kv in ["seed=0", "data.train_images=64", "data.test_images=8", "train.epochs=12", "train.warmup_steps=100"] {
        cfg.apply(kv)?;
    }
    cfg.set("output.dir", &dir.to_string_lossy())?;
    let s = cfg.resolve()?;
    let data = prepare_data(&s)?;
    let teacher = run_training(&cfg, Role::Teacher, &data, None, &dir)?;
    println!("teacher mAP {:.3}", teacher.final_eval.map);

    let grid = AnchorGrid::new(s.scene.height, s.scene.width, &s.teacher.strides)?;
    let mut assign = s.assign.clone();
    assign.bins = s.teacher.bins;
    for mode in [VlrMode::Cid, VlrMode::CidWithinGt, VlrMode::LdVlr] {
        let mut p = s.distill.params.clone();
        p.mode = mode;
        let (mut n, mut sum) = (0usize, 0.0f64);
        for (img, anns) in data.train.images.iter().zip(&data.train.annotations) {
            let px = img.pixels.as_ref().expect("generated images have pixels");
            let x = Tensor::new([&[1], px.shape()].concat(), px.data().to_vec())?;
            let out = predict(&s.teacher, &teacher.store, &x)?;
            let w = compute_vlr_weights(&out, &grid, anns, &assign_targets(&grid, anns, &assign)?, &p)?;
            n += w.vlr_count();
            sum += w.levels.iter().flat_map(|l| &l.i_vlr).map(|v| *v as f64).sum::<f64>();
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        println!("{:<14} {n:>6} weighted anchors, mean weight {mean:.4}", mode.as_str());
    }
    Ok(())
}
