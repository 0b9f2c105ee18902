//! Train a teacher, then a plain and a distilled student, on a small synthetic split.

use cidkd::detector::Role;
use cidkd::experiment::{prepare_data, run_training, ExperimentConfig, Teacher};

fn main() -> cidkd::Result<()> {
    let root = std::env::temp_dir().join("cidkd_train");
    let mut cfg = ExperimentConfig::default();
    for kv in ["seed=0", "data.train_images=100", "data.test_images=40", "train.epochs=8", "train.warmup_steps=100"] {
        cfg.apply(kv)?;
    }
    let s = cfg.resolve()?;
    let data = prepare_data(&s)?;

    let t = run_training(&cfg, Role::Teacher, &data, None, &root.join("teacher"))?;
    println!("teacher mAP {:.3}", t.final_eval.map);
    let store = Teacher::load_store(&s.teacher, &t.dir.join("model.ckpt"))?;
    let teacher = Teacher::new(s.teacher.clone(), store, &data.train, s.train.hflip)?;

    let plain = run_training(&cfg, Role::Student, &data, None, &root.join("student"))?;
    let mut kd = cfg.clone();
    kd.set("student.light_ml", "true")?;
    let distilled = run_training(&kd, Role::Student, &data, Some(&teacher), &root.join("distilled"))?;
    for (name, run) in [("student", &plain), ("distilled", &distilled)] {
        let e = &run.final_eval;
        println!("{name:<10} mAP {:.3} AP50 {:.3} AP75 {:.3}", e.map, e.ap50, e.ap75);
    }
    println!("runs in {}", root.display());
    Ok(())
}
