//! Teacher-student cosine distance of the regression maps around small objects.

use cidkd::detector::{init_params, predict, ModelConfig};
use cidkd::eval::cosine_distance_map;
use cidkd::synth::{generate_scene, SceneSpec};
use cidkd::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cidkd::Result<()> {
    let scene = generate_scene(&SceneSpec::default(), 3)?;
    let x = Tensor::new([&[1], scene.image.shape()].concat(), scene.image.data().to_vec())?;
    let (tc, sc) = (ModelConfig::teacher(), ModelConfig::student());
    let t = predict(&tc, &init_params(&tc, &mut ChaCha8Rng::seed_from_u64(0))?, &x)?;
    let s = predict(&sc, &init_params(&sc, &mut ChaCha8Rng::seed_from_u64(1))?, &x)?;
    for (tl, sl) in t.levels.iter().zip(&s.levels) {
        let m = cosine_distance_map(&tl.reg_map, &sl.reg_map)?;
        let near = m.mean_near(&scene.annotations, tl.stride, 0.75, |_| true);
        println!("stride {}: mean distance {:.4}, near objects {near:?}", tl.stride, m.mean());
    }
    Ok(())
}
