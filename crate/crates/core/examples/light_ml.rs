//! Run the head fusion module and show that it routes gradient between branches.

use cidkd::lightml::{init_params, light_ml_forward, shuffle_permutation, LightMLParams};
use cidkd::tensor::{Graph, ParamBinder, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cidkd::Result<()> {
    println!("shuffle of 8 channels in 2 groups: {:?}", shuffle_permutation(8, 2)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let channels = 16;
    for ratio in [0.0, 0.25, 0.5, 1.0] {
        let p = LightMLParams {
            ratio,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        init_params(&mut store, "lm", channels, &p, &mut rng);
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(&store, true);
        let cls = g.param(Tensor::randn(&[1, channels, 6, 6], 1.0, &mut rng));
        let reg = g.param(Tensor::randn(&[1, channels, 6, 6], 1.0, &mut rng));
        let (_, reg_out) = light_ml_forward(&mut g, &mut binder, "lm", cls, reg, &p)?;
        let loss = g.mean(reg_out);
        g.backward(loss)?;
        let cross: f32 = g.grad(cls).map(|t| t.data().iter().map(|v| v * v).sum::<f32>().sqrt()).unwrap_or(0.0);
        println!(
            "k = {ratio:.2}: {} convolved channels, |d reg_out / d cls| = {cross:.4}",
            p.conv_channels(channels)
        );
    }
    Ok(())
}
