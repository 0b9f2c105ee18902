//! Compare reverse-mode gradients with central differences for a small composite loss.

use cidkd::tensor::{check_gradients, GradCheckConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cidkd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[2, 3, 6, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.3, &mut rng);
    let report = check_gradients(
        "conv-relu-mean",
        &[x, w],
        |g, v| {
            let y = g.conv2d(v[0], v[1], 1, 1)?;
            let y = g.relu(y);
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        &GradCheckConfig::default(),
    )?;
    for input in &report.inputs {
        println!("input {}: {} coordinates, max error {:.2e}", input.index, input.checked, input.max_rel_err);
    }
    println!("worst {:.2e} after {} resamples", report.max_rel_err, report.resamples);
    Ok(())
}
