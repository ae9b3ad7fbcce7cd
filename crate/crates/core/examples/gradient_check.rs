//! Central finite differences against the hand-written backward pass of
//! the tiny transformer.

use maskdiff::denoiser::{TrainExample, TransformerConfig};
use maskdiff::{MaskDiffusion, TinyTransformer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> anyhow::Result<()> {
    let mut model = TinyTransformer::new(TransformerConfig {
        vocab_size: 6,
        mask_id: 5,
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        max_len: 5,
        init_std: 0.3,
        seed: 9,
    })?;
    // The output head starts at zero, which would zero every other
    // gradient; move to a generic point first.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let generic: Vec<f64> = (0..model.params.num_params())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.params.set_from_flat(&generic)?;
    let diffusion = MaskDiffusion::new(5);
    let batch = vec![
        TrainExample { x0: vec![0, 1, 2, 3, 4], xt: vec![0, 5, 2, 5, 5], t: 0.6 },
        TrainExample { x0: vec![4, 4, 1, 0, 2], xt: vec![5, 4, 5, 0, 2], t: 0.4 },
    ];
    let (loss, grads) = model.loss_and_grad(&batch, &diffusion)?;
    println!("loss {loss:.6}, {} parameters", model.params.num_params());

    let h = 1e-4;
    let flat = model.params.flatten();
    let analytic = grads.flatten();
    let mut probe = model.params.clone();
    let mut worst: f64 = 0.0;
    let mut zero_grads = 0;
    for i in 0..flat.len() {
        let mut bumped = flat.clone();
        bumped[i] += h;
        probe.set_from_flat(&bumped)?;
        let up = model.batch_loss(&probe, &batch, &diffusion)?;
        bumped[i] -= 2.0 * h;
        probe.set_from_flat(&bumped)?;
        let down = model.batch_loss(&probe, &batch, &diffusion)?;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
        zero_grads += (analytic[i].abs() < 1e-12) as usize;
    }
    println!("max relative error {worst:.2e}, {zero_grads} components with zero gradient");
    Ok(())
}
