//! Forward corruption: empirical mask rates against `1 - alpha_t`, and the
//! one-step transition matrices composing into the closed-form marginal.

use maskdiff::diffusion::TransitionMatrix;
use maskdiff::{MaskDiffusion, MaskabilityMask, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::new("abcdefgh")?;
    let diffusion = MaskDiffusion::for_vocab(&vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let text = "abcdefgh".repeat(4);
    let x0 = vocab.tokenize(&text)?;
    let all = MaskabilityMask::all_maskable(x0.len());
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let xt = diffusion.corrupt(&x0, &all, t, &mut rng)?;
        println!("t={t:.1}  {}", vocab.render(&xt));
    }

    let n = 100_000;
    let zeros = vec![vocab.glyph_id('a').unwrap(); n];
    let all = MaskabilityMask::all_maskable(n);
    println!("\n   t   1-alpha  measured");
    for t in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let xt = diffusion.corrupt(&zeros, &all, t, &mut rng)?;
        let rate = xt.count_of(vocab.mask_id()) as f64 / n as f64;
        println!("{t:5.2}  {:7.4}  {rate:8.4}", 1.0 - diffusion.alpha(t)?);
    }

    // Ten steps of beta = 0.1 against the direct marginal at t = 1 - 0.9^10.
    let step = TransitionMatrix::for_vocab(0.1, &vocab)?;
    let mut product = step.clone();
    for _ in 1..10 {
        product = product.compose(&step)?;
    }
    let direct = TransitionMatrix::for_vocab(1.0 - 0.9f64.powi(10), &vocab)?;
    println!(
        "\nten composed steps vs direct kernel: max |difference| {:.2e}, row-stochastic {}",
        product.max_abs_diff(&direct),
        product.is_row_stochastic(1e-12)
    );
    Ok(())
}
