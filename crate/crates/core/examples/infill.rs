//! Fill-in-the-middle with protected prefix and suffix.

use maskdiff::sampler::{infill, DecodePolicy};
use maskdiff::{TabularDenoiser, ToyDistribution, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    // Glyphs a, b, c; four-token palindromes only.
    let vocab = Vocabulary::new("abc")?;
    let glyph = |c| vocab.glyph_id(c).unwrap();
    let mut seqs = Vec::new();
    for x in "abc".chars() {
        for y in "abc".chars() {
            seqs.push(vec![glyph(x), glyph(y), glyph(y), glyph(x)]);
        }
    }
    let oracle = TabularDenoiser::new(ToyDistribution::uniform(vocab.size(), vocab.mask_id(), seqs)?);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let policy = DecodePolicy::quota(2).with_temperature(1.0);

    for (prefix, suffix) in [("a", "ba"), ("c", "cc"), ("ab", "a")] {
        let p = vocab.tokenize(prefix)?;
        let s = vocab.tokenize(suffix)?;
        let hole = 4 - p.len() - s.len();
        let filled = infill(&p, &s, hole, &oracle, &policy, &mut rng)?;
        println!("{prefix}[{}]{suffix}", vocab.render(&filled));
    }
    Ok(())
}
