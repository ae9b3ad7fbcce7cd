//! Threshold-based parallel decoding: lower thresholds commit more tokens
//! per step. Uses an exact oracle so only the commit schedule varies.

use maskdiff::sampler::{generate_traced, DecodePolicy};
use maskdiff::{TabularDenoiser, ToyDistribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    // Four-token sequences over {0, 1}; mask is 2. Mostly constant runs.
    let mut entries = Vec::new();
    for code in 0..16u32 {
        let seq: Vec<u32> = (0..4).map(|i| (code >> i) & 1).collect();
        let flips = seq.windows(2).filter(|w| w[0] != w[1]).count();
        entries.push((seq, 0.2f64.powi(flips as i32)));
    }
    let oracle = TabularDenoiser::new(ToyDistribution::new(3, 2, entries)?);

    for (name, policy) in [
        ("quota, 4 steps", DecodePolicy::quota(4)),
        ("quota, 2 steps", DecodePolicy::quota(2)),
        ("threshold -0.6", DecodePolicy::threshold(-0.6)),
        ("threshold -0.3", DecodePolicy::threshold(-0.3)),
        ("threshold -inf", DecodePolicy::threshold(f64::NEG_INFINITY)),
    ] {
        let trace = generate_traced(&[1], 3, &oracle, &policy, &mut ChaCha8Rng::seed_from_u64(0))?;
        println!(
            "{name:16} commits per step {:?} -> {:?}",
            trace.commits,
            trace.sequence.as_slice()
        );
    }
    Ok(())
}
