//! Packing documents into fixed-length sequences and persisting them as a
//! checksummed binary shard.

use maskdiff::data::{ingest_text, read_shard, write_shard, OversizePolicy, PackConfig, PackMode};
use maskdiff::Vocabulary;

fn main() -> anyhow::Result<()> {
    let vocab = Vocabulary::new("abcdefghijklmnopqrstuvwxyz ")?;
    let text = "hello world\nmasked diffusion\nfills the middle\na\nlonger document that spans several rows\n";
    for mode in [PackMode::Concatenate, PackMode::RespectBoundaries] {
        let config = PackConfig {
            seq_len: 16,
            mode,
            oversize: OversizePolicy::Split,
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        };
        let shard = ingest_text(text, &vocab, &config)?;
        println!("{mode:?}: {} sequences, {} non-pad tokens", shard.len(), shard.non_pad_count());
        for (i, seq) in shard.sequences().enumerate() {
            println!("  |{}|  docs {:?}", vocab.render(seq), shard.doc_ids(i));
        }
    }

    let dir = tempfile::tempdir()?;
    let prefix = dir.path().join("demo");
    let shard = ingest_text(text, &vocab, &PackConfig {
        seq_len: 16,
        mode: PackMode::Concatenate,
        oversize: OversizePolicy::Split,
        pad_id: vocab.pad_id(),
        eos_id: vocab.eos_id(),
    })?;
    let (bin, json) = write_shard(&prefix, &shard)?;
    let back = read_shard(&prefix)?;
    println!("\nwrote {} and {}; read back identical: {}", bin.display(), json.display(), back == shard);

    let mut bytes = std::fs::read(&bin)?;
    bytes[0] ^= 1;
    std::fs::write(&bin, bytes)?;
    println!("after flipping one bit: {}", read_shard(&prefix).unwrap_err());
    Ok(())
}
