//! Toy corpora, packing into fixed-length sequences, batching and shard
//! files.

mod pack;
mod sft;
mod shard;
mod tasks;

pub use pack::{
    batch_iter, epoch_batches, pack, OversizePolicy, PackConfig, PackMode, PackedShard, Segment, TrainSequence,
};
pub use sft::{task_documents, task_examples, SftExample, SftLayout};
pub use shard::{read_shard, write_shard, ShardSidecar, SHARD_FORMAT_VERSION};
pub use tasks::{generate_toy_corpus, held_out_samples, TaskSample, TaskSpec, ToyTask};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// One document per non-empty line of UTF-8 text.
pub fn ingest_text(text: &str, vocab: &Vocabulary, config: &PackConfig) -> Result<PackedShard> {
    let docs = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.tokenize(l).map(|s| s.into_inner()))
        .collect::<Result<Vec<_>>>()?;
    pack(docs, config)
}

#[derive(Deserialize)]
struct SftRecord {
    prompt: String,
    response: String,
}

/// JSONL with one `{"prompt": .., "response": ..}` object per line.
pub fn ingest_sft_jsonl(text: &str, vocab: &Vocabulary, layout: &SftLayout) -> Result<PackedShard> {
    let examples = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let rec: SftRecord =
                serde_json::from_str(l).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            SftExample::from_text(&rec.prompt, &rec.response, vocab, layout.seq_len())
        })
        .collect::<Result<Vec<_>>>()?;
    layout.shard(&examples, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_formats() {
        let vocab = Vocabulary::new("abc").unwrap();
        let config = PackConfig {
            seq_len: 8,
            mode: PackMode::Concatenate,
            oversize: OversizePolicy::Split,
            pad_id: vocab.pad_id(),
            eos_id: vocab.eos_id(),
        };
        let shard = ingest_text("abc\n\nba\n", &vocab, &config).unwrap();
        assert_eq!(vocab.render(shard.sequence(0)), "abc$ba$.");
        assert!(ingest_text("abz", &vocab, &config).is_err());

        let layout = SftLayout {
            prompt_width: 3,
            response_width: 3,
        };
        let jsonl = "{\"prompt\":\"ab\",\"response\":\"ba\"}\n{\"prompt\":\"c\",\"response\":\"c\"}\n";
        let shard = ingest_sft_jsonl(jsonl, &vocab, &layout).unwrap();
        assert_eq!(shard.len(), 2);
        assert_eq!(shard.prompt_len, 4);
        assert_eq!(vocab.render(shard.sequence(1)), "c..|c$$");
        assert!(ingest_sft_jsonl("{\"prompt\":1}", &vocab, &layout).is_err());
    }
}
