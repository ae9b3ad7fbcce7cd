//! The three-stage recipe on the copy task: pre-training, curriculum
//! mid-training, then prompt-conditioned fine-tuning with early stopping.
//!
//! `cargo run --release --example train_copy -- [sft_epochs] [out_dir]`

use std::path::PathBuf;
use std::time::Instant;

use maskdiff::eval::evaluate;
use maskdiff::toy::{ToyRun, ToyRunConfig};
use maskdiff::trainer::run_recipe;
use maskdiff::TinyTransformer;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut config = ToyRunConfig::copy();
    if let Some(epochs) = args.next() {
        config.sft_epochs = epochs.parse()?;
    }
    let out: Option<PathBuf> = args.next().map(PathBuf::from);
    let run = ToyRun::build(config)?;
    println!(
        "copy task, {} training pairs, sequence length {}, {} parameters",
        run.train.len(),
        run.layout.seq_len(),
        TinyTransformer::new(run.recipe.model.clone())?.params.num_params()
    );

    let begin = Instant::now();
    let score = |m: &TinyTransformer| {
        let s = run.validation_score(m)?;
        println!("  validation exact match {s:.3} at {:.0}s", begin.elapsed().as_secs_f64());
        Ok(s)
    };
    let result = run_recipe(&run.recipe, &run.corpora, out.as_deref(), Some(&score))?;
    for stage in [&result.pretrain, &result.midtrain, &result.sft] {
        let n = stage.log.records.len();
        println!(
            "{}: {n} steps, loss {:.2} -> {:.2}",
            stage.log.stage,
            stage.log.mean_loss(0..n.min(10)),
            stage.log.mean_loss(n.saturating_sub(10)..n)
        );
    }
    println!("trained in {:.0}s", begin.elapsed().as_secs_f64());

    let policy = run.policy(run.layout.response_width);
    let n = run.test.cases.len();
    for (name, model) in [("mid-trained", &result.midtrain.model), ("fine-tuned", &result.sft.model)] {
        let report = evaluate(model, &run.test, &policy, n, 0)?;
        println!("{name:12} held-out exact match {:.3}", report.exact_match);
    }
    Ok(())
}
