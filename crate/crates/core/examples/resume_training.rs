//! Checkpoint mid-stage, resume, and compare against an uninterrupted run.

use maskdiff::data::ToyTask;
use maskdiff::toy::{ToyRun, ToyRunConfig};
use maskdiff::trainer::{checkpoint_path, train_stage, Stage, TrainOptions};
use maskdiff::TinyTransformer;

fn main() -> anyhow::Result<()> {
    let run = ToyRun::build(ToyRunConfig::smoke(ToyTask::Copy))?;
    let mut config = run.recipe.pretrain.clone();
    config.steps = Some(20);
    config.checkpoint_every = Some(10);
    let dir = tempfile::tempdir()?;
    let fresh = || TinyTransformer::new(run.recipe.model.clone());

    let straight = train_stage(&config, fresh()?, &run.corpora.pretrain, &TrainOptions::default())?;
    let with_ckpt = TrainOptions { checkpoint_dir: Some(dir.path()), ..Default::default() };
    train_stage(&config, fresh()?, &run.corpora.pretrain, &with_ckpt)?;

    let resume_dir = checkpoint_path(dir.path(), Stage::Pretrain, 10);
    println!("resuming from {}", resume_dir.display());
    let resumed = train_stage(
        &config,
        fresh()?,
        &run.corpora.pretrain,
        &TrainOptions { resume_from: Some(&resume_dir), ..Default::default() },
    )?;
    let identical = straight.model.params.flatten() == resumed.model.params.flatten();
    println!("final loss {:.6} vs {:.6}", straight.log.records[19].loss, resumed.log.records[19].loss);
    println!("parameters bit-identical: {identical}");
    Ok(())
}
