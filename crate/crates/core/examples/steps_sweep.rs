//! Accuracy and latency against the number of decoding steps, with a linear
//! fit of latency. Trains a small reverse-task model first.

use maskdiff::data::ToyTask;
use maskdiff::eval::{linear_fit, sweep_csv, sweep_steps};
use maskdiff::toy::{ToyRun, ToyRunConfig};
use maskdiff::trainer::run_recipe;

fn main() -> anyhow::Result<()> {
    let mut config = ToyRunConfig::smoke(ToyTask::Reverse);
    config.train_size = 512;
    config.sft_epochs = 6;
    config.model.d_model = 32;
    config.model.d_ff = 64;
    let run = ToyRun::build(config)?;
    let result = run_recipe(&run.recipe, &run.corpora, None, None)?;

    let gen_len = run.layout.response_width;
    let steps: Vec<usize> = (0..).map(|k| 1 << k).take_while(|&s| s < gen_len).chain([gen_len]).collect();
    let rows = sweep_steps(&result.sft.model, &run.test, &run.policy(gen_len), &steps, 3, run.test.cases.len(), 0)?;
    print!("{}", sweep_csv(&rows));
    let xs: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_ms).collect();
    let fit = linear_fit(&xs, &ys)?;
    println!(
        "latency ~ {:.3} ms/step + {:.3} ms, R^2 {:.4}",
        fit.slope, fit.intercept, fit.r_squared
    );
    Ok(())
}
