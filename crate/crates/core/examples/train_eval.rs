//! Trains a FiLM-conditioned model and an unconditioned one on a synthetic
//! corpus and compares them on the test split.
//!
//! cargo run --example train_eval -- [film blocks] [samples per piece] [max epochs] [batch size] [staves]

use std::time::Instant;

use acunet::dataset::{synth_generate, Split, SynthConfig};
use acunet::eval::{evaluate, Constant, DEFAULT_THRESHOLD};
use acunet::model::{FilmBlocks, ModelConfig};
use acunet::train::{train, TrainConfig};

fn main() -> acunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let film: FilmBlocks = args.first().map(String::as_str).unwrap_or("C-G").parse()?;
    let samples_per_piece = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let max_epochs = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let batch_size = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let staves: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3);

    let synth = SynthConfig {
        staves_per_page: staves,
        page_height: 32 * staves,
        notes_per_piece: 12 * staves,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(7, &synth)?;
    let baseline = evaluate(&corpus, Split::Test, &Constant(1.0), DEFAULT_THRESHOLD, 32)?;
    println!("always-positive test F1 {:.4}", baseline.micro.f1);

    let train_config = TrainConfig {
        samples_per_piece,
        max_epochs,
        batch_size,
        seed: 1,
        ..TrainConfig::default()
    };
    for blocks in [film, FilmBlocks::none()] {
        let config = ModelConfig {
            film_blocks: blocks,
            ..ModelConfig::default()
        };
        let start = Instant::now();
        let outcome = train(&corpus, &config, &train_config, |r| {
            println!(
                "[{blocks}] epoch {:3}  train {:.4}  val {:.4}  lr {:.2e}  {:.0}s",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.lr,
                start.elapsed().as_secs_f64()
            );
            Ok(())
        })?;
        let model = outcome.best.to_model()?;
        let report = evaluate(&corpus, Split::Test, &model, DEFAULT_THRESHOLD, 32)?;
        println!(
            "[{blocks}] best epoch {} val {:.4}  test P {:.4} R {:.4} F1 {:.4}",
            outcome.best.epoch, outcome.best.val_loss, report.micro.precision, report.micro.recall, report.micro.f1
        );
    }
    Ok(())
}
