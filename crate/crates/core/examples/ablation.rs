//! Trains one small model per FiLM placement of the comparison table and
//! writes the table as CSV.
//!
//! cargo run --example ablation -- [out.csv] [max epochs]

use std::path::PathBuf;

use acunet::dataset::{synth_generate, Split, SynthConfig};
use acunet::eval::{ablation, write_ablation_csv};
use acunet::model::{FilmBlocks, ModelConfig, ABLATION_SETS};
use acunet::train::TrainConfig;

fn main() -> acunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("ablation.csv"));
    let max_epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);

    let corpus = synth_generate(
        5,
        &SynthConfig {
            pieces: 12,
            staves_per_page: 1,
            page_height: 32,
            notes_per_piece: 12,
            ..SynthConfig::default()
        },
    )?;
    let sets = ABLATION_SETS
        .iter()
        .map(|s| s.parse())
        .collect::<acunet::Result<Vec<FilmBlocks>>>()?;
    let base = ModelConfig {
        base_filters: 4,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        max_epochs,
        batch_size: 8,
        samples_per_piece: 4,
        ..TrainConfig::default()
    };
    let rows = ablation(&corpus, &sets, &base, &train_config, Split::Test, |row| {
        println!(
            "{:<20} P {:.4}  R {:.4}  F1 {:.4}  (val loss {:.4})",
            row.label(),
            row.metrics.precision,
            row.metrics.recall,
            row.metrics.f1,
            row.val_loss
        );
    })?;
    write_ablation_csv(&out, &rows)?;
    println!("wrote {}", out.display());
    Ok(())
}
