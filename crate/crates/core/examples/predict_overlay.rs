//! Trains a small model briefly, saves and reloads the checkpoint, and
//! renders its predictions for several excerpts of a test page.
//!
//! cargo run --example predict_overlay -- [out dir] [max epochs]

use std::fs;
use std::path::PathBuf;

use acunet::dataset::{synth_generate, Split, SynthConfig};
use acunet::eval::render_overlay;
use acunet::model::ModelConfig;
use acunet::train::{load_checkpoint, save_checkpoint, train, Sample, TrainConfig};

fn main() -> acunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("overlays"));
    let max_epochs = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    fs::create_dir_all(&out)?;

    let corpus = synth_generate(
        9,
        &SynthConfig {
            pieces: 12,
            staves_per_page: 2,
            page_height: 64,
            notes_per_piece: 24,
            ..SynthConfig::default()
        },
    )?;
    let config = ModelConfig {
        base_filters: 4,
        film_blocks: "C-G".parse()?,
        ..ModelConfig::default()
    };
    let train_config = TrainConfig {
        max_epochs,
        batch_size: 8,
        samples_per_piece: 4,
        ..TrainConfig::default()
    };
    let outcome = train(&corpus, &config, &train_config, |r| {
        println!("epoch {}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss);
        Ok(())
    })?;
    let ckpt = out.join("model.acun");
    save_checkpoint(&ckpt, &outcome.best)?;
    let model = load_checkpoint(&ckpt)?.to_model()?;

    let piece = corpus.iter().find(|p| p.split() == Split::Test).expect("a test piece");
    for end in piece.onset_frames().into_iter().step_by(8) {
        let sample = Sample::at(piece, end)?;
        let probs = model.predict(&[&sample.page], &[&sample.excerpt])?.remove(0);
        let (overlay, map) = render_overlay(&sample.page, &probs, &out.join(format!("frame_{end:04}.png")))?;
        println!("frame {end}: {} and {}", overlay.display(), map.display());
    }
    Ok(())
}
