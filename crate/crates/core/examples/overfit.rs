//! Drives the training loss on four fixed samples towards zero, the basic
//! sanity check that forward, backward, and optimizer fit together.
//!
//! cargo run --example overfit -- [max steps]

use acunet::dataset::{synth_generate, SynthConfig};
use acunet::model::{Model, ModelConfig};
use acunet::train::{Batch, Learner, Sample, TrainConfig};

fn main() -> acunet::Result<()> {
    let max_steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let config = SynthConfig {
        pieces: 1,
        staves_per_page: 2,
        page_height: 64,
        notes_per_piece: 24,
        ..SynthConfig::default()
    };
    let piece = synth_generate(3, &config)?.remove(0);
    let frames = piece.onset_frames();
    let stride = frames.len() / 4;
    let samples = (0..4)
        .map(|i| Sample::at(&piece, frames[i * stride + stride / 2]))
        .collect::<acunet::Result<Vec<_>>>()?;
    let batch = Batch::new(&samples.iter().collect::<Vec<_>>())?;

    let model = Model::build(
        ModelConfig {
            base_filters: 4,
            film_blocks: "C-G".parse()?,
            ..ModelConfig::default()
        },
        1,
    )?;
    let mut learner = Learner::new(model, TrainConfig::default().weight_decay);
    for step in 1..=max_steps {
        let loss = learner.step(&batch, 1e-3)?;
        if step % 50 == 0 || loss < 0.1 {
            println!("step {step:5}  dice loss {loss:.4}");
        }
        if loss < 0.1 {
            break;
        }
    }
    Ok(())
}
