//! Generates a synthetic corpus on disk, reloads it, and writes the target
//! mask of a few excerpts next to the first piece.
//!
//! cargo run --example synth_corpus -- [out dir] [pieces] [seed]

use std::path::PathBuf;

use acunet::dataset::{build_target_mask, load_corpus, notes_in_excerpt, save_corpus, synth_generate, write_mask_png, SynthConfig};

fn main() -> acunet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map(String::as_str).unwrap_or("synth_corpus"));
    let pieces = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let config = SynthConfig {
        pieces,
        ..SynthConfig::default()
    };
    let corpus = synth_generate(seed, &config)?;
    save_corpus(&out, &corpus)?;
    let reloaded = load_corpus(&out)?;
    assert_eq!(reloaded, corpus, "corpus did not survive the disk round-trip");

    for piece in &corpus {
        println!(
            "{}  {:5}  page {}x{}  {} notes  {:.1}s audio  {} spectrogram frames",
            piece.name(),
            piece.split().to_string(),
            piece.page().height(),
            piece.page().width(),
            piece.notes().len(),
            piece.signal().duration_secs(),
            piece.spectrogram().frames()
        );
    }

    let first = &corpus[0];
    for end in first.onset_frames().into_iter().step_by(6) {
        let mask = build_target_mask(first, end);
        let path = out.join(first.name()).join(format!("mask_{end:04}.png"));
        write_mask_png(&mask, &path)?;
        println!(
            "excerpt ending at frame {end}: notes {:?}, {} target pixels -> {}",
            notes_in_excerpt(first, end),
            mask.count_ones(),
            path.display()
        );
    }
    Ok(())
}
