//! Computes the log-frequency spectrogram of a synthetic piece and shows
//! that each note's strongest band sits at its pitch.
//!
//! cargo run --example spectrogram

use acunet::audio::{excerpt, filter_centers, EXCERPT_FRAMES, NUM_BANDS};
use acunet::dataset::{synth_generate, SynthConfig};

fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((f64::from(pitch) - 69.0) / 12.0)
}

fn main() -> acunet::Result<()> {
    let config = SynthConfig {
        pieces: 1,
        notes_per_piece: 12,
        ..SynthConfig::default()
    };
    let piece = synth_generate(3, &config)?.remove(0);
    let spec = piece.spectrogram();
    let centers = filter_centers();
    println!("{} bands x {} frames", spec.bands(), spec.frames());
    println!("onset  pitch     Hz   peak band  band center");
    for n in piece.notes() {
        let band = spec.argmax_band(n.onset_frame() + 2);
        println!(
            "{:5.2}  {:5}  {:6.1}  {:9}  {:11.1}",
            n.onset,
            n.pitch,
            midi_to_hz(n.pitch),
            band,
            centers[band]
        );
    }

    let last = piece.notes().last().expect("notes").onset_frame();
    let ex = excerpt(spec, last)?;
    let energy: f64 = ex.values().iter().sum();
    println!(
        "excerpt ending at frame {last}: {NUM_BANDS}x{EXCERPT_FRAMES}, total log energy {energy:.2}"
    );
    Ok(())
}
