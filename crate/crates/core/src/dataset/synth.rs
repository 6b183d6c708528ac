//! Deterministic synthetic pieces: staff-line pages with pitch-positioned
//! noteheads, decaying-sine audio, and alignments that are exact by
//! construction.
//!
//! Melodies are stitched together from a small per-piece pool of motifs over
//! a five-pitch alphabet, so the same phrase regularly shows up at several
//! places on a page.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NoteAnnotation, Piece, ScorePage, Split};
use crate::audio::{AudioSignal, SAMPLE_RATE};
use crate::error::{Error, Result};

/// G4 A4 B4 C5 D5: second staff line up to the fourth, one staff step apart.
pub const PITCH_ALPHABET: [u8; 5] = [67, 69, 71, 72, 74];

const DURATIONS: [f64; 2] = [0.25, 0.5];
const LINE_GAP: isize = 4;
const MARGIN: usize = 8;
const FIRST_ONSET: f64 = 0.5;
const TAIL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub pieces: usize,
    pub notes_per_piece: usize,
    pub staves_per_page: usize,
    pub page_height: usize,
    pub page_width: usize,
    /// Horizontal distance between consecutive noteheads.
    pub note_spacing: usize,
    /// Distinct motifs each melody is assembled from.
    pub motifs_per_piece: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pieces: 48,
            notes_per_piece: 36,
            staves_per_page: 3,
            page_height: 96,
            page_width: 128,
            note_spacing: 8,
            motifs_per_piece: 3,
            valid_fraction: 1.0 / 6.0,
            test_fraction: 1.0 / 6.0,
        }
    }
}

impl SynthConfig {
    fn staff_pitch(&self) -> usize {
        self.page_height / self.staves_per_page.max(1)
    }

    fn notes_per_staff(&self) -> usize {
        (self.page_width.saturating_sub(2 * MARGIN)) / self.note_spacing.max(1) + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("pieces", self.pieces),
            ("notes_per_piece", self.notes_per_piece),
            ("staves_per_page", self.staves_per_page),
            ("note_spacing", self.note_spacing),
            ("motifs_per_piece", self.motifs_per_piece),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth {name} must be positive")));
        }
        if self.staff_pitch() < 24 {
            return Err(Error::Config(format!(
                "{} staves do not fit on a page {} px tall (need 24 px each)",
                self.staves_per_page, self.page_height
            )));
        }
        if self.page_width < 2 * MARGIN + 1 {
            return Err(Error::Config("page too narrow".into()));
        }
        let capacity = self.notes_per_staff() * self.staves_per_page;
        if self.notes_per_piece > capacity {
            return Err(Error::Config(format!(
                "{} notes do not fit on a page holding {capacity}",
                self.notes_per_piece
            )));
        }
        let fractions = [self.valid_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || fractions.iter().sum::<f64>() >= 1.0 {
            return Err(Error::Config("split fractions must be in [0, 1) and sum below 1".into()));
        }
        Ok(())
    }

    /// `(train, valid, test)` piece counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let valid = (self.pieces as f64 * self.valid_fraction).round() as usize;
        let test = (self.pieces as f64 * self.test_fraction).round() as usize;
        let train = self.pieces.saturating_sub(valid + test);
        (train, valid, test)
    }
}

/// Generates `config.pieces` pieces; identical seeds give identical corpora.
pub fn synth_generate(seed: u64, config: &SynthConfig) -> Result<Vec<Piece>> {
    config.validate()?;
    let (train, valid, _) = config.split_counts();
    (0..config.pieces)
        .map(|i| {
            let split = if i < train {
                Split::Train
            } else if i < train + valid {
                Split::Valid
            } else {
                Split::Test
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_piece(&mut rng, config, format!("piece_{i:03}"), split)
        })
        .collect()
}

type Motif = Vec<(u8, f64)>;

fn generate_piece(rng: &mut ChaCha8Rng, config: &SynthConfig, name: String, split: Split) -> Result<Piece> {
    let motifs: Vec<Motif> = (0..config.motifs_per_piece)
        .map(|_| {
            let len = rng.random_range(3..=5);
            (0..len)
                .map(|_| {
                    let pitch = PITCH_ALPHABET[rng.random_range(0..PITCH_ALPHABET.len())];
                    let dur = DURATIONS[rng.random_range(0..DURATIONS.len())];
                    (pitch, dur)
                })
                .collect()
        })
        .collect();
    let mut melody: Vec<(u8, f64)> = Vec::with_capacity(config.notes_per_piece + 5);
    while melody.len() < config.notes_per_piece {
        melody.extend_from_slice(&motifs[rng.random_range(0..motifs.len())]);
    }
    melody.truncate(config.notes_per_piece);

    let per_staff = config.notes_per_staff();
    let staff_pitch = config.staff_pitch();
    let mut page = ScorePage::blank(config.page_height, config.page_width);
    for s in 0..config.staves_per_page {
        draw_staff(&mut page, staff_mid(s, staff_pitch));
    }
    let mut notes = Vec::with_capacity(melody.len());
    let mut onset = FIRST_ONSET;
    for (j, &(pitch, duration)) in melody.iter().enumerate() {
        let y_staff_mid = staff_mid(j / per_staff, staff_pitch);
        let x = MARGIN + (j % per_staff) * config.note_spacing;
        draw_note(&mut page, x, y_staff_mid, pitch, duration);
        notes.push(NoteAnnotation {
            onset,
            pitch,
            duration,
            x,
            y_staff_mid,
        });
        onset += duration;
    }
    let signal = render_audio(&notes, onset + TAIL)?;
    Piece::new(name, page, signal, notes, split)
}

fn staff_mid(staff: usize, staff_pitch: usize) -> usize {
    staff * staff_pitch + staff_pitch / 2
}

fn ink(page: &mut ScorePage, row: isize, col: isize) {
    if row >= 0 && col >= 0 && (row as usize) < page.height() && (col as usize) < page.width() {
        page.set(row as usize, col as usize, 1.0);
    }
}

fn draw_staff(page: &mut ScorePage, mid: usize) {
    for line in -2..=2 {
        let row = mid as isize + line * LINE_GAP;
        for col in MARGIN / 2..page.width() - MARGIN / 2 {
            ink(page, row, col as isize);
        }
    }
}

/// Row of a pitch's notehead: each alphabet step moves half a line gap.
pub(crate) fn notehead_row(mid: usize, pitch: u8) -> isize {
    let step = PITCH_ALPHABET.iter().position(|&p| p == pitch).unwrap_or(2) as isize;
    mid as isize + LINE_GAP - step * (LINE_GAP / 2)
}

fn draw_note(page: &mut ScorePage, x: usize, mid: usize, pitch: u8, duration: f64) {
    let (r, c) = (notehead_row(mid, pitch), x as isize);
    for dr in -1..=1 {
        for dc in -1..=1 {
            ink(page, r + dr, c + dc);
        }
    }
    for dr in 2..=7 {
        ink(page, r - dr, c + 1);
    }
    if duration < 0.5 {
        ink(page, r - 7, c + 2);
        ink(page, r - 6, c + 3);
    }
}

fn render_audio(notes: &[NoteAnnotation], total_secs: f64) -> Result<AudioSignal> {
    let sr = SAMPLE_RATE as f64;
    let mut samples = vec![0.0_f64; (total_secs * sr).ceil() as usize];
    let attack = 0.005 * sr;
    let release = 0.02 * sr;
    for n in notes {
        let freq = 440.0 * 2f64.powf((n.pitch as f64 - 69.0) / 12.0);
        let start = (n.onset * sr).round() as usize;
        let len = (n.duration * sr).round() as usize;
        for i in 0..len {
            let Some(slot) = samples.get_mut(start + i) else { break };
            let t = i as f64 / sr;
            let fi = i as f64;
            let mut env = (-t / 0.4).exp();
            if fi < attack {
                env *= fi / attack;
            }
            let remaining = (len - i) as f64;
            if remaining < release {
                env *= remaining / release;
            }
            let phase = 2.0 * std::f64::consts::PI * freq * t;
            *slot += 0.4 * env * (phase.sin() + 0.25 * (2.0 * phase).sin());
        }
    }
    // Quantize to f32 so the signal survives a float WAV round trip exactly.
    let samples = samples
        .into_iter()
        .map(|s| s.clamp(-1.0, 1.0) as f32 as f64)
        .collect();
    AudioSignal::new(samples, SAMPLE_RATE)
}
