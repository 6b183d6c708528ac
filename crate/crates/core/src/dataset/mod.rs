//! Score pages, audio, note alignments, target masks, and the synthetic
//! corpus generator.
//!
//! On disk a piece is a directory:
//!
//! ```text
//! <piece>/page.png    8-bit grayscale, dark ink on white
//! <piece>/audio.wav   mono, 22.05 kHz
//! <piece>/notes.csv   onset_sec,pitch_midi,duration_sec,x_px,y_staff_mid_px
//! <piece>/split       train | valid | test
//! ```
//!
//! In memory page pixels are inverted: ink is 1 and background 0.

mod io;
mod mask;
mod synth;

use std::fmt;
use std::str::FromStr;

pub use io::{load_corpus, load_piece, read_mask_png, read_page_png, save_corpus, save_piece, write_mask_png, write_page_png};
pub use mask::{
    augment_shift, build_target_mask, find_matching_occurrences, note_key, notes_in_excerpt,
    NoteKey, RECT_HALF_HEIGHT,
};
pub use synth::{synth_generate, SynthConfig, PITCH_ALPHABET};

use crate::audio::{self, AudioSignal, Spectrogram};
use crate::error::{Error, Result};

/// One aligned note. Coordinates are in downscaled page pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteAnnotation {
    pub onset: f64,
    pub pitch: u8,
    pub duration: f64,
    pub x: usize,
    /// Row of the middle line of the staff the note sits on.
    pub y_staff_mid: usize,
}

impl NoteAnnotation {
    pub fn onset_frame(&self) -> usize {
        audio::seconds_to_frame(self.onset)
    }
}

/// Grayscale page, ink = 1, background = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorePage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    original_size: (usize, usize),
}

impl ScorePage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim(
                "score_page",
                "pixels",
                format!("{} pixels for {height}x{width}", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("page pixels must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
            original_size: (height, width),
        })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width]).expect("blank page")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub(crate) fn set(&mut self, row: usize, col: usize, v: f64) {
        self.pixels[row * self.width + col] = v;
    }

    /// `(height, width)` of the page before any downscaling.
    pub fn original_size(&self) -> (usize, usize) {
        self.original_size
    }
}

/// Box-filter downscaling by an integer `factor`: each output pixel is the
/// mean of a `factor × factor` block; trailing rows and columns that do not
/// fill a block are dropped.
pub fn downscale_page(pixels: &[f64], height: usize, width: usize, factor: usize) -> Result<ScorePage> {
    if factor == 0 {
        return Err(Error::Argument("downscale factor must be at least 1".into()));
    }
    if pixels.len() != height * width {
        return Err(Error::dim(
            "downscale_page",
            "pixels",
            format!("{} pixels for {height}x{width}", pixels.len()),
        ));
    }
    let (oh, ow) = (height / factor, width / factor);
    let area = (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for (i, row) in out.chunks_exact_mut(ow.max(1)).enumerate().take(oh) {
        for (j, v) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for di in 0..factor {
                let base = (i * factor + di) * width + j * factor;
                s += pixels[base..base + factor].iter().sum::<f64>();
            }
            *v = s / area;
        }
    }
    let mut page = ScorePage::new(oh, ow, out)?;
    page.original_size = (height, width);
    Ok(page)
}

/// Binary page-shaped mask marking regions that match an excerpt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl TargetMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim(
                "target_mask",
                "pixels",
                format!("{} pixels for {height}x{width}", pixels.len()),
            ));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::Input("mask pixels must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().filter(|&&p| p == 1).count()
    }

    /// Sets every pixel in rows `r0..r1`, columns `c0..c1` (half-open),
    /// clipped to the mask.
    pub fn fill_rect(&mut self, r0: isize, r1: isize, c0: isize, c1: isize) {
        let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        let (r0, r1) = (clip(r0, self.height), clip(r1, self.height));
        let (c0, c1) = (clip(c0, self.width), clip(c1, self.width));
        for r in r0..r1 {
            self.pixels[r * self.width + c0..r * self.width + c1.max(c0)].fill(1);
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!(
                "unknown split {other:?}, expected train|valid|test"
            ))),
        }
    }
}

/// A page, its audio, and the onset-ordered note alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Piece {
    name: String,
    page: ScorePage,
    signal: AudioSignal,
    notes: Vec<NoteAnnotation>,
    split: Split,
    spectrogram: Spectrogram,
}

impl Piece {
    /// Validates the alignment against the page and audio and computes the
    /// spectrogram. Notes are sorted by onset (stable).
    pub fn new(
        name: impl Into<String>,
        page: ScorePage,
        signal: AudioSignal,
        mut notes: Vec<NoteAnnotation>,
        split: Split,
    ) -> Result<Self> {
        if notes.is_empty() {
            return Err(Error::Input("no notes".into()));
        }
        notes.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        let spectrogram = audio::spectrogram(&signal)?;
        for (i, n) in notes.iter().enumerate() {
            validate_note(n, &page).map_err(|m| Error::Input(format!("note {i}: {m}")))?;
            if n.onset_frame() >= spectrogram.frames() {
                return Err(Error::Input(format!(
                    "note {i}: onset frame {} beyond audio ({} frames)",
                    n.onset_frame(),
                    spectrogram.frames()
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            page,
            signal,
            notes,
            split,
            spectrogram,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn page(&self) -> &ScorePage {
        &self.page
    }

    pub fn signal(&self) -> &AudioSignal {
        &self.signal
    }

    pub fn notes(&self) -> &[NoteAnnotation] {
        &self.notes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn spectrogram(&self) -> &Spectrogram {
        &self.spectrogram
    }

    /// Distinct onset frames, ascending. These are the excerpt end frames
    /// used for training samples and evaluation.
    pub fn onset_frames(&self) -> Vec<usize> {
        let mut frames: Vec<usize> = self.notes.iter().map(|n| n.onset_frame()).collect();
        frames.dedup();
        frames
    }
}

pub(crate) fn validate_note(n: &NoteAnnotation, page: &ScorePage) -> std::result::Result<(), String> {
    if !(n.onset >= 0.0 && n.onset.is_finite()) {
        return Err(format!("onset {} must be a non-negative number", n.onset));
    }
    if !(n.duration > 0.0 && n.duration.is_finite()) {
        return Err(format!("duration {} must be positive", n.duration));
    }
    if n.x >= page.width() {
        return Err(format!("x {} exceeds page width {}", n.x, page.width()));
    }
    if n.y_staff_mid >= page.height() {
        return Err(format!(
            "y_staff_mid {} exceeds page height {}",
            n.y_staff_mid,
            page.height()
        ));
    }
    Ok(())
}
