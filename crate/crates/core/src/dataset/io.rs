use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};

use super::{validate_note, NoteAnnotation, Piece, ScorePage, Split, TargetMask};
use crate::audio::AudioSignal;
use crate::error::{Error, Result};

const PAGE_FILE: &str = "page.png";
const AUDIO_FILE: &str = "audio.wav";
const NOTES_FILE: &str = "notes.csv";
const SPLIT_FILE: &str = "split";
const NOTES_HEADER: [&str; 5] = ["onset_sec", "pitch_midi", "duration_sec", "x_px", "y_staff_mid_px"];

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingFile(path))
    }
}

/// Reads a grayscale PNG as a page: dark ink becomes 1, white becomes 0.
pub fn read_page_png(path: &Path) -> Result<ScorePage> {
    let img = image::open(require(path.to_path_buf())?)?.into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| (255 - p.0[0]) as f64 / 255.0).collect();
    ScorePage::new(h as usize, w as usize, pixels)
}

/// Writes a page as 8-bit grayscale PNG, ink dark. Pixel values that are
/// multiples of 1/255 round-trip exactly through [`read_page_png`].
pub fn write_page_png(page: &ScorePage, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(page.width() as u32, page.height() as u32, |x, y| {
        let v = page.get(y as usize, x as usize);
        Luma([255 - (v * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Masks are stored as 0/255 grayscale; anything at or above 128 reads as 1.
pub fn read_mask_png(path: &Path) -> Result<TargetMask> {
    let img = image::open(require(path.to_path_buf())?)?.into_luma8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    TargetMask::new(h as usize, w as usize, pixels)
}

pub fn write_mask_png(mask: &TargetMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([mask.get(y as usize, x as usize) * 255])
    });
    img.save(path)?;
    Ok(())
}

fn load_error(file: &Path, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_notes(path: &Path, page: &ScorePage) -> Result<Vec<NoteAnnotation>> {
    let path = require(path.to_path_buf())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(&path)?;
    let header = reader.headers()?.clone();
    if header.is_empty() {
        return Err(load_error(&path, Some(1), "no notes"));
    }
    if header.iter().collect::<Vec<_>>() != NOTES_HEADER {
        return Err(load_error(
            &path,
            Some(1),
            format!("expected header {}", NOTES_HEADER.join(",")),
        ));
    }
    let mut notes = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let record = record.map_err(|e| load_error(&path, Some(line), e.to_string()))?;
        if record.len() != NOTES_HEADER.len() {
            return Err(load_error(
                &path,
                Some(line),
                format!("expected {} fields, got {}", NOTES_HEADER.len(), record.len()),
            ));
        }
        let num = |idx: usize| -> Result<f64> {
            record[idx].parse::<f64>().map_err(|_| {
                load_error(
                    &path,
                    Some(line),
                    format!("{}: cannot parse {:?}", NOTES_HEADER[idx], &record[idx]),
                )
            })
        };
        let index = |idx: usize| -> Result<usize> {
            let v = num(idx)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(load_error(
                    &path,
                    Some(line),
                    format!("{} must be a non-negative integer, got {v}", NOTES_HEADER[idx]),
                ));
            }
            Ok(v as usize)
        };
        let pitch = index(1)?;
        if pitch > 127 {
            return Err(load_error(&path, Some(line), format!("pitch {pitch} outside MIDI range")));
        }
        let note = NoteAnnotation {
            onset: num(0)?,
            pitch: pitch as u8,
            duration: num(2)?,
            x: index(3)?,
            y_staff_mid: index(4)?,
        };
        validate_note(&note, page).map_err(|m| load_error(&path, Some(line), m))?;
        notes.push(note);
    }
    if notes.is_empty() {
        return Err(load_error(&path, None, "no notes"));
    }
    Ok(notes)
}

fn write_notes(path: &Path, notes: &[NoteAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(NOTES_HEADER)?;
    for n in notes {
        w.write_record([
            n.onset.to_string(),
            n.pitch.to_string(),
            n.duration.to_string(),
            n.x.to_string(),
            n.y_staff_mid.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates one piece directory.
pub fn load_piece(dir: &Path) -> Result<Piece> {
    let page = read_page_png(&dir.join(PAGE_FILE))?;
    let notes = read_notes(&dir.join(NOTES_FILE), &page)?;
    let signal = AudioSignal::read_wav(&dir.join(AUDIO_FILE))?;
    let split_path = require(dir.join(SPLIT_FILE))?;
    let split = fs::read_to_string(&split_path)?
        .parse::<Split>()
        .map_err(|e| load_error(&split_path, Some(1), e.to_string()))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Piece::new(name, page, signal, notes, split).map_err(|e| match e {
        Error::Input(m) => load_error(dir, None, m),
        other => other,
    })
}

pub fn save_piece(dir: &Path, piece: &Piece) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_page_png(piece.page(), &dir.join(PAGE_FILE))?;
    piece.signal().write_wav(&dir.join(AUDIO_FILE))?;
    write_notes(&dir.join(NOTES_FILE), piece.notes())?;
    fs::write(dir.join(SPLIT_FILE), format!("{}\n", piece.split()))?;
    Ok(())
}

/// Loads every piece directory under `root` (those holding a `notes.csv`),
/// in name order.
pub fn load_corpus(root: &Path) -> Result<Vec<Piece>> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(NOTES_FILE).is_file())
        .collect();
    dirs.sort();
    dirs.iter().map(|d| load_piece(d)).collect()
}

/// Writes each piece to `root/<piece name>/`.
pub fn save_corpus(root: &Path, pieces: &[Piece]) -> Result<()> {
    for p in pieces {
        save_piece(&root.join(p.name()), p)?;
    }
    Ok(())
}
