use std::ops::Range;

use super::{Piece, ScorePage, TargetMask};
use crate::audio::{seconds_to_frame, EXCERPT_FRAMES};
use crate::dataset::NoteAnnotation;
use crate::error::{Error, Result};

/// Target rectangles span `y_staff_mid − 10 .. y_staff_mid + 10`.
pub const RECT_HALF_HEIGHT: usize = 10;

/// Symbolic identity of a note for matching: MIDI pitch and duration in
/// whole frames.
pub type NoteKey = (u8, usize);

pub fn note_key(n: &NoteAnnotation) -> NoteKey {
    (n.pitch, seconds_to_frame(n.duration))
}

/// Index range of the notes whose onset frame lies in
/// `end_frame − 39 ..= end_frame`. Notes are onset-ordered, so the set is
/// contiguous.
pub fn notes_in_excerpt(piece: &Piece, end_frame: usize) -> Range<usize> {
    notes_in_window(piece.notes(), end_frame)
}

pub(crate) fn notes_in_window(notes: &[NoteAnnotation], end_frame: usize) -> Range<usize> {
    let first = end_frame.saturating_sub(EXCERPT_FRAMES - 1);
    let start = notes.partition_point(|n| n.onset_frame() < first);
    let end = notes.partition_point(|n| n.onset_frame() <= end_frame);
    start..end.max(start)
}

/// Every start position where `notes[i..i + query.len()]` has exactly the
/// query's key sequence. Overlapping occurrences are all reported.
pub fn find_matching_occurrences(query: &[NoteKey], notes: &[NoteAnnotation]) -> Vec<Range<usize>> {
    if query.is_empty() || query.len() > notes.len() {
        return Vec::new();
    }
    let keys: Vec<NoteKey> = notes.iter().map(note_key).collect();
    keys.windows(query.len())
        .enumerate()
        .filter(|(_, w)| *w == query)
        .map(|(i, _)| i..i + query.len())
        .collect()
}

/// Rasterizes the mask for the excerpt ending at `end_frame`: one
/// 20-row rectangle per staff segment of every occurrence of the excerpt's
/// note sequence, spanning the first to the last note's x inclusive.
pub fn build_target_mask(piece: &Piece, end_frame: usize) -> TargetMask {
    let page = piece.page();
    let notes = piece.notes();
    let mut mask = TargetMask::zeros(page.height(), page.width());
    let window = notes_in_window(notes, end_frame);
    if window.is_empty() {
        return mask;
    }
    let query: Vec<NoteKey> = notes[window].iter().map(note_key).collect();
    for occurrence in find_matching_occurrences(&query, notes) {
        rasterize_occurrence(&mut mask, &notes[occurrence]);
    }
    mask
}

fn rasterize_occurrence(mask: &mut TargetMask, notes: &[NoteAnnotation]) {
    let half = RECT_HALF_HEIGHT as isize;
    for segment in notes.chunk_by(|a, b| a.y_staff_mid == b.y_staff_mid) {
        let x0 = segment.iter().map(|n| n.x).min().unwrap_or(0) as isize;
        let x1 = segment.iter().map(|n| n.x).max().unwrap_or(0) as isize;
        let y = segment[0].y_staff_mid as isize;
        mask.fill_rect(y - half, y + half, x0, x1 + 1);
    }
}

/// Translates page and mask by `(dx, dy)` pixels (positive = right/down).
/// Vacated pixels become background; content pushed off the edge is lost.
pub fn augment_shift(
    page: &ScorePage,
    mask: &TargetMask,
    dx: i32,
    dy: i32,
    max_shift: u32,
) -> Result<(ScorePage, TargetMask)> {
    if dx.unsigned_abs() > max_shift || dy.unsigned_abs() > max_shift {
        return Err(Error::Argument(format!(
            "shift ({dx}, {dy}) exceeds the maximum of {max_shift} px"
        )));
    }
    if (page.height(), page.width()) != (mask.height(), mask.width()) {
        return Err(Error::dim(
            "augment_shift",
            "shape",
            format!(
                "page {}x{} vs mask {}x{}",
                page.height(),
                page.width(),
                mask.height(),
                mask.width()
            ),
        ));
    }
    let (h, w) = (page.height(), page.width());
    let mut out_page = ScorePage::blank(h, w);
    out_page.original_size = page.original_size();
    let mut out_mask = TargetMask::zeros(h, w);
    for r in 0..h {
        let src_r = r as i64 - dy as i64;
        if src_r < 0 || src_r >= h as i64 {
            continue;
        }
        for c in 0..w {
            let src_c = c as i64 - dx as i64;
            if src_c < 0 || src_c >= w as i64 {
                continue;
            }
            let (sr, sc) = (src_r as usize, src_c as usize);
            out_page.set(r, c, page.get(sr, sc));
            out_mask.pixels[r * w + c] = mask.get(sr, sc);
        }
    }
    Ok((out_page, out_mask))
}
