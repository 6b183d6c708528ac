//! Corpus I/O, target masks, augmentation, and synthetic data checks.

use std::fs;

use acunet::audio::{filter_centers, AudioSignal, NUM_BANDS, SAMPLE_RATE};
use acunet::dataset::{
    augment_shift, build_target_mask, downscale_page, find_matching_occurrences, load_corpus, load_piece, note_key,
    save_corpus, save_piece, synth_generate, NoteAnnotation, NoteKey, Piece, ScorePage, Split, SynthConfig, TargetMask,
    RECT_HALF_HEIGHT,
};
use acunet::Error;
use proptest::prelude::*;

fn note(onset: f64, pitch: u8, duration: f64, x: usize, y: usize) -> NoteAnnotation {
    NoteAnnotation {
        onset,
        pitch,
        duration,
        x,
        y_staff_mid: y,
    }
}

fn silent_piece(notes: Vec<NoteAnnotation>, h: usize, w: usize) -> Piece {
    let secs = notes.iter().map(|n| n.onset + n.duration).fold(0.0, f64::max) + 0.5;
    let signal = AudioSignal::new(vec![0.0; (secs * SAMPLE_RATE as f64) as usize], SAMPLE_RATE).unwrap();
    Piece::new("fixture", ScorePage::blank(h, w), signal, notes, Split::Train).unwrap()
}

fn small_synth() -> SynthConfig {
    SynthConfig {
        pieces: 3,
        notes_per_piece: 16,
        ..SynthConfig::default()
    }
}

#[test]
fn toy_fixture_sorts_notes() {
    let notes = vec![
        note(2.0, 64, 0.5, 40, 30),
        note(0.5, 60, 0.5, 10, 30),
        note(1.5, 62, 0.5, 30, 30),
        note(1.0, 61, 0.5, 20, 30),
        note(2.5, 65, 0.5, 50, 30),
    ];
    let p = silent_piece(notes, 64, 64);
    let onsets: Vec<f64> = p.notes().iter().map(|n| n.onset).collect();
    assert_eq!(onsets, [0.5, 1.0, 1.5, 2.0, 2.5]);
}

#[test]
fn piece_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    for piece in synth_generate(21, &small_synth()).unwrap() {
        let path = dir.path().join(piece.name());
        save_piece(&path, &piece).unwrap();
        let back = load_piece(&path).unwrap();
        assert_eq!(back.notes(), piece.notes());
        assert_eq!(back.page().pixels(), piece.page().pixels());
        assert_eq!(back.signal().samples(), piece.signal().samples());
        assert_eq!(back, piece);
    }
}

#[test]
fn corpus_round_trips_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_generate(22, &small_synth()).unwrap();
    save_corpus(dir.path(), &corpus).unwrap();
    fs::create_dir(dir.path().join("not_a_piece")).unwrap();
    assert_eq!(load_corpus(dir.path()).unwrap(), corpus);
}

#[test]
fn bad_annotations_cite_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let piece = synth_generate(23, &small_synth()).unwrap().remove(0);
    save_piece(dir.path(), &piece).unwrap();
    let csv = dir.path().join("notes.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let fields: Vec<&str> = lines[3].split(',').collect();
    lines[3] = format!("{},{},{},9999,{}", fields[0], fields[1], fields[2], fields[4]);
    fs::write(&csv, lines.join("\n") + "\n").unwrap();
    match load_piece(dir.path()) {
        Err(Error::Load { line: Some(4), message, .. }) => assert!(message.contains("width"), "{message}"),
        other => panic!("expected a load error on line 4, got {other:?}"),
    }

    fs::write(&csv, "").unwrap();
    match load_piece(dir.path()) {
        Err(e @ Error::Load { .. }) => assert!(e.to_string().contains("no notes"), "{e}"),
        other => panic!("expected a load error, got {other:?}"),
    }
    fs::write(&csv, "onset_sec,pitch_midi,duration_sec,x_px,y_staff_mid_px\n").unwrap();
    assert!(load_piece(dir.path()).unwrap_err().to_string().contains("no notes"));

    fs::write(&csv, text).unwrap();
    load_piece(dir.path()).unwrap();
    fs::remove_file(dir.path().join("audio.wav")).unwrap();
    assert!(load_piece(dir.path()).unwrap_err().is_io());
}

#[test]
fn downscaling_a_constant_full_page() {
    let page = downscale_page(&vec![0.3; 1181 * 835], 1181, 835, 3).unwrap();
    assert_eq!((page.height(), page.width()), (393, 278));
    assert_eq!(page.original_size(), (1181, 835));
    assert!(page.pixels().iter().all(|&v| (v - 0.3).abs() < 1e-15));
}

#[test]
fn repeated_phrase_gives_the_same_mask_from_either_occurrence() {
    // A B C X A B C with one-second notes: a 40-frame excerpt ending on C
    // holds exactly B, C.
    let pitches = [60, 62, 64, 70, 60, 62, 64];
    let notes: Vec<_> = pitches
        .iter()
        .enumerate()
        .map(|(i, &p)| note(0.5 + i as f64, p, 1.0, 10 + 12 * i, 40))
        .collect();
    let piece = silent_piece(notes, 80, 100);
    let first = build_target_mask(&piece, piece.notes()[2].onset_frame());
    let second = build_target_mask(&piece, piece.notes()[6].onset_frame());
    assert_eq!(first, second);
    // Two disjoint 13-wide rectangles (x 22..=34 and 70..=82), 20 rows each.
    assert_eq!(first.count_ones(), 2 * 13 * 20);
}

#[test]
fn synth_audio_peaks_at_the_played_pitch() {
    let centers = filter_centers();
    for piece in synth_generate(24, &small_synth()).unwrap() {
        for n in piece.notes() {
            let freq = 440.0 * 2f64.powf((n.pitch as f64 - 69.0) / 12.0);
            let nearest = (0..NUM_BANDS)
                .min_by(|&a, &b| (centers[a].ln() - freq.ln()).abs().total_cmp(&(centers[b].ln() - freq.ln()).abs()))
                .unwrap();
            assert_eq!(piece.spectrogram().argmax_band(n.onset_frame() + 2), nearest, "{n:?}");
        }
    }
}

#[test]
fn synth_masks_cover_the_current_note() {
    for piece in synth_generate(25, &small_synth()).unwrap() {
        for (i, n) in piece.notes().iter().enumerate() {
            let mask = build_target_mask(&piece, n.onset_frame());
            assert_eq!(mask.get(n.y_staff_mid, n.x), 1, "note {i}");
        }
    }
}

fn keys_strategy() -> impl Strategy<Value = (Vec<NoteKey>, Vec<NoteKey>)> {
    let key = (60u8..63, prop::sample::select(vec![5usize, 10]));
    (prop::collection::vec(key.clone(), 1..30), prop::collection::vec(key, 1..4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_agrees_with_a_naive_scan((seq, query) in keys_strategy()) {
        let notes: Vec<_> = seq
            .iter()
            .enumerate()
            .map(|(i, &(p, d))| note(i as f64, p, d as f64 / 20.0, i, 30))
            .collect();
        let got = find_matching_occurrences(&query, &notes);
        let mut want = Vec::new();
        for start in 0..notes.len() {
            if start + query.len() <= notes.len()
                && (0..query.len()).all(|j| note_key(&notes[start + j]) == query[j])
            {
                want.push(start..start + query.len());
            }
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn disjoint_occurrences_sum_rectangle_areas(gap in 1usize..5, width in 1usize..4) {
        // Motif of `width` notes, a filler note, then the motif again.
        let mut notes = Vec::new();
        let mut x = 5;
        for rep in 0..2 {
            for j in 0..width {
                notes.push(note(0.5 + notes.len() as f64 * 0.5, 60 + j as u8, 0.5, x, 40));
                x += 4;
            }
            if rep == 0 {
                notes.push(note(0.5 + notes.len() as f64 * 0.5, 70, 0.5, x, 40));
                x += 4 * gap;
            }
        }
        let piece = silent_piece(notes, 80, x + 10);
        let end = piece.notes()[width - 1].onset_frame();
        let window = acunet::dataset::notes_in_excerpt(&piece, end);
        // Only run when the excerpt is exactly the first motif.
        prop_assume!(window == (0..width));
        let mask = build_target_mask(&piece, end);
        let rect = (4 * (width - 1) + 1) * 2 * RECT_HALF_HEIGHT;
        prop_assert_eq!(mask.count_ones(), 2 * rect);
    }

    #[test]
    fn shifting_back_restores_the_unclipped_region(dx in -6i32..=6, dy in -6i32..=6, seed in 0u64..100) {
        let (h, w) = (12usize, 15usize);
        let px: Vec<f64> = (0..h * w).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 16.0).collect();
        let page = ScorePage::new(h, w, px).unwrap();
        let mut mask = TargetMask::zeros(h, w);
        mask.fill_rect(2, 9, 3, 12);
        let (p1, m1) = augment_shift(&page, &mask, dx, dy, 10).unwrap();
        prop_assert!(m1.count_ones() <= mask.count_ones());
        let (p2, m2) = augment_shift(&p1, &m1, -dx, -dy, 10).unwrap();
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = (r as i32 + dy, c as i32 + dx);
                if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                    prop_assert_eq!(p2.get(r, c), page.get(r, c));
                    prop_assert_eq!(m2.get(r, c), mask.get(r, c));
                }
            }
        }
    }

    #[test]
    fn masks_stay_on_the_page(seed in 0u64..50) {
        let cfg = SynthConfig { pieces: 1, notes_per_piece: 20, ..SynthConfig::default() };
        let piece = synth_generate(seed, &cfg).unwrap().remove(0);
        let page = piece.page();
        for end in piece.onset_frames() {
            let m = build_target_mask(&piece, end);
            prop_assert_eq!((m.height(), m.width()), (page.height(), page.width()));
            prop_assert!(m.pixels().iter().all(|&v| v <= 1));
        }
    }
}
