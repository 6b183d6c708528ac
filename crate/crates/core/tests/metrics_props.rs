//! Loss, optimizer, metric, and evaluation properties.

use std::collections::HashMap;

use acunet::audio::AudioExcerpt;
use acunet::dataset::{build_target_mask, synth_generate, Piece, ScorePage, Split, SynthConfig};
use acunet::eval::{
    binarize, confusion, evaluate, precision_recall_f1, ConfusionCounts, Constant, Predictor, DEFAULT_THRESHOLD,
};
use acunet::train::{dice_loss, Adam, DICE_SMOOTHING};
use acunet::Result;
use proptest::prelude::*;

/// Returns the ground-truth mask of the excerpt's end frame.
struct Oracle(HashMap<usize, Vec<f64>>);

impl Oracle {
    fn new(piece: &Piece) -> Self {
        Self(
            piece
                .onset_frames()
                .into_iter()
                .map(|f| (f, build_target_mask(piece, f).as_f64()))
                .collect(),
        )
    }
}

impl Predictor for Oracle {
    fn predict(&self, _: &[&ScorePage], excerpts: &[&AudioExcerpt]) -> Result<Vec<Vec<f64>>> {
        Ok(excerpts.iter().map(|e| self.0[&e.end_frame()].clone()).collect())
    }
}

fn test_corpus() -> Vec<Piece> {
    let cfg = SynthConfig {
        pieces: 6,
        notes_per_piece: 18,
        ..SynthConfig::default()
    };
    synth_generate(11, &cfg).unwrap()
}

fn as_test(piece: &Piece) -> Piece {
    Piece::new(
        piece.name(),
        piece.page().clone(),
        piece.signal().clone(),
        piece.notes().to_vec(),
        Split::Test,
    )
    .unwrap()
}

#[test]
fn oracle_predictor_scores_perfectly() {
    let piece = as_test(&test_corpus()[0]);
    let oracle = Oracle::new(&piece);
    let report = evaluate(std::slice::from_ref(&piece), Split::Test, &oracle, DEFAULT_THRESHOLD, 4).unwrap();
    assert_eq!((report.micro.precision, report.micro.recall, report.micro.f1), (1.0, 1.0, 1.0));
    assert_eq!(report.counts.false_pos + report.counts.false_neg, 0);
}

#[test]
fn always_zero_has_no_recall() {
    let corpus = test_corpus();
    let report = evaluate(&corpus, Split::Test, &Constant(0.0), DEFAULT_THRESHOLD, 8).unwrap();
    assert!(report.counts.false_neg > 0);
    assert_eq!(report.micro.recall, 0.0);
    assert_eq!(report.counts.true_pos + report.counts.false_pos, 0);
}

#[test]
fn micro_metrics_come_from_summed_counts() {
    let corpus = test_corpus();
    let report = evaluate(&corpus, Split::Train, &Constant(1.0), DEFAULT_THRESHOLD, 8).unwrap();
    // Independent recount: every pixel predicted positive.
    let (mut ones, mut total) = (0u64, 0u64);
    for piece in corpus.iter().filter(|p| p.split() == Split::Train) {
        for f in piece.onset_frames() {
            let m = build_target_mask(piece, f);
            ones += m.count_ones() as u64;
            total += m.pixels().len() as u64;
        }
    }
    let want = ConfusionCounts {
        true_pos: ones,
        false_pos: total - ones,
        false_neg: 0,
        true_neg: 0,
    };
    assert_eq!(report.counts, want);
    let mut summed = ConfusionCounts::default();
    for p in &report.pieces {
        summed += p.counts;
    }
    assert_eq!(summed, want);
    assert_eq!(report.micro, precision_recall_f1(&want));
    assert_eq!(report.micro.recall, 1.0);
}

#[test]
fn evaluation_needs_pieces_in_the_split() {
    let corpus: Vec<Piece> = test_corpus().into_iter().filter(|p| p.split() == Split::Train).collect();
    assert!(evaluate(&corpus, Split::Test, &Constant(1.0), 0.5, 8).is_err());
}

fn probs_and_truth() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0.0..=1.0f64, n), prop::collection::vec(0u8..=1, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dice_is_bounded_and_symmetric((p, g) in probs_and_truth()) {
        let g: Vec<f64> = g.into_iter().map(f64::from).collect();
        let d = dice_loss(&p, &g, DICE_SMOOTHING).unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert_eq!(d, dice_loss(&g, &p, DICE_SMOOTHING).unwrap());
        prop_assert_eq!(dice_loss(&g, &g, DICE_SMOOTHING).unwrap(), 0.0);
    }

    #[test]
    fn adam_is_odd_in_the_gradient(g in prop::collection::vec(-5.0..5.0f64, 1..20), steps in 1usize..5) {
        let (mut a, mut b) = (Adam::new(0.0), Adam::new(0.0));
        let mut wa = vec![0.0; g.len()];
        let mut wb = vec![0.0; g.len()];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        for _ in 0..steps {
            a.step_slices(&mut [(&mut wa, &g, true)], 1e-3).unwrap();
            b.step_slices(&mut [(&mut wb, &neg, true)], 1e-3).unwrap();
        }
        for (x, y) in wa.iter().zip(&wb) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn f1_is_the_harmonic_mean(tp in 0u64..1_000_000, fp in 0u64..1_000_000, fn_ in 0u64..1_000_000) {
        let m = precision_recall_f1(&ConfusionCounts { true_pos: tp, false_pos: fp, false_neg: fn_, true_neg: 0 });
        if m.precision + m.recall > 0.0 {
            let h = 2.0 * m.precision * m.recall / (m.precision + m.recall);
            prop_assert!((m.f1 - h).abs() <= 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&m.f1));
    }

    #[test]
    fn raising_the_threshold_never_adds_recall_or_false_positives(
        (p, g) in probs_and_truth(),
        t1 in 0.0..=1.0f64,
        t2 in 0.0..=1.0f64,
    ) {
        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = confusion(&binarize(&p, lo), &g).unwrap();
        let b = confusion(&binarize(&p, hi), &g).unwrap();
        prop_assert!(b.true_pos <= a.true_pos);
        prop_assert!(b.false_pos <= a.false_pos);
        prop_assert_eq!(a.total(), p.len() as u64);
    }
}
