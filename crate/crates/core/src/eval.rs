//! Pixel metrics, corpus evaluation, the FiLM-placement ablation, and
//! prediction overlays.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::audio::AudioExcerpt;
use crate::dataset::{Piece, ScorePage, Split};
use crate::error::{Error, Result};
use crate::model::{FilmBlocks, Model, ModelConfig};
use crate::train::{train, Sample, TrainConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `p ≥ threshold → 1`.
pub fn binarize(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.true_pos += o.true_pos;
        self.false_pos += o.false_pos;
        self.false_neg += o.false_neg;
        self.true_neg += o.true_neg;
    }
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != truth.len() {
        return Err(Error::dim(
            "confusion",
            "length",
            format!("prediction has {} pixels, truth {}", pred.len(), truth.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// A ratio whose denominator is zero scores 1 when there were no errors
/// of the relevant kind either, and 0 otherwise.
fn ratio(num: u64, den: u64, errors: u64) -> f64 {
    if den == 0 {
        if errors == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn precision_recall_f1(c: &ConfusionCounts) -> Metrics {
    let (tp, fp, fn_) = (c.true_pos, c.false_pos, c.false_neg);
    Metrics {
        precision: ratio(tp, tp + fp, fp),
        recall: ratio(tp, tp + fn_, fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, fp + fn_),
    }
}

/// Anything that maps (page, excerpt) pairs to page-sized probability maps.
pub trait Predictor {
    fn predict(&self, pages: &[&ScorePage], excerpts: &[&AudioExcerpt]) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Model {
    fn predict(&self, pages: &[&ScorePage], excerpts: &[&AudioExcerpt]) -> Result<Vec<Vec<f64>>> {
        Model::predict(self, pages, excerpts)
    }
}

/// Predicts the same probability everywhere; `Constant(1.0)` is the
/// always-positive baseline.
#[derive(Clone, Copy, Debug)]
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn predict(&self, pages: &[&ScorePage], _: &[&AudioExcerpt]) -> Result<Vec<Vec<f64>>> {
        Ok(pages.iter().map(|p| vec![self.0; p.height() * p.width()]).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PieceReport {
    pub name: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pieces: Vec<PieceReport>,
    /// Counts summed over every piece and excerpt.
    pub counts: ConfusionCounts,
    /// Metrics of the summed counts.
    pub micro: Metrics,
    /// Unweighted mean of per-piece metrics.
    pub macro_avg: Metrics,
    pub threshold: f64,
}

impl EvalReport {
    pub const CSV_HEADER: [&'static str; 8] = ["piece", "tp", "fp", "fn", "tn", "precision", "recall", "f1"];

    /// One row per piece, then `micro` and `macro` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        let row = |name: &str, c: Option<&ConfusionCounts>, m: &Metrics| -> Vec<String> {
            let counts = match c {
                Some(c) => [c.true_pos, c.false_pos, c.false_neg, c.true_neg].map(|v| v.to_string()),
                None => Default::default(),
            };
            let mut r = vec![name.to_string()];
            r.extend(counts);
            r.extend([m.precision, m.recall, m.f1].map(|v| format!("{v:.6}")));
            r
        };
        for p in &self.pieces {
            w.write_record(row(&p.name, Some(&p.counts), &p.metrics))?;
        }
        w.write_record(row("micro", Some(&self.counts), &self.micro))?;
        w.write_record(row("macro", None, &self.macro_avg))?;
        w.flush()?;
        Ok(())
    }
}

/// Scores `predictor` on every onset-aligned excerpt of the pieces in
/// `split`.
pub fn evaluate(
    corpus: &[Piece],
    split: Split,
    predictor: &dyn Predictor,
    threshold: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let pieces: Vec<&Piece> = corpus.iter().filter(|p| p.split() == split).collect();
    if pieces.is_empty() {
        return Err(Error::Config(format!("no {split} pieces to evaluate")));
    }
    let mut reports = Vec::with_capacity(pieces.len());
    let mut total = ConfusionCounts::default();
    for piece in pieces {
        let samples = Sample::all_onsets(piece)?;
        let mut counts = ConfusionCounts::default();
        for chunk in samples.chunks(batch_size.max(1)) {
            let pages: Vec<&ScorePage> = chunk.iter().map(|s| &s.page).collect();
            let excerpts: Vec<&AudioExcerpt> = chunk.iter().map(|s| &s.excerpt).collect();
            let probs = predictor.predict(&pages, &excerpts)?;
            if probs.len() != chunk.len() {
                return Err(Error::Contract(format!(
                    "predictor returned {} maps for {} inputs",
                    probs.len(),
                    chunk.len()
                )));
            }
            for (p, s) in probs.iter().zip(chunk) {
                counts += confusion(&binarize(p, threshold), s.mask.pixels())?;
            }
        }
        total += counts;
        reports.push(PieceReport {
            name: piece.name().to_string(),
            counts,
            metrics: precision_recall_f1(&counts),
        });
    }
    let n = reports.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| reports.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    let macro_avg = Metrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(EvalReport {
        pieces: reports,
        counts: total,
        micro: precision_recall_f1(&total),
        macro_avg,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub film_blocks: FilmBlocks,
    pub metrics: Metrics,
    pub val_loss: f64,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.film_blocks.table_label()
    }
}

/// Trains one model per FiLM placement and scores each on `split`.
pub fn ablation(
    corpus: &[Piece],
    sets: &[FilmBlocks],
    base: &ModelConfig,
    train_config: &TrainConfig,
    split: Split,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(sets.len());
    for &film_blocks in sets {
        let config = ModelConfig {
            film_blocks,
            ..base.clone()
        };
        let outcome = train(corpus, &config, train_config, |_| Ok(()))?;
        let model = outcome.best.to_model()?;
        let report = evaluate(corpus, split, &model, DEFAULT_THRESHOLD, train_config.batch_size)?;
        let row = AblationRow {
            film_blocks,
            metrics: report.micro,
            val_loss: outcome.best.val_loss,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_HEADER: [&str; 4] = ["architecture", "precision", "recall", "f1"];

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ABLATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.label(),
            format!("{:.4}", r.metrics.precision),
            format!("{:.4}", r.metrics.recall),
            format!("{:.4}", r.metrics.f1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn intensity(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the page in gray with the probability map blended into red, and
/// the raw map (0 → black, 1 → white) next to it as `<stem>_prob.png`.
/// Returns both paths.
pub fn render_overlay(page: &ScorePage, probs: &[f64], path: &Path) -> Result<(PathBuf, PathBuf)> {
    let (h, w) = (page.height(), page.width());
    if probs.len() != h * w {
        return Err(Error::dim(
            "render_overlay",
            "pixels",
            format!("{} probabilities for a {h}x{w} page", probs.len()),
        ));
    }
    let overlay = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let gray = 255.0 * (1.0 - page.pixels()[i]);
        let p = probs[i].clamp(0.0, 1.0);
        let base = (gray * (1.0 - p)).round() as u8;
        let red = (gray * (1.0 - p) + 255.0 * p).round() as u8;
        Rgb([red, base, base])
    });
    overlay.save(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let prob_path = path.with_file_name(format!("{stem}_prob.png"));
    let map = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([intensity(probs[y as usize * w + x as usize])]));
    map.save(&prob_path)?;
    Ok((path.to_path_buf(), prob_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_uses_closed_threshold() {
        assert_eq!(binarize(&[0.4, 0.5, 0.6], 0.5), [0, 1, 1]);
        assert_eq!(binarize(&[0.0, 0.3, 1.0], 0.0), [1, 1, 1]);
        assert_eq!(binarize(&[0.0, 0.3, 1.0], 1.01), [0, 0, 0]);
    }

    #[test]
    fn counts_and_formulas() {
        let c = ConfusionCounts {
            true_pos: 3,
            false_pos: 1,
            false_neg: 2,
            true_neg: 0,
        };
        let m = precision_recall_f1(&c);
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert_eq!(m.f1, 6.0 / 9.0);
        let empty = precision_recall_f1(&ConfusionCounts::default());
        assert_eq!((empty.precision, empty.recall, empty.f1), (1.0, 1.0, 1.0));
        let all_wrong = ConfusionCounts {
            false_pos: 4,
            ..Default::default()
        };
        let m = precision_recall_f1(&all_wrong);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 1.0, 0.0));
    }

    #[test]
    fn confusion_extremes() {
        let c = confusion(&[1; 5], &[1; 5]).unwrap();
        assert_eq!((c.true_pos, c.false_pos, c.false_neg), (5, 0, 0));
        let c = confusion(&[1; 5], &[0; 5]).unwrap();
        assert_eq!(c.false_pos, 5);
        assert!(confusion(&[1; 5], &[0; 4]).is_err());
    }

    #[test]
    fn overlay_of_zero_map_is_the_page() {
        let dir = tempfile::tempdir().unwrap();
        let page = ScorePage::new(2, 3, vec![0.0, 1.0, 0.2, 0.4, 0.6, 1.0]).unwrap();
        let path = dir.path().join("o.png");
        let (o, p) = render_overlay(&page, &[0.0; 6], &path).unwrap();
        let img = image::open(&o).unwrap().into_rgb8();
        assert_eq!(img.dimensions(), (3, 2));
        for (i, px) in img.pixels().enumerate() {
            let g = (255.0 * (1.0 - page.pixels()[i])).round() as u8;
            assert_eq!(px.0, [g, g, g]);
        }
        assert!(p.ends_with("o_prob.png"));
        let map = image::open(&p).unwrap().into_luma8();
        assert!(map.pixels().all(|v| v.0[0] == 0));
    }

    #[test]
    fn overlay_intensity_is_linear() {
        let dir = tempfile::tempdir().unwrap();
        let page = ScorePage::blank(1, 5);
        let probs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let (o, p) = render_overlay(&page, &probs, &dir.path().join("o.png")).unwrap();
        let map = image::open(&p).unwrap().into_luma8();
        let vals: Vec<u8> = map.pixels().map(|v| v.0[0]).collect();
        assert_eq!(vals, [0, 64, 128, 191, 255]);
        let img = image::open(&o).unwrap().into_rgb8();
        let red: Vec<u8> = img.pixels().map(|v| v.0[0]).collect();
        assert_eq!(red, [255; 5]);
        let green: Vec<u8> = img.pixels().map(|v| v.0[1]).collect();
        assert_eq!(green, [255, 191, 128, 64, 0]);
    }
}
