//! Dice-loss training: sample assembly, Adam, the plateau schedule, model
//! selection on validation loss, and checkpoints.

mod adam;
mod checkpoint;
mod loss;
mod schedule;

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION};
pub use loss::{dice_loss, dice_loss_tape, DICE_SMOOTHING};
pub use schedule::{lr_on_plateau, PlateauSchedule, PlateauStep};

use crate::audio::{excerpt, AudioExcerpt};
use crate::dataset::{augment_shift, build_target_mask, Piece, ScorePage, Split, TargetMask};
use crate::error::{Error, Result};
use crate::model::{batch_excerpts, batch_pages, Mode, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L2 factor, applied to conv/dense weights only.
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without improvement before the learning rate halves.
    pub plateau_patience: usize,
    pub max_halvings: usize,
    /// Random page shifts are drawn from `−max ..= max` in both directions.
    pub augment_max_shift: u32,
    pub seed: u64,
    pub max_epochs: usize,
    /// Random excerpts drawn from each training piece per epoch.
    pub samples_per_piece: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            weight_decay: 5e-5,
            batch_size: 32,
            plateau_patience: 2,
            max_halvings: 5,
            augment_max_shift: 10,
            seed: 0,
            max_epochs: 200,
            samples_per_piece: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let positive = [
            ("batch_size", self.batch_size),
            ("plateau_patience", self.plateau_patience),
            ("max_epochs", self.max_epochs),
            ("samples_per_piece", self.samples_per_piece),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub page: ScorePage,
    pub excerpt: AudioExcerpt,
    pub mask: TargetMask,
}

impl Sample {
    /// The unaugmented example for the excerpt ending at `end_frame`.
    pub fn at(piece: &Piece, end_frame: usize) -> Result<Self> {
        Ok(Self {
            page: piece.page().clone(),
            excerpt: excerpt(piece.spectrogram(), end_frame)?,
            mask: build_target_mask(piece, end_frame),
        })
    }

    /// Same, with page and mask shifted by `(dx, dy)`.
    pub fn shifted(piece: &Piece, end_frame: usize, dx: i32, dy: i32, max_shift: u32) -> Result<Self> {
        let mask = build_target_mask(piece, end_frame);
        let (page, mask) = augment_shift(piece.page(), &mask, dx, dy, max_shift)?;
        Ok(Self {
            page,
            excerpt: excerpt(piece.spectrogram(), end_frame)?,
            mask,
        })
    }

    /// One example per note onset of the piece.
    pub fn all_onsets(piece: &Piece) -> Result<Vec<Self>> {
        piece.onset_frames().into_iter().map(|f| Self::at(piece, f)).collect()
    }
}

/// Stacked network inputs and targets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pages: Tensor,
    pub excerpts: Tensor,
    /// `[B, 1, H, W]`, zero-padded like the pages.
    pub masks: Tensor,
}

impl Batch {
    pub fn new(samples: &[&Sample]) -> Result<Self> {
        let pages: Vec<&ScorePage> = samples.iter().map(|s| &s.page).collect();
        let excerpts: Vec<&AudioExcerpt> = samples.iter().map(|s| &s.excerpt).collect();
        let pages = batch_pages(&pages)?;
        let [b, _, h, w] = pages.dims4("batch")?;
        let mut masks = vec![0.0; b * h * w];
        for (plane, s) in masks.chunks_exact_mut(h * w).zip(samples) {
            if (s.mask.height(), s.mask.width()) != (s.page.height(), s.page.width()) {
                return Err(Error::dim(
                    "batch",
                    "mask",
                    format!(
                        "mask {}x{} for page {}x{}",
                        s.mask.height(),
                        s.mask.width(),
                        s.page.height(),
                        s.page.width()
                    ),
                ));
            }
            let mw = s.mask.width();
            for r in 0..s.mask.height() {
                for (dst, &src) in plane[r * w..r * w + mw].iter_mut().zip(&s.mask.pixels()[r * mw..(r + 1) * mw]) {
                    *dst = src as f64;
                }
            }
        }
        Ok(Self {
            pages,
            excerpts: batch_excerpts(&excerpts)?,
            masks: Tensor::new(vec![b, 1, h, w], masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.pages.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A model plus its optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub adam: Adam,
}

impl Learner {
    pub fn new(model: Model, weight_decay: f64) -> Self {
        Self {
            model,
            adam: Adam::new(weight_decay),
        }
    }

    /// One optimization step on the batch; returns the batch loss before the
    /// update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let pass = self.model.forward(&mut tape, &batch.pages, &batch.excerpts, Mode::Train)?;
        let target = tape.constant(batch.masks.clone());
        let loss = dice_loss_tape(&mut tape, pass.output, target)?;
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Training(format!("loss became {value}")));
        }
        tape.backward(loss)?;
        let grads = pass.gradients(&tape);
        drop(tape);
        self.adam.step(self.model.params_mut(), &grads, lr)?;
        self.model.commit_stats(pass.stat_updates());
        Ok(value)
    }
}

/// Mean per-sample Dice loss in eval mode.
pub fn mean_loss(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch.pages, &batch.excerpts, Mode::Eval)?;
        let target = tape.constant(batch.masks.clone());
        let loss = dice_loss_tape(&mut tape, pass.output, target)?;
        total += tape.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Whether the plateau schedule stopped training (rather than the epoch cap).
    pub halted: bool,
}

/// Appends `epoch,train_loss,val_loss,lr` rows, writing the header when the
/// file is new.
pub struct TrainLog {
    file: File,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,train_loss,val_loss,lr";

    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{}", Self::HEADER)?;
        }
        Ok(Self { file })
    }

    pub fn append(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.file, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.lr)?;
        Ok(())
    }
}

/// Trains a fresh model on the corpus's train split, selecting on the
/// validation split. `on_epoch` sees each record as it is produced.
pub fn train(
    corpus: &[Piece],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_pieces: Vec<&Piece> = corpus.iter().filter(|p| p.split() == Split::Train).collect();
    let valid_pieces: Vec<&Piece> = corpus.iter().filter(|p| p.split() == Split::Valid).collect();
    if train_pieces.is_empty() {
        return Err(Error::Config("corpus has no training pieces".into()));
    }
    if valid_pieces.is_empty() {
        return Err(Error::Config("corpus has no validation pieces".into()));
    }
    let valid: Vec<Sample> = valid_pieces
        .iter()
        .map(|p| Sample::all_onsets(p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let onsets: Vec<Vec<usize>> = train_pieces.iter().map(|p| p.onset_frames()).collect();

    let model = Model::build(model_config.clone(), config.seed)?;
    let mut learner = Learner::new(model, config.weight_decay);
    let mut schedule = PlateauSchedule::new(config.learning_rate, config.plateau_patience, config.max_halvings);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_da7a);
    let max_shift = config.augment_max_shift as i32;

    let mut history = Vec::new();
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr();
        let mut order: Vec<usize> = (0..train_pieces.len())
            .flat_map(|i| std::iter::repeat_n(i, config.samples_per_piece))
            .collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let end = onsets[i][rng.random_range(0..onsets[i].len())];
                    let dx = rng.random_range(-max_shift..=max_shift);
                    let dy = rng.random_range(-max_shift..=max_shift);
                    Sample::shifted(train_pieces[i], end, dx, dy, config.augment_max_shift)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let batch = Batch::new(&refs)?;
            loss_sum += learner.step(&batch, lr)? * chunk.len() as f64;
        }
        let train_loss = loss_sum / order.len() as f64;
        let val_loss = mean_loss(&learner.model, &valid, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        history.push(record);
        on_epoch(&record)?;

        let step = schedule.observe(val_loss);
        if step.improved {
            best = Some(Checkpoint::from_model(&learner.model, config, epoch, val_loss));
        }
        if step.halt {
            break;
        }
    }
    let best = best.ok_or_else(|| Error::Training("validation loss was never finite".into()))?;
    Ok(TrainOutcome {
        best,
        history,
        halted: schedule.halted(),
    })
}
