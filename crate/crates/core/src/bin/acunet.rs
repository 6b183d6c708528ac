use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use acunet::audio::{excerpt, spectrogram, AudioSignal};
use acunet::dataset::{load_corpus, read_page_png, save_corpus, synth_generate, Split, SynthConfig};
use acunet::eval::{ablation, evaluate, render_overlay, write_ablation_csv, DEFAULT_THRESHOLD};
use acunet::gradcheck::run_suite;
use acunet::model::{FilmBlocks, ModelConfig, ABLATION_SETS};
use acunet::train::{load_checkpoint, save_checkpoint, train, TrainConfig, TrainLog};
use acunet::{Error, Result};

#[derive(Parser)]
#[command(name = "acunet", version, about = "Audio-conditioned U-Net for locating audio excerpts in sheet music")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 8)]
    base_filters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    samples_per_piece: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
}

impl TrainArgs {
    fn configs(&self, film_blocks: FilmBlocks) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            base_filters: self.base_filters,
            film_blocks,
            ..ModelConfig::default()
        };
        let train = TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            seed: self.seed,
            max_epochs: self.max_epochs,
            samples_per_piece: self.samples_per_piece,
            ..TrainConfig::default()
        };
        (model, train)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        pieces: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and save the checkpoint with the lowest validation loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Blocks with FiLM layers: a range (C-G), a list (A,C,E), or none.
        #[arg(long, default_value = "C-G")]
        film: FilmBlocks,
        #[arg(long)]
        out: PathBuf,
        /// Append per-epoch losses to this CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Pixel precision, recall and F1 of a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Train and evaluate one model per FiLM placement.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Placements separated by commas, or by semicolons when a
        /// placement is itself a list.
        #[arg(long, default_value_t = ABLATION_SETS.join(","))]
        sets: String,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        args: TrainArgs,
    },
    /// Render the prediction for one excerpt over a page.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        page: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        /// Last spectrogram frame of the excerpt.
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and a tiny full model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_sets(s: &str) -> Result<Vec<FilmBlocks>> {
    let sep = if s.contains(';') { ';' } else { ',' };
    s.split(sep).map(str::parse).collect()
}

fn run(command: Command) -> Result<bool> {
    match command {
        Command::Synth { out, pieces, seed } => {
            let config = SynthConfig {
                pieces,
                ..SynthConfig::default()
            };
            let corpus = synth_generate(seed, &config)?;
            save_corpus(&out, &corpus)?;
            let (tr, va, te) = config.split_counts();
            println!("wrote {pieces} pieces ({tr} train / {va} valid / {te} test) to {}", out.display());
        }
        Command::Train {
            data,
            film,
            out,
            log,
            args,
        } => {
            let corpus = load_corpus(&data)?;
            let (model_config, train_config) = args.configs(film);
            let mut log = log.as_deref().map(TrainLog::open).transpose()?;
            let outcome = train(&corpus, &model_config, &train_config, |r| {
                println!(
                    "epoch {:3}  train {:.4}  val {:.4}  lr {:.2e}",
                    r.epoch, r.train_loss, r.val_loss, r.lr
                );
                match log.as_mut() {
                    Some(l) => l.append(r),
                    None => Ok(()),
                }
            })?;
            save_checkpoint(&out, &outcome.best)?;
            println!(
                "best epoch {} (val {:.4}) saved to {}",
                outcome.best.epoch,
                outcome.best.val_loss,
                out.display()
            );
        }
        Command::Eval {
            data,
            ckpt,
            split,
            report,
            threshold,
        } => {
            let corpus = load_corpus(&data)?;
            let model = load_checkpoint(&ckpt)?.to_model()?;
            let r = evaluate(&corpus, split, &model, threshold, 32)?;
            r.write_csv(&report)?;
            println!(
                "{split}: precision {:.4}  recall {:.4}  F1 {:.4}  (macro F1 {:.4})",
                r.micro.precision, r.micro.recall, r.micro.f1, r.macro_avg.f1
            );
        }
        Command::Ablate {
            data,
            sets,
            report,
            split,
            args,
        } => {
            let corpus = load_corpus(&data)?;
            let sets = parse_sets(&sets)?;
            let (model_config, train_config) = args.configs(FilmBlocks::none());
            let rows = ablation(&corpus, &sets, &model_config, &train_config, split, |row| {
                println!(
                    "{:<22} P {:.4}  R {:.4}  F1 {:.4}",
                    row.label(),
                    row.metrics.precision,
                    row.metrics.recall,
                    row.metrics.f1
                );
            })?;
            write_ablation_csv(&report, &rows)?;
        }
        Command::Predict {
            ckpt,
            page,
            audio,
            frame,
            out,
        } => {
            let model = load_checkpoint(&ckpt)?.to_model()?;
            let page = read_page_png(&page)?;
            let spec = spectrogram(&AudioSignal::read_wav(&audio)?)?;
            let ex = excerpt(&spec, frame)?;
            let probs = model.predict(&[&page], &[&ex])?.remove(0);
            let (overlay, map) = render_overlay(&page, &probs, &out)?;
            println!("wrote {} and {}", overlay.display(), map.display());
        }
        Command::Gradcheck { seed } => {
            let results = run_suite(seed)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{:<4} {:<36} max rel err {:.2e} over {} coordinates ({} redrawn at pool switches)",
                    if r.passed() { "ok" } else { "FAIL" },
                    r.name,
                    r.max_rel_error,
                    r.checked,
                    r.skipped
                );
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_io(&e) { 2 } else { 1 })
        }
    }
}

fn is_io(e: &Error) -> bool {
    e.is_io()
}
