//! Audio frontend: STFT magnitudes, a log-spaced triangular filterbank, the
//! 78-bin log spectrogram at 20 frames per second, and fixed 40-frame
//! conditioning excerpts.

use std::path::Path;
use std::sync::OnceLock;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 22_050;
pub const FRAME_RATE: u32 = 20;
pub const WINDOW_SIZE: usize = 2048;
pub const FFT_BINS: usize = WINDOW_SIZE / 2 + 1;
pub const NUM_BANDS: usize = 78;
pub const MIN_FREQ: f64 = 60.0;
pub const MAX_FREQ: f64 = 6000.0;
pub const EXCERPT_FRAMES: usize = 40;

/// Samples between consecutive frame centers (22050 / 20 = 1102.5).
pub const HOP: f64 = SAMPLE_RATE as f64 / FRAME_RATE as f64;

/// Mono audio at 22.05 kHz.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSignal {
    samples: Vec<f64>,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Input(format!(
                "audio must be sampled at {SAMPLE_RATE} Hz, got {sample_rate} Hz"
            )));
        }
        if let Some(pos) = samples.iter().position(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::Input(format!(
                "sample {pos} = {} lies outside [-1, 1]",
                samples[pos]
            )));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Reads a PCM (integer) or float WAV file. Stereo and multi-channel
    /// inputs are averaged down to mono. No resampling is done.
    pub fn read_wav(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let channels = spec.channels.max(1) as usize;
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let full_scale = (1_i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / full_scale))
                    .collect::<Result<_, _>>()?
            }
        };
        let samples = interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect();
        Self::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float mono WAV. Signals whose samples are exactly
    /// representable as `f32` round-trip bit for bit.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(s as f32)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Sample index at the center of frame `t`.
pub fn frame_center(t: usize) -> usize {
    (t as f64 * HOP).round() as usize
}

/// Number of frames whose center falls inside a signal of `len` samples.
pub fn frame_count(len: usize) -> usize {
    let mut t = (len as f64 / HOP) as usize;
    while t > 0 && frame_center(t - 1) >= len {
        t -= 1;
    }
    while frame_center(t) < len {
        t += 1;
    }
    t
}

/// Frame index of a time in seconds.
pub fn seconds_to_frame(secs: f64) -> usize {
    (secs * FRAME_RATE as f64).round().max(0.0) as usize
}

fn reflect(index: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut i = index.rem_euclid(period);
    if i >= len as isize {
        i = period - i;
    }
    i as usize
}

fn hann_window() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..WINDOW_SIZE)
            .map(|n| {
                0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW_SIZE as f64).cos()
            })
            .collect()
    })
}

/// Magnitudes of the non-negative-frequency DFT bins, `[T, 1025]`.
///
/// Frame `t` is centered at sample `round(t · 1102.5)`, weighted by a
/// periodic Hann window of 2048 samples; samples beyond either edge are
/// reflected back into the signal.
pub fn stft_magnitude(signal: &AudioSignal) -> Result<Tensor> {
    let x = signal.samples();
    if x.is_empty() {
        return Err(Error::Input("empty audio signal".into()));
    }
    let frames = frame_count(x.len());
    let window = hann_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(WINDOW_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW_SIZE];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * FFT_BINS);
    let half = (WINDOW_SIZE / 2) as isize;
    for t in 0..frames {
        let start = frame_center(t) as isize - half;
        for (n, slot) in buf.iter_mut().enumerate() {
            let idx = reflect(start + n as isize, x.len());
            *slot = Complex::new(x[idx] * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..FFT_BINS].iter().map(|c| c.norm()));
    }
    Tensor::new(vec![frames, FFT_BINS], out)
}

/// The `NUM_BANDS + 2` geometrically spaced edge frequencies; filter `i`
/// rises from edge `i`, peaks at edge `i + 1`, and falls to edge `i + 2`.
pub fn filter_edges() -> Vec<f64> {
    let n = NUM_BANDS + 2;
    let ratio = MAX_FREQ / MIN_FREQ;
    (0..n)
        .map(|i| MIN_FREQ * ratio.powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Center frequency of every filter, ascending.
pub fn filter_centers() -> Vec<f64> {
    filter_edges()[1..=NUM_BANDS].to_vec()
}

/// Frequency in Hz of FFT bin `k`.
pub fn bin_frequency(k: usize) -> f64 {
    k as f64 * SAMPLE_RATE as f64 / WINDOW_SIZE as f64
}

/// `[78, 1025]` bank of triangular filters with log-spaced centers in
/// [60 Hz, 6 kHz], each row normalized to sum to one. A filter narrower than
/// the FFT bin spacing collapses onto the bin nearest its center.
pub fn build_log_filterbank() -> Tensor {
    let edges = filter_edges();
    let mut data = vec![0.0; NUM_BANDS * FFT_BINS];
    for band in 0..NUM_BANDS {
        let (lo, center, hi) = (edges[band], edges[band + 1], edges[band + 2]);
        let row = &mut data[band * FFT_BINS..(band + 1) * FFT_BINS];
        for (k, w) in row.iter_mut().enumerate() {
            let f = bin_frequency(k);
            *w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
        }
        let mut total: f64 = row.iter().sum();
        if total == 0.0 {
            let k = (center / bin_frequency(1)).round() as usize;
            row[k] = 1.0;
            total = 1.0;
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    Tensor::new(vec![NUM_BANDS, FFT_BINS], data).expect("filterbank shape")
}

fn filterbank() -> &'static Tensor {
    static BANK: OnceLock<Tensor> = OnceLock::new();
    BANK.get_or_init(build_log_filterbank)
}

/// Log-compressed filterbank spectrogram, 78 bands × T frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// Band-major: `values[band * frames + t]`.
    values: Vec<f64>,
    frames: usize,
}

impl Spectrogram {
    pub fn from_values(values: Vec<f64>, frames: usize) -> Result<Self> {
        if values.len() != NUM_BANDS * frames {
            return Err(Error::dim(
                "spectrogram",
                "frames",
                format!("{} values for {NUM_BANDS}x{frames}", values.len()),
            ));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Input("spectrogram values must be non-negative".into()));
        }
        Ok(Self { values, frames })
    }

    pub fn bands(&self) -> usize {
        NUM_BANDS
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.frames + frame]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Band with the largest value in `frame` (first on ties).
    pub fn argmax_band(&self, frame: usize) -> usize {
        (0..NUM_BANDS).fold(0, |best, b| {
            if self.get(b, frame) > self.get(best, frame) {
                b
            } else {
                best
            }
        })
    }
}

/// `log(1 + filterbank · |STFT|)` for every frame.
pub fn spectrogram(signal: &AudioSignal) -> Result<Spectrogram> {
    let mag = stft_magnitude(signal)?;
    let frames = mag.shape()[0];
    let fb = filterbank();
    let mut values = vec![0.0; NUM_BANDS * frames];
    for band in 0..NUM_BANDS {
        let row = &fb.data()[band * FFT_BINS..(band + 1) * FFT_BINS];
        let nz: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(k, w)| (k, *w))
            .collect();
        for t in 0..frames {
            let m = &mag.data()[t * FFT_BINS..(t + 1) * FFT_BINS];
            let e: f64 = nz.iter().map(|&(k, w)| w * m[k]).sum();
            values[band * frames + t] = e.ln_1p();
        }
    }
    Ok(Spectrogram { values, frames })
}

/// A 78 × 40 spectrogram window ending at `end_frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioExcerpt {
    /// Band-major, 40 frames per band.
    values: Vec<f64>,
    end_frame: usize,
}

impl AudioExcerpt {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn end_frame(&self) -> usize {
        self.end_frame
    }

    pub fn get(&self, band: usize, column: usize) -> f64 {
        self.values[band * EXCERPT_FRAMES + column]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, NUM_BANDS, EXCERPT_FRAMES], self.values.clone()).expect("excerpt shape")
    }

    /// Builds an excerpt from raw band-major values; used for tests and for
    /// feeding externally computed features.
    pub fn from_values(values: Vec<f64>, end_frame: usize) -> Result<Self> {
        if values.len() != NUM_BANDS * EXCERPT_FRAMES {
            return Err(Error::dim(
                "excerpt",
                "size",
                format!(
                    "expected {}x{} values, got {}",
                    NUM_BANDS,
                    EXCERPT_FRAMES,
                    values.len()
                ),
            ));
        }
        Ok(Self { values, end_frame })
    }
}

/// Frames `end_frame − 39 ..= end_frame`; columns before the first frame of
/// the piece are zero.
pub fn excerpt(spec: &Spectrogram, end_frame: usize) -> Result<AudioExcerpt> {
    if end_frame >= spec.frames {
        return Err(Error::Index {
            index: end_frame,
            len: spec.frames,
        });
    }
    let mut values = vec![0.0; NUM_BANDS * EXCERPT_FRAMES];
    let first = end_frame as isize - (EXCERPT_FRAMES as isize - 1);
    for band in 0..NUM_BANDS {
        for col in 0..EXCERPT_FRAMES {
            let t = first + col as isize;
            if t >= 0 {
                values[band * EXCERPT_FRAMES + col] = spec.get(band, t as usize);
            }
        }
    }
    Ok(AudioExcerpt { values, end_frame })
}
