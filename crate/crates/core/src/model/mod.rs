//! The audio-conditioned U-Net: a spectrogram encoder producing a 128-d
//! conditioning vector, FiLM generators mapping it to per-channel scales and
//! shifts, and a nine-block U-Net over the page with summed skip connections.

mod config;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Block, FilmBlocks, FilmInit, ModelConfig, ABLATION_SETS};
pub use params::{Param, ParamId, ParamKind, ParamStore};

use crate::audio::{AudioExcerpt, EXCERPT_FRAMES, NUM_BANDS};
use crate::dataset::ScorePage;
use crate::error::{Error, Result};
use crate::tensor::{orthogonal_with, BatchStats, Normalization, Tape, Tensor, Var};

/// Length of the conditioning vector.
pub const EMBEDDING_DIM: usize = 128;

/// `(out_channels, kernel, stride)` of the encoder's conv stack.
const ENCODER_CONVS: [(usize, usize, usize); 7] = [
    (16, 3, 1),
    (16, 3, 1),
    (32, 3, 2),
    (32, 3, 1),
    (64, 3, 2),
    (96, 3, 2),
    (96, 1, 1),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in every batch norm; running statistics are
    /// reported back for the caller to commit.
    Train,
    /// Stored running statistics.
    Eval,
}

/// A pending running-statistics update from one training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// Everything one forward pass recorded beyond the tape itself.
#[derive(Debug)]
pub struct ForwardPass {
    /// Per-pixel probabilities, `[B, 1, H, W]`.
    pub output: Var,
    /// The conditioning vectors, `[B, 128]`.
    pub embedding: Var,
    /// Spatial size of the excerpt after each encoder conv.
    pub encoder_trace: Vec<(usize, usize)>,
    /// Page size after padding.
    pub padded_size: (usize, usize),
    bindings: Vec<(ParamId, Var)>,
    stat_updates: Vec<StatUpdate>,
}

impl ForwardPass {
    /// Gradient of every trainable parameter that took part in the pass,
    /// after `tape.backward` has run.
    pub fn gradients(&self, tape: &Tape) -> Vec<(ParamId, Tensor)> {
        self.bindings
            .iter()
            .filter_map(|&(id, var)| tape.grad(var).map(|g| (id, g)))
            .collect()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }
}

struct Forward<'a> {
    tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    epsilon: f64,
    stat_updates: Vec<StatUpdate>,
}

impl Forward<'_> {
    fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, orthogonal_with(&shape, rng)?);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([shape[0]]));
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
    mean: ParamId,
    var: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            scale: store.add(format!("{name}.scale"), ParamKind::Scale, Tensor::full([channels], 1.0)),
            shift: store.add(format!("{name}.shift"), ParamKind::Shift, Tensor::zeros([channels])),
            mean: store.add(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros([channels])),
            var: store.add(format!("{name}.running_var"), ParamKind::RunningVar, Tensor::full([channels], 1.0)),
        }
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (scale, shift) = (f.param(self.scale), f.param(self.shift));
        let epsilon = f.epsilon;
        match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batch_norm(x, scale, shift, Normalization::Batch { epsilon })?;
                if let Some(stats) = stats {
                    f.stat_updates.push(StatUpdate {
                        mean: self.mean,
                        var: self.var,
                        stats,
                    });
                }
                Ok(y)
            }
            Mode::Eval => {
                let norm = Normalization::Running {
                    mean: f.store.get(self.mean).data(),
                    var: f.store.get(self.var).data(),
                    epsilon,
                };
                Ok(f.tape.batch_norm(x, scale, shift, norm)?.0)
            }
        }
    }
}

/// Conv → batch norm, with the ELU left to the caller.
#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv,
    norm: Norm,
}

impl ConvNorm {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), shape, stride, padding)?,
            norm: Norm::new(store, &format!("{name}.bn"), shape[0]),
        })
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        self.norm.forward(f, y)
    }
}

#[derive(Clone, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

impl Dense {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, outputs: usize, inputs: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                ParamKind::Weight,
                orthogonal_with(&[outputs, inputs], rng)?,
            ),
            bias: store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros([outputs])),
        })
    }

    fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.linear(x, w, b)
    }

    fn set_constant(&self, store: &mut ParamStore, bias: f64) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(bias);
    }
}

/// γ and β generators for one block.
#[derive(Clone, Debug)]
struct FilmGenerator {
    gamma: Dense,
    beta: Dense,
}

#[derive(Clone, Debug)]
struct UNetBlock {
    first: ConvNorm,
    second: ConvNorm,
    film: Option<FilmGenerator>,
}

impl UNetBlock {
    fn forward(&self, f: &mut Forward, x: Var, z: Var) -> Result<Var> {
        let h = self.first.forward(f, x)?;
        let h = f.tape.elu(h);
        let mut h = self.second.forward(f, h)?;
        if let Some(film) = &self.film {
            let gamma = film.gamma.forward(f, z)?;
            let beta = film.beta.forward(f, z)?;
            h = f.tape.film(h, gamma, beta)?;
        }
        Ok(f.tape.elu(h))
    }
}

#[derive(Clone, Debug)]
struct Upsample {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct SpectrogramEncoder {
    convs: Vec<ConvNorm>,
    dense: Dense,
    norm: Norm,
}

/// Output size of a 3×3 (padding 1) or 1×1 (padding 0) conv.
fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    let padding = kernel / 2;
    (size + 2 * padding - kernel) / stride + 1
}

/// Flattened size of the encoder's last feature map for a 78 × 40 excerpt.
fn encoder_flat_len() -> usize {
    let (mut h, mut w) = (NUM_BANDS, EXCERPT_FRAMES);
    for &(_, k, s) in &ENCODER_CONVS {
        h = conv_out(h, k, s);
        w = conv_out(w, k, s);
    }
    ENCODER_CONVS[ENCODER_CONVS.len() - 1].0 * h * w
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: SpectrogramEncoder,
    blocks: Vec<UNetBlock>,
    /// Upsamplers feeding blocks F, G, H, I.
    ups: Vec<Upsample>,
    head: Conv,
}

impl Model {
    /// Builds and initializes a model. Weights are orthogonal, biases zero,
    /// batch-norm scales one; the same seed reproduces the same parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut convs = Vec::with_capacity(ENCODER_CONVS.len());
        let mut in_ch = 1;
        for (i, &(out_ch, k, stride)) in ENCODER_CONVS.iter().enumerate() {
            convs.push(ConvNorm::new(
                &mut store,
                &mut rng,
                &format!("encoder.{i}"),
                [out_ch, in_ch, k, k],
                stride,
                k / 2,
            )?);
            in_ch = out_ch;
        }
        let dense = Dense::new(&mut store, &mut rng, "encoder.dense", EMBEDDING_DIM, encoder_flat_len())?;
        let norm = Norm::new(&mut store, "encoder.dense.bn", EMBEDDING_DIM);
        let encoder = SpectrogramEncoder { convs, dense, norm };

        let mut blocks = Vec::with_capacity(9);
        let mut ups = Vec::with_capacity(4);
        let mut prev = 1;
        for block in Block::ALL {
            let k = config.filters(block);
            let name = format!("unet.{}", block.label());
            if block > Block::E {
                // Transposed conv from the previous block's width down to this one.
                let weight = store.add(
                    format!("{name}.up.weight"),
                    ParamKind::Weight,
                    orthogonal_with(&[prev, k, 2, 2], &mut rng)?,
                );
                let bias = store.add(format!("{name}.up.bias"), ParamKind::Bias, Tensor::zeros([k]));
                ups.push(Upsample { weight, bias });
                prev = k;
            }
            let first = ConvNorm::new(&mut store, &mut rng, &format!("{name}.conv1"), [k, prev, 3, 3], 1, 1)?;
            let second = ConvNorm::new(&mut store, &mut rng, &format!("{name}.conv2"), [k, k, 3, 3], 1, 1)?;
            let film = if config.film_blocks.contains(block) {
                Some(FilmGenerator {
                    gamma: Dense::new(&mut store, &mut rng, &format!("{name}.film.gamma"), k, EMBEDDING_DIM)?,
                    beta: Dense::new(&mut store, &mut rng, &format!("{name}.film.beta"), k, EMBEDDING_DIM)?,
                })
            } else {
                None
            };
            blocks.push(UNetBlock { first, second, film });
            prev = k;
        }
        let head = Conv::new(&mut store, &mut rng, "head", [1, prev, 1, 1], 1, 0)?;

        let mut model = Self {
            config,
            params: store,
            encoder,
            blocks,
            ups,
            head,
        };
        if model.config.film_init == FilmInit::Identity {
            model.set_identity_film();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Filter count of each block A–I, read off the built conv kernels.
    pub fn block_filters(&self) -> [usize; 9] {
        let mut out = [0; 9];
        for (o, b) in out.iter_mut().zip(&self.blocks) {
            *o = self.params.get(b.second.conv.weight).shape()[0];
        }
        out
    }

    /// Number of scalars in all FiLM generators.
    pub fn film_param_len(&self) -> usize {
        self.blocks
            .iter()
            .filter_map(|b| b.film.as_ref())
            .flat_map(|f| [f.gamma.weight, f.gamma.bias, f.beta.weight, f.beta.bias])
            .map(|id| self.params.get(id).numel())
            .sum()
    }

    /// Forces every FiLM layer to the identity (γ ≡ 1, β ≡ 0), cutting the
    /// network off from its audio input.
    pub fn set_identity_film(&mut self) {
        for block in &self.blocks {
            if let Some(film) = &block.film {
                film.gamma.set_constant(&mut self.params, 1.0);
                film.beta.set_constant(&mut self.params, 0.0);
            }
        }
    }

    /// Folds the batch statistics of a training pass into the running
    /// statistics.
    pub fn commit_stats(&mut self, updates: &[StatUpdate]) {
        let momentum = self.config.bn_momentum;
        for u in updates {
            let mut mean = std::mem::replace(self.params.get_mut(u.mean), Tensor::scalar(0.0));
            u.stats.blend_into(
                mean.data_mut(),
                self.params.get_mut(u.var).data_mut(),
                momentum,
            );
            *self.params.get_mut(u.mean) = mean;
        }
    }

    fn encode(&self, f: &mut Forward, excerpts: Var, trace: &mut Vec<(usize, usize)>) -> Result<Var> {
        let mut x = excerpts;
        for layer in &self.encoder.convs {
            let y = layer.forward(f, x)?;
            x = f.tape.elu(y);
            let s = f.tape.value(x).shape();
            trace.push((s[2], s[3]));
        }
        let b = f.tape.value(x).shape()[0];
        let flat = f.tape.value(x).numel() / b.max(1);
        let x = f.tape.reshape(x, [b, flat])?;
        let y = self.encoder.dense.forward(f, x)?;
        let y = self.encoder.norm.forward(f, y)?;
        Ok(f.tape.elu(y))
    }

    /// Runs the network on a batch of pages `[B, 1, H, W]` (ink = 1) and
    /// excerpts `[B, 1, 78, 40]`, returning probabilities at page size.
    pub fn forward(&self, tape: &mut Tape, pages: &Tensor, excerpts: &Tensor, mode: Mode) -> Result<ForwardPass> {
        const OP: &str = "forward";
        let [b, c, h, w] = pages.dims4(OP)?;
        if c != 1 {
            return Err(Error::dim(OP, "page channels", format!("expected 1, got {c}")));
        }
        let eb = excerpts.dims4(OP)?;
        if eb[1..] != [1, NUM_BANDS, EXCERPT_FRAMES] {
            return Err(Error::dim(
                OP,
                "excerpt",
                format!("expected [B, 1, {NUM_BANDS}, {EXCERPT_FRAMES}], got {eb:?}"),
            ));
        }
        if eb[0] != b {
            return Err(Error::dim(OP, "batch", format!("{b} pages but {} excerpts", eb[0])));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim(OP, "page", "empty page"));
        }

        let mut f = Forward {
            tape,
            store: &self.params,
            bound: vec![None; self.params.len()],
            mode,
            epsilon: self.config.bn_epsilon,
            stat_updates: Vec::new(),
        };
        let mut encoder_trace = Vec::with_capacity(ENCODER_CONVS.len());
        let e = f.tape.constant(excerpts.clone());
        let z = self.encode(&mut f, e, &mut encoder_trace)?;

        let m = self.config.pad_multiple;
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let page = f.tape.constant(pages.clone());
        let mut x = if (ph, pw) == (h, w) {
            page
        } else {
            f.tape.pad2d(page, ph - h, pw - w)?
        };

        let mut skips = Vec::with_capacity(4);
        for block in &self.blocks[..4] {
            let y = block.forward(&mut f, x, z)?;
            skips.push(y);
            x = f.tape.max_pool2d(y)?;
        }
        x = self.blocks[4].forward(&mut f, x, z)?;
        for (block, up) in self.blocks[5..].iter().zip(&self.ups) {
            let (uw, ub) = (f.param(up.weight), f.param(up.bias));
            let upsampled = f.tape.conv_transpose2d(x, uw, ub)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let merged = f.tape.add(upsampled, skip)?;
            x = block.forward(&mut f, merged, z)?;
        }
        let logits = self.head.forward(&mut f, x)?;
        let probs = f.tape.sigmoid(logits);
        let output = if (ph, pw) == (h, w) {
            probs
        } else {
            f.tape.crop2d(probs, h, w)?
        };

        let bindings = f
            .bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(ForwardPass {
            output,
            embedding: z,
            encoder_trace,
            padded_size: (ph, pw),
            bindings,
            stat_updates: f.stat_updates,
        })
    }

    /// Just the conditioning vectors for a batch of excerpts.
    pub fn encode_spectrogram(&self, excerpts: &[&AudioExcerpt], mode: Mode) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut f = Forward {
            tape: &mut tape,
            store: &self.params,
            bound: vec![None; self.params.len()],
            mode,
            epsilon: self.config.bn_epsilon,
            stat_updates: Vec::new(),
        };
        let e = f.tape.constant(batch_excerpts(excerpts)?);
        let z = self.encode(&mut f, e, &mut Vec::new())?;
        Ok(tape
            .value(z)
            .data()
            .chunks_exact(EMBEDDING_DIM)
            .map(|c| c.to_vec())
            .collect())
    }

    /// Eval-mode probability maps, one `H × W` vector per input pair.
    pub fn predict(&self, pages: &[&ScorePage], excerpts: &[&AudioExcerpt]) -> Result<Vec<Vec<f64>>> {
        let pages_t = batch_pages(pages)?;
        let excerpts_t = batch_excerpts(excerpts)?;
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, &pages_t, &excerpts_t, Mode::Eval)?;
        let out = tape.value(pass.output);
        let [_, _, h, w] = out.dims4("predict")?;
        Ok(pages
            .iter()
            .zip(out.data().chunks_exact(h * w))
            .map(|(p, plane)| {
                (0..p.height())
                    .flat_map(|r| plane[r * w..r * w + p.width()].iter().copied())
                    .collect()
            })
            .collect())
    }
}

/// Stacks pages into `[B, 1, H, W]`, zero-padding each to the largest
/// height and width in the batch.
pub fn batch_pages(pages: &[&ScorePage]) -> Result<Tensor> {
    if pages.is_empty() {
        return Err(Error::Contract("empty page batch".into()));
    }
    let h = pages.iter().map(|p| p.height()).max().unwrap_or(0);
    let w = pages.iter().map(|p| p.width()).max().unwrap_or(0);
    let mut data = vec![0.0; pages.len() * h * w];
    for (plane, p) in data.chunks_exact_mut(h * w).zip(pages) {
        for r in 0..p.height() {
            plane[r * w..r * w + p.width()].copy_from_slice(&p.pixels()[r * p.width()..(r + 1) * p.width()]);
        }
    }
    Tensor::new(vec![pages.len(), 1, h, w], data)
}

/// Stacks excerpts into `[B, 1, 78, 40]`.
pub fn batch_excerpts(excerpts: &[&AudioExcerpt]) -> Result<Tensor> {
    if excerpts.is_empty() {
        return Err(Error::Contract("empty excerpt batch".into()));
    }
    let data = excerpts.iter().flat_map(|e| e.values().iter().copied()).collect();
    Tensor::new(vec![excerpts.len(), 1, NUM_BANDS, EXCERPT_FRAMES], data)
}
