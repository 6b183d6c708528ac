//! Binary checkpoint format, all little-endian:
//!
//! ```text
//! "ACUN"  u32 version
//! model:  u32 base_filters, u32 depth, u16 film bitmask, u8 film init,
//!         f64 bn momentum, f64 bn epsilon, u32 pad multiple
//! train:  f64 lr, f64 weight decay, u32 batch, u32 patience, u32 max halvings,
//!         u32 max shift, u64 seed, u32 max epochs, u32 samples per piece
//! params: u32 count, then per parameter
//!         u32 name length, name (UTF-8), u8 kind, u8 dtype (0 = f64),
//!         u32 ndim, u64 × ndim dims, f64 × numel data
//! meta:   u64 epoch, f64 validation loss
//! ```

use std::fs;
use std::path::Path;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{FilmBlocks, FilmInit, Model, ModelConfig, ParamKind, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ACUN";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ParamStore,
    pub epoch: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train_config: &TrainConfig, epoch: usize, val_loss: f64) -> Self {
        Self {
            model_config: model.config().clone(),
            train_config: train_config.clone(),
            params: model.params().clone(),
            epoch,
            val_loss,
        }
    }

    /// Rebuilds the model and loads the stored parameters into it.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::build(self.model_config.clone(), 0)?;
        model.params_mut().copy_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);

        let m = &self.model_config;
        put_u32(&mut out, m.base_filters as u32);
        put_u32(&mut out, m.depth as u32);
        out.extend_from_slice(&m.film_blocks.bits().to_le_bytes());
        out.push(m.film_init.tag());
        put_f64(&mut out, m.bn_momentum);
        put_f64(&mut out, m.bn_epsilon);
        put_u32(&mut out, m.pad_multiple as u32);

        let t = &self.train_config;
        put_f64(&mut out, t.learning_rate);
        put_f64(&mut out, t.weight_decay);
        put_u32(&mut out, t.batch_size as u32);
        put_u32(&mut out, t.plateau_patience as u32);
        put_u32(&mut out, t.max_halvings as u32);
        put_u32(&mut out, t.augment_max_shift);
        put_u64(&mut out, t.seed);
        put_u32(&mut out, t.max_epochs as u32);
        put_u32(&mut out, t.samples_per_piece as u32);

        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.kind.tag());
            out.push(DTYPE_F64);
            put_u32(&mut out, p.value.ndim() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            for &v in p.value.data() {
                put_f64(&mut out, v);
            }
        }

        put_u64(&mut out, self.epoch as u64);
        put_f64(&mut out, self.val_loss);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }

        let model_config = ModelConfig {
            base_filters: r.u32()? as usize,
            depth: r.u32()? as usize,
            film_blocks: FilmBlocks::from_bits(u16::from_le_bytes(r.array()?))?,
            film_init: FilmInit::from_tag(r.u8()?)?,
            bn_momentum: r.f64()?,
            bn_epsilon: r.f64()?,
            pad_multiple: r.u32()? as usize,
        };
        let train_config = TrainConfig {
            learning_rate: r.f64()?,
            weight_decay: r.f64()?,
            batch_size: r.u32()? as usize,
            plateau_patience: r.u32()? as usize,
            max_halvings: r.u32()? as usize,
            augment_max_shift: r.u32()?,
            seed: r.u64()?,
            max_epochs: r.u32()? as usize,
            samples_per_piece: r.u32()? as usize,
        };

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let kind = ParamKind::from_tag(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown parameter kind")))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= r.remaining() / 8)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated or corrupt shape {shape:?}")))?;
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.add(name, kind, Tensor::new(shape, data)?);
        }

        let epoch = r.u64()? as usize;
        let val_loss = r.f64()?;
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            model_config,
            train_config,
            params,
            epoch,
            val_loss,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            base_filters: 2,
            film_blocks: "C-G".parse().unwrap(),
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 3).unwrap();
        Checkpoint::from_model(&model, &TrainConfig::default(), 7, 0.123_456_789)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cp = sample();
        let back = Checkpoint::from_bytes(&cp.to_bytes()).unwrap();
        assert_eq!(back, cp);
        for (a, b) in cp.params.iter().zip(back.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "{cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn mismatched_config_names_the_parameter() {
        let mut cp = sample();
        cp.model_config.base_filters = 4;
        let err = cp.to_model().unwrap_err().to_string();
        assert!(err.contains("encoder") || err.contains("unet"), "{err}");
    }
}
