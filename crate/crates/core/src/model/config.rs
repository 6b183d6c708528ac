use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The nine U-Net blocks: A–D encode, E is the bottleneck, F–I decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Block {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    H,
    I,
}

impl Block {
    pub const ALL: [Block; 9] = [
        Block::A,
        Block::B,
        Block::C,
        Block::D,
        Block::E,
        Block::F,
        Block::G,
        Block::H,
        Block::I,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_label(c: char) -> Option<Self> {
        let c = c.to_ascii_uppercase();
        ('A'..='I').contains(&c).then(|| Self::ALL[(c as u8 - b'A') as usize])
    }

    /// Resolution level: A and I sit at full resolution (0), E at the
    /// deepest level (4).
    pub fn level(self) -> usize {
        let i = self.index();
        if i <= 4 {
            i
        } else {
            8 - i
        }
    }
}

/// Set of blocks whose second batch norm is followed by a FiLM layer.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FilmBlocks(u16);

/// The seven FiLM placements compared in the ablation table.
pub const ABLATION_SETS: [&str; 7] = ["E", "D-F", "C-G", "B-H", "A-I", "A-E", "E-I"];

impl FilmBlocks {
    pub fn none() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Self(0x1ff)
    }

    /// Inclusive block range, e.g. `range(C, G)` for C, D, E, F, G.
    pub fn range(from: Block, to: Block) -> Self {
        let (lo, hi) = (from.index().min(to.index()), from.index().max(to.index()));
        Self((lo..=hi).fold(0, |m, i| m | 1 << i))
    }

    pub fn contains(self, b: Block) -> bool {
        self.0 & (1 << b.index()) != 0
    }

    pub fn insert(&mut self, b: Block) {
        self.0 |= 1 << b.index();
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Block> {
        Block::ALL.into_iter().filter(move |b| self.contains(*b))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_bits(bits: u16) -> Result<Self> {
        if bits & !0x1ff != 0 {
            return Err(Error::Config(format!("invalid FiLM block bitmask {bits:#x}")));
        }
        Ok(Self(bits))
    }

    /// Row label in the ablation table, e.g. `FiLM Layers (C-G)`.
    pub fn table_label(self) -> String {
        format!("FiLM Layers ({self})")
    }
}

impl fmt::Debug for FilmBlocks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FilmBlocks({self})")
    }
}

/// Contiguous runs print as ranges joined by commas (`A,C-E`); the empty set
/// prints as `none`.
impl fmt::Display for FilmBlocks {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let mut parts = Vec::new();
        let mut i = 0;
        while i < 9 {
            if !self.contains(Block::ALL[i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i + 1 < 9 && self.contains(Block::ALL[i + 1]) {
                i += 1;
            }
            parts.push(if start == i {
                Block::ALL[i].label().to_string()
            } else {
                format!("{}-{}", Block::ALL[start].label(), Block::ALL[i].label())
            });
            i += 1;
        }
        f.write_str(&parts.join(","))
    }
}

/// Accepts `C-G`, `A,C,E`, `A-B,E`, single letters, and `none` (or an
/// empty string) for no FiLM layers.
impl FromStr for FilmBlocks {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(Self::none());
        }
        let bad = |part: &str| Error::Config(format!("invalid FiLM block spec {part:?} (expected letters A-I)"));
        let letter = |t: &str| -> Result<Block> {
            let mut chars = t.trim().chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Block::from_label(c).ok_or_else(|| bad(t)),
                _ => Err(bad(t)),
            }
        };
        let mut set = Self::none();
        for part in s.split(',') {
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (letter(a)?, letter(b)?);
                    if a > b {
                        return Err(bad(part));
                    }
                    set.0 |= Self::range(a, b).0;
                }
                None => set.insert(letter(part)?),
            }
        }
        Ok(set)
    }
}

/// How FiLM generator maps start out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FilmInit {
    /// Orthogonal weights and zero biases, like every other layer.
    #[default]
    Orthogonal,
    /// Zero weights with γ-bias 1 and β-bias 0: every FiLM layer starts as
    /// the identity.
    Identity,
}

impl FilmInit {
    pub(crate) fn tag(self) -> u8 {
        match self {
            FilmInit::Orthogonal => 0,
            FilmInit::Identity => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(FilmInit::Orthogonal),
            1 => Ok(FilmInit::Identity),
            t => Err(Error::Config(format!("unknown FiLM init tag {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Filters in block A; each level down doubles it.
    pub base_filters: usize,
    /// Encoder levels including the bottleneck (A–E).
    pub depth: usize,
    pub film_blocks: FilmBlocks,
    pub film_init: FilmInit,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    /// Pages are zero-padded to a multiple of this in both dimensions.
    pub pad_multiple: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_filters: 8,
            depth: 5,
            film_blocks: FilmBlocks::all(),
            film_init: FilmInit::Orthogonal,
            bn_momentum: 0.9,
            bn_epsilon: 1e-5,
            pad_multiple: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if self.depth != 5 {
            return Err(Error::Config(format!(
                "depth must be 5 (blocks A-E down, F-I up), got {}",
                self.depth
            )));
        }
        let min_multiple = 1 << (self.depth - 1);
        if self.pad_multiple == 0 || !self.pad_multiple.is_multiple_of(min_multiple) {
            return Err(Error::Config(format!(
                "pad_multiple must be a positive multiple of {min_multiple}, got {}",
                self.pad_multiple
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1)".into()));
        }
        if self.bn_epsilon.is_nan() || self.bn_epsilon <= 0.0 {
            return Err(Error::Config("bn_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Filter count of a block: `base · 2^level`.
    pub fn filters(&self, block: Block) -> usize {
        self.base_filters << block.level()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_ranges_and_lists() {
        let cg: FilmBlocks = "C-G".parse().unwrap();
        assert_eq!(cg.iter().collect::<Vec<_>>(), vec![Block::C, Block::D, Block::E, Block::F, Block::G]);
        assert_eq!(cg.to_string(), "C-G");
        assert_eq!(cg.table_label(), "FiLM Layers (C-G)");
        let list: FilmBlocks = "a,c,e".parse().unwrap();
        assert_eq!(list.to_string(), "A,C,E");
        assert_eq!("A-B,E".parse::<FilmBlocks>().unwrap().to_string(), "A-B,E");
        assert!("none".parse::<FilmBlocks>().unwrap().is_empty());
        assert_eq!("A-I".parse::<FilmBlocks>().unwrap(), FilmBlocks::all());
    }

    #[test]
    fn invalid_labels_are_config_errors() {
        for bad in ["J", "G-C", "AB", "C-", "1"] {
            assert!(matches!(bad.parse::<FilmBlocks>(), Err(Error::Config(_))), "{bad}");
        }
    }

    #[test]
    fn ablation_labels_round_trip() {
        for s in ABLATION_SETS {
            let set: FilmBlocks = s.parse().unwrap();
            assert_eq!(set.to_string(), s);
            assert_eq!(set.to_string().parse::<FilmBlocks>().unwrap(), set);
        }
    }

    #[test]
    fn filter_counts_per_block() {
        let cfg = ModelConfig::default();
        let counts: Vec<usize> = Block::ALL.iter().map(|&b| cfg.filters(b)).collect();
        assert_eq!(counts, [8, 16, 32, 64, 128, 64, 32, 16, 8]);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            pad_multiple: 8,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            depth: 4,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
