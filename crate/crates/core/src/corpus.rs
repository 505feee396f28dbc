//! Class-conditioned quadrant-pattern token grids and their exact coherence
//! oracle.
//!
//! A grid of class `c` is split into four quadrants; each quadrant is filled
//! with one token of class `c`'s palette (a random distinct palette slot per
//! quadrant), after which every token is independently replaced by a uniform
//! draw with probability `noise_p`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_domain, Error, Result};
use crate::geometry::GridShape;
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub palette_size: usize,
    pub noise_p: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            height: 16,
            width: 16,
            num_classes: 8,
            palette_size: 4,
            noise_p: 0.1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn shape(&self) -> GridShape {
        GridShape {
            height: self.height,
            width: self.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_domain!(self.height >= 2 && self.width >= 2, "grid must be at least 2x2 to hold four quadrants");
        ensure_domain!(self.num_classes >= 1, "num_classes must be positive");
        ensure_domain!(self.palette_size >= 4, "palette_size must be at least 4 (one slot per quadrant)");
        ensure_domain!(
            self.num_classes * self.palette_size <= self.vocab_size,
            "class palettes ({} x {}) do not fit in vocabulary of {}",
            self.num_classes,
            self.palette_size,
            self.vocab_size
        );
        ensure_domain!(self.vocab_size <= u16::MAX as usize + 1, "vocabulary exceeds u16 token ids");
        ensure_domain!((0.0..=1.0).contains(&self.noise_p), "noise_p {} outside [0, 1]", self.noise_p);
        Ok(())
    }

    /// Class owning `token`, if the token lies in some class palette.
    pub fn palette_owner(&self, token: u16) -> Option<usize> {
        let t = token as usize;
        (t < self.num_classes * self.palette_size).then(|| t / self.palette_size)
    }

    /// Quadrant index (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
    pub fn quadrant_of(&self, n: usize) -> usize {
        let (r, c) = (n / self.width, n % self.width);
        let bottom = r >= self.height.div_ceil(2);
        let right = c >= self.width.div_ceil(2);
        (bottom as usize) * 2 + right as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub class_label: usize,
    pub tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn generate_sample(cfg: &CorpusConfig, class: usize, rng: &mut StreamRng) -> Result<TokenGrid> {
    ensure_domain!(class < cfg.num_classes, "class {class} outside [0, {})", cfg.num_classes);
    let slots = sample_indices(rng, cfg.palette_size, 4);
    let base = class * cfg.palette_size;
    let quad_tokens: Vec<u16> = slots.iter().map(|s| (base + s) as u16).collect();
    let n = cfg.height * cfg.width;
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let mut t = quad_tokens[cfg.quadrant_of(i)];
        if rng::unit(rng) < cfg.noise_p {
            t = rng.gen_range(0..cfg.vocab_size) as u16;
        }
        tokens.push(t);
    }
    Ok(TokenGrid {
        class_label: class,
        tokens,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceReport {
    pub score: f64,
    /// Majority token of each quadrant.
    pub majority: [u16; 4],
    /// Palette owner of each quadrant's majority token.
    pub owners: [Option<usize>; 4],
}

pub fn coherence_score(grid: &TokenGrid, cfg: &CorpusConfig) -> CoherenceReport {
    let mut counts = vec![[0u32; 4]; cfg.vocab_size.max(1)];
    for (i, &t) in grid.tokens.iter().enumerate() {
        if let Some(slot) = counts.get_mut(t as usize) {
            slot[cfg.quadrant_of(i)] += 1;
        }
    }
    let mut majority = [0u16; 4];
    for (q, m) in majority.iter_mut().enumerate() {
        let mut best = (0u32, 0usize);
        for (tok, c) in counts.iter().enumerate() {
            if c[q] > best.0 {
                best = (c[q], tok);
            }
        }
        *m = best.1 as u16;
    }
    let owners = majority.map(|t| cfg.palette_owner(t));
    let mut per_class = vec![0usize; cfg.num_classes];
    for o in owners.iter().flatten() {
        per_class[*o] += 1;
    }
    let plurality = per_class.iter().copied().max().unwrap_or(0);
    CoherenceReport {
        score: plurality as f64 / 4.0,
        majority,
        owners,
    }
}

/// Deterministic, randomly addressable stream of samples for one split.
#[derive(Clone, Debug)]
pub struct SampleStream {
    pub cfg: CorpusConfig,
    split_tag: u64,
    len: usize,
}

const TRAIN_TAG: u64 = 0x7472_6169_6e;
const VAL_TAG: u64 = 0x7661_6c;

impl SampleStream {
    pub fn new(cfg: CorpusConfig, split_tag: u64, len: usize) -> Self {
        Self { cfg, split_tag, len }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Sample `i`; depends only on (config, split, i).
    pub fn get(&self, i: usize) -> TokenGrid {
        let mut r = rng::stream(self.cfg.seed, &[self.split_tag, i as u64]);
        let class = r.gen_range(0..self.cfg.num_classes);
        generate_sample(&self.cfg, class, &mut r).expect("class drawn in range")
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenGrid> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

pub fn make_splits(cfg: &CorpusConfig, n_train: usize, n_val: usize) -> Result<(SampleStream, SampleStream)> {
    cfg.validate()?;
    ensure_domain!(n_train > 0 && n_val > 0, "split sizes must be positive");
    Ok((
        SampleStream::new(cfg.clone(), TRAIN_TAG, n_train),
        SampleStream::new(cfg.clone(), VAL_TAG, n_val),
    ))
}

pub const CORPUS_MAGIC: &[u8; 8] = b"ARFSCORP";
pub const CORPUS_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusHeader {
    pub vocab_size: usize,
    pub shape: GridShape,
}

/// Encodes grids in the corpus dump format (16-byte header, then per grid a
/// u16 class label and N u16 tokens, all little-endian).
pub fn encode_dump(header: &CorpusHeader, grids: &[TokenGrid]) -> Result<Vec<u8>> {
    let n = header.shape.len();
    let v = u16::try_from(header.vocab_size).map_err(|_| Error::domain("vocabulary too large for dump header"))?;
    let h = u16::try_from(header.shape.height).map_err(|_| Error::domain("height too large for dump header"))?;
    let w = u16::try_from(header.shape.width).map_err(|_| Error::domain("width too large for dump header"))?;
    let mut out = Vec::with_capacity(16 + grids.len() * (n + 1) * 2);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    for g in grids {
        ensure_domain!(g.tokens.len() == n, "grid has {} tokens, header says {n}", g.tokens.len());
        let label = u16::try_from(g.class_label).map_err(|_| Error::domain("class label exceeds u16"))?;
        out.extend_from_slice(&label.to_le_bytes());
        for &t in &g.tokens {
            ensure_domain!((t as usize) < header.vocab_size, "token {t} outside vocabulary");
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dump(bytes: &[u8]) -> Result<(CorpusHeader, Vec<TokenGrid>)> {
    if bytes.len() < 16 || &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Format("missing ARFSCORP header".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(8);
    if version != CORPUS_VERSION {
        return Err(Error::Format(format!("unsupported corpus version {version}")));
    }
    let header = CorpusHeader {
        vocab_size: u16_at(10) as usize,
        shape: GridShape::new(u16_at(12) as usize, u16_at(14) as usize)?,
    };
    let rec = (header.shape.len() + 1) * 2;
    let body = &bytes[16..];
    if body.len() % rec != 0 {
        return Err(Error::Format(format!("body of {} bytes is not a multiple of the {rec}-byte record", body.len())));
    }
    let grids = body
        .chunks_exact(rec)
        .map(|r| TokenGrid {
            class_label: u16::from_le_bytes([r[0], r[1]]) as usize,
            tokens: r[2..].chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect(),
        })
        .collect();
    Ok((header, grids))
}

pub fn write_dump(path: &Path, header: &CorpusHeader, grids: &[TokenGrid]) -> Result<()> {
    let bytes = encode_dump(header, grids)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<(CorpusHeader, Vec<TokenGrid>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CorpusConfig {
        CorpusConfig::default()
    }

    fn quadrant_grid(cfg: &CorpusConfig, tokens: [u16; 4]) -> TokenGrid {
        TokenGrid {
            class_label: 0,
            tokens: (0..cfg.height * cfg.width).map(|i| tokens[cfg.quadrant_of(i)]).collect(),
        }
    }

    #[test]
    fn noiseless_samples_are_coherent() {
        let c = CorpusConfig { noise_p: 0.0, ..cfg() };
        let mut r = rng::stream(3, &[]);
        for class in 0..c.num_classes {
            let g = generate_sample(&c, class, &mut r).unwrap();
            let rep = coherence_score(&g, &c);
            assert_eq!(rep.score, 1.0);
            assert!(rep.owners.iter().all(|o| *o == Some(class)));
            let mut m = rep.majority.to_vec();
            m.sort();
            m.dedup();
            assert_eq!(m.len(), 4, "quadrants use distinct palette slots");
        }
    }

    #[test]
    fn generation_is_deterministic_and_checked() {
        let c = cfg();
        let a = generate_sample(&c, 2, &mut rng::stream(9, &[])).unwrap();
        let b = generate_sample(&c, 2, &mut rng::stream(9, &[])).unwrap();
        assert_eq!(a, b);
        assert!(generate_sample(&c, 8, &mut rng::stream(9, &[])).is_err());
    }

    #[test]
    fn coherence_fractions() {
        let c = cfg();
        // class 2 palette is tokens 8..12, class 0 is 0..4
        assert_eq!(coherence_score(&quadrant_grid(&c, [8, 9, 10, 11]), &c).score, 1.0);
        assert_eq!(coherence_score(&quadrant_grid(&c, [8, 9, 10, 1]), &c).score, 0.75);
        assert_eq!(coherence_score(&quadrant_grid(&c, [40, 50, 60, 63]), &c).score, 0.0);
    }

    #[test]
    fn splits_are_deterministic_and_distinct() {
        let c = cfg();
        let (t1, v1) = make_splits(&c, 5, 1).unwrap();
        let (t2, _) = make_splits(&c, 5, 1).unwrap();
        assert_eq!(v1.iter().count(), 1);
        assert_eq!(t1.iter().collect::<Vec<_>>(), t2.iter().collect::<Vec<_>>());
        assert_ne!(t1.get(0), v1.get(0));
        assert!(make_splits(&c, 0, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig { num_classes: 17, ..cfg() }.validate().is_err());
        assert!(CorpusConfig { noise_p: 1.5, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn dump_roundtrip_and_header_layout() {
        let c = cfg();
        let (train, _) = make_splits(&c, 3, 1).unwrap();
        let grids: Vec<_> = train.iter().collect();
        let header = CorpusHeader {
            vocab_size: 64,
            shape: c.shape(),
        };
        let bytes = encode_dump(&header, &grids).unwrap();
        assert_eq!(&bytes[..16], b"ARFSCORP\x01\x00\x40\x00\x10\x00\x10\x00");
        assert_eq!(bytes.len(), 16 + 3 * 257 * 2);
        let (h2, g2) = decode_dump(&bytes).unwrap();
        assert_eq!(h2, header);
        assert_eq!(g2, grids);
        assert!(decode_dump(&bytes[..bytes.len() - 1]).is_err());
    }
}
