//! Small bidirectional transformer encoder pretrained by masked-token
//! prediction; its frozen final-layer features serve as implicit foresight.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{layout_tensors, read_layout, Checkpoint, Component};
use crate::corpus::{SampleStream, TokenGrid};
use crate::error::{ensure_domain, Error, Result};
use crate::geometry::{block_causal_mask, AttnMask};
use crate::nn::{self, BlockCache, BlockIdx, DropoutRates, NormCache};
use crate::optim::{clip_global_norm, AdamW, AdamWParams};
use crate::params::{LinearIdx, NormIdx, ParamKind, ParamLayout};
use crate::real::{all_finite, Real};
use crate::rng::{self, RngState, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Block size of the attention mask; 0 means the whole grid (fully
    /// bidirectional).
    pub block_size: usize,
    pub mask_ratio: f64,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            n_heads: 2,
            block_size: 0,
            mask_ratio: 0.3,
            pretrain_steps: 400,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn attn_mask(&self, seq_len: usize) -> Result<AttnMask> {
        let b = if self.block_size == 0 { seq_len } else { self.block_size };
        block_causal_mask(seq_len, b)
    }
}

/// Architecture and parameter layout of the encoder (no parameter values).
#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub layout: ParamLayout,
    tok_emb: std::ops::Range<usize>,
    pos_emb: std::ops::Range<usize>,
    blocks: Vec<BlockIdx>,
    ln_f: NormIdx,
    mlm: LinearIdx,
}

pub struct EncoderForward<T> {
    /// `N × C` final normalized features.
    pub features: Vec<T>,
    pub logits: Vec<T>,
    caches: Vec<BlockCache<T>>,
    norm: NormCache<T>,
    inputs: Vec<u16>,
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, vocab_size: usize, seq_len: usize) -> Result<Self> {
        ensure_domain!(cfg.layers >= 1, "encoder needs at least one layer");
        ensure_domain!(cfg.n_heads >= 1 && cfg.d_model % cfg.n_heads == 0, "encoder d_model must be divisible by n_heads");
        ensure_domain!(cfg.block_size <= seq_len, "encoder block size {} exceeds sequence length {seq_len}", cfg.block_size);
        let d = cfg.d_model;
        let mut layout = ParamLayout::new();
        // one extra row for the mask token
        let tok_emb = layout.push("tok_emb", &[vocab_size + 1, d], ParamKind::Embedding);
        let pos_emb = layout.push("pos_emb", &[seq_len, d], ParamKind::Embedding);
        let blocks = (0..cfg.layers)
            .map(|i| BlockIdx::declare(&mut layout, &format!("blocks.{i}"), d, cfg.n_heads))
            .collect();
        let ln_f = NormIdx::declare(&mut layout, "ln_f", d);
        let mlm = LinearIdx::declare(&mut layout, "mlm_head", d, vocab_size);
        Ok(Self {
            cfg,
            vocab_size,
            seq_len,
            layout,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            mlm,
        })
    }

    pub fn width(&self) -> usize {
        self.cfg.d_model
    }

    pub fn mask_id(&self) -> u16 {
        self.vocab_size as u16
    }

    pub fn forward<T: Real>(&self, p: &[T], inputs: &[u16], mask: &AttnMask) -> Result<EncoderForward<T>> {
        ensure_domain!(inputs.len() == self.seq_len, "encoder expects {} tokens, got {}", self.seq_len, inputs.len());
        ensure_domain!(mask.size() == self.seq_len, "mask size {} does not match sequence length {}", mask.size(), self.seq_len);
        ensure_domain!(p.len() == self.layout.len(), "encoder parameter buffer has wrong length");
        let d = self.cfg.d_model;
        let mut x = vec![T::zero(); self.seq_len * d];
        for (s, &tok) in inputs.iter().enumerate() {
            ensure_domain!(tok as usize <= self.vocab_size, "token {tok} outside encoder vocabulary");
            let src = self.tok_emb.start + tok as usize * d;
            let pos = self.pos_emb.start + s * d;
            for c in 0..d {
                x[s * d + c] = p[src + c] + p[pos + c];
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, c) = blk.forward(p, &x, mask, DropoutRates::default(), None);
            x = y;
            caches.push(c);
        }
        let (features, norm) = nn::layernorm_fwd(p, Some(&self.ln_f), &x, d);
        let logits = nn::linear_fwd(p, &self.mlm, &features, self.seq_len);
        Ok(EncoderForward {
            features,
            logits,
            caches,
            norm,
            inputs: inputs.to_vec(),
        })
    }

    fn backward<T: Real>(&self, p: &[T], fwd: &EncoderForward<T>, d_logits: &[T], g: &mut [T]) {
        let d = self.cfg.d_model;
        let df = nn::linear_bwd(p, &self.mlm, &fwd.features, d_logits, self.seq_len, g, true).unwrap();
        let mut dx = nn::layernorm_bwd(p, Some(&self.ln_f), &fwd.norm, &df, d, Some(g));
        for (blk, cache) in self.blocks.iter().zip(&fwd.caches).rev() {
            dx = blk.backward(p, cache, &dx, g);
        }
        for (s, &tok) in fwd.inputs.iter().enumerate() {
            let src = self.tok_emb.start + tok as usize * d;
            let pos = self.pos_emb.start + s * d;
            for c in 0..d {
                g[src + c] += dx[s * d + c];
                g[pos + c] += dx[s * d + c];
            }
        }
    }
}

/// A pretrained, frozen encoder together with its attention mask.
#[derive(Clone, Debug)]
pub struct BidirEncoder {
    pub model: EncoderModel,
    params: Vec<f32>,
    mask: AttnMask,
}

impl BidirEncoder {
    pub fn from_params(model: EncoderModel, params: Vec<f32>) -> Result<Self> {
        ensure_domain!(params.len() == model.layout.len(), "encoder parameter count mismatch");
        if !all_finite(&params) {
            return Err(Error::numeric("non-finite encoder parameters"));
        }
        let mask = model.cfg.attn_mask(model.seq_len)?;
        Ok(Self { model, params, mask })
    }

    /// Randomly initialized and frozen; the control for pretraining.
    pub fn random(cfg: EncoderConfig, vocab_size: usize, seq_len: usize) -> Result<Self> {
        let model = EncoderModel::new(cfg, vocab_size, seq_len)?;
        let params = model.layout.init(0.02, &mut rng::stream(model.cfg.seed, &[0xE1C]));
        Self::from_params(model, params)
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn mask(&self) -> &AttnMask {
        &self.mask
    }

    pub fn width(&self) -> usize {
        self.model.width()
    }

    /// Final-layer features of `grid` under the encoder's own mask.
    pub fn features<T: Real>(&self, grid: &TokenGrid) -> Result<Vec<T>> {
        self.features_with_mask(grid, &self.mask)
    }

    pub fn features_with_mask<T: Real>(&self, grid: &TokenGrid, mask: &AttnMask) -> Result<Vec<T>> {
        let p: Vec<T> = crate::real::cast_vec(&self.params);
        Ok(self.model.forward(&p, &grid.tokens, mask)?.features)
    }

    /// Fraction of masked positions whose token is recovered by argmax.
    pub fn masked_accuracy(&self, grids: &[TokenGrid], mask_ratio: f64, seed: u64) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for (i, g) in grids.iter().enumerate() {
            let mut r = rng::stream(seed, &[0xACC, i as u64]);
            let (inputs, masked) = corrupt(&g.tokens, mask_ratio, self.model.mask_id(), &mut r);
            let f = self.model.forward(&self.params, &inputs, &self.mask)?;
            let v = self.model.vocab_size;
            for &pos in &masked {
                let row = &f.logits[pos * v..(pos + 1) * v];
                let arg = argmax(row);
                hit += (arg == g.tokens[pos] as usize) as usize;
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderHeader {
    vocab_size: usize,
    seq_len: usize,
    encoder: EncoderConfig,
}

impl BidirEncoder {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = EncoderHeader {
            vocab_size: self.model.vocab_size,
            seq_len: self.model.seq_len,
            encoder: self.model.cfg.clone(),
        };
        Checkpoint {
            component: Component::Bidir,
            config: toml::to_string(&header).expect("encoder header serializes"),
            tensors: layout_tensors("encoder.", &self.model.layout, &self.params),
            rng: RngState::capture(&rng::stream(self.model.cfg.seed, &[])),
            step: self.model.cfg.pretrain_steps as u64,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.component != Component::Bidir {
            return Err(Error::Format("checkpoint does not hold an encoder".into()));
        }
        let header: EncoderHeader =
            toml::from_str(&ckpt.config).map_err(|e| Error::Format(format!("encoder config block: {}", e.message())))?;
        let model = EncoderModel::new(header.encoder, header.vocab_size, header.seq_len)?;
        let params = read_layout(ckpt, "encoder.", &model.layout)?;
        Self::from_params(model, params)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn corrupt(tokens: &[u16], ratio: f64, mask_id: u16, rng: &mut StreamRng) -> (Vec<u16>, Vec<usize>) {
    let mut inputs = tokens.to_vec();
    let mut masked = Vec::new();
    for (i, t) in inputs.iter_mut().enumerate() {
        if rng::unit(rng) < ratio {
            *t = mask_id;
            masked.push(i);
        }
    }
    (inputs, masked)
}

/// Masked-token pretraining on `corpus`, deterministic given `cfg.seed`.
pub fn pretrain_bidir_encoder(
    cfg: &EncoderConfig,
    corpus: &SampleStream,
    vocab_size: usize,
) -> Result<(BidirEncoder, Vec<f64>)> {
    ensure_domain!(
        cfg.mask_ratio > 0.0 && cfg.mask_ratio <= 1.0,
        "mask_ratio {} leaves no supervised positions",
        cfg.mask_ratio
    );
    ensure_domain!(!corpus.is_empty(), "empty pretraining corpus");
    ensure_domain!(cfg.batch_size >= 1, "batch size must be positive");
    let seq_len = corpus.cfg.height * corpus.cfg.width;
    let model = EncoderModel::new(cfg.clone(), vocab_size, seq_len)?;
    let mask = cfg.attn_mask(seq_len)?;
    let mut params: Vec<f32> = model.layout.init(0.02, &mut rng::stream(cfg.seed, &[0xE1C]));
    let decay = model.layout.decay_mask();
    let hp = AdamWParams {
        lr: cfg.lr,
        ..AdamWParams::default()
    };
    let mut opt = AdamW::new(params.len());
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    let v = vocab_size;
    for step in 0..cfg.pretrain_steps {
        let mut grads = vec![0.0f32; params.len()];
        let mut step_loss = 0.0;
        let mut r = rng::stream(cfg.seed, &[0x9E7, step as u64]);
        let batch: Vec<(TokenGrid, Vec<u16>, Vec<usize>)> = (0..cfg.batch_size)
            .map(|_| {
                let g = corpus.get(r.gen_range(0..corpus.len()));
                let (inputs, masked) = corrupt(&g.tokens, cfg.mask_ratio, model.mask_id(), &mut r);
                (g, inputs, masked)
            })
            .collect();
        let total_masked: usize = batch.iter().map(|b| b.2.len()).sum();
        if total_masked == 0 {
            losses.push(f64::NAN);
            continue;
        }
        let scale = 1.0 / total_masked as f32;
        for (g, inputs, masked) in &batch {
            if masked.is_empty() {
                continue;
            }
            let f = model.forward(&params, inputs, &mask)?;
            let mut dl = vec![0.0f32; f.logits.len()];
            for &pos in masked {
                let mut row = f.logits[pos * v..(pos + 1) * v].to_vec();
                nn::softmax_in_place(&mut row);
                let t = g.tokens[pos] as usize;
                step_loss -= (row[t] as f64).ln();
                row[t] -= 1.0;
                for (o, x) in dl[pos * v..(pos + 1) * v].iter_mut().zip(row) {
                    *o = x * scale;
                }
            }
            model.backward(&params, &f, &dl, &mut grads);
        }
        let loss = step_loss / total_masked as f64;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("encoder pretraining diverged at step {step}")));
        }
        losses.push(loss);
        clip_global_norm(&mut grads, 1.0);
        opt.step(&mut params, &grads, &decay, &hp, hp.lr);
    }
    Ok((BidirEncoder::from_params(model, params)?, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_splits, CorpusConfig};

    fn tiny_corpus() -> CorpusConfig {
        CorpusConfig {
            vocab_size: 16,
            height: 4,
            width: 4,
            num_classes: 2,
            palette_size: 4,
            noise_p: 0.1,
            seed: 1,
        }
    }

    #[test]
    fn zero_mask_ratio_is_rejected() {
        let (train, _) = make_splits(&tiny_corpus(), 4, 1).unwrap();
        let cfg = EncoderConfig {
            mask_ratio: 0.0,
            ..Default::default()
        };
        assert!(matches!(pretrain_bidir_encoder(&cfg, &train, 16), Err(Error::Domain(_))));
    }

    #[test]
    fn full_mask_features_see_everything_and_unit_blocks_are_causal() {
        let enc = BidirEncoder::random(
            EncoderConfig {
                d_model: 8,
                ..Default::default()
            },
            16,
            16,
        )
        .unwrap();
        let (train, _) = make_splits(&tiny_corpus(), 2, 1).unwrap();
        let g = train.get(0);
        let full = AttnMask::full(16);
        let causal = block_causal_mask(16, 1).unwrap();
        let base_full: Vec<f64> = enc.features_with_mask(&g, &full).unwrap();
        let base_causal: Vec<f64> = enc.features_with_mask(&g, &causal).unwrap();
        for m in 0..16 {
            let mut h = g.clone();
            h.tokens[m] = (h.tokens[m] + 1) % 16;
            let f: Vec<f64> = enc.features_with_mask(&h, &full).unwrap();
            assert!((0..16).filter(|&r| r != m).any(|r| f[r * 8..(r + 1) * 8] != base_full[r * 8..(r + 1) * 8]));
            let c: Vec<f64> = enc.features_with_mask(&h, &causal).unwrap();
            assert_eq!(c[..m * 8], base_causal[..m * 8]);
        }
        assert!(enc.features_with_mask::<f64>(&g, &AttnMask::full(4)).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (train, _) = make_splits(&tiny_corpus(), 16, 1).unwrap();
        let cfg = EncoderConfig {
            d_model: 8,
            pretrain_steps: 5,
            batch_size: 2,
            ..Default::default()
        };
        let (a, la) = pretrain_bidir_encoder(&cfg, &train, 16).unwrap();
        let (b, lb) = pretrain_bidir_encoder(&cfg, &train, 16).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(la, lb);
    }
}
