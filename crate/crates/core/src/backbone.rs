//! Class-conditioned causal transformer decoder over raster-ordered grids.
//!
//! Slot 0 of the input sequence holds the class embedding and slot `i >= 1`
//! holds token `x_{i-1}`, so output row `n` scores `x_n` from the class and
//! `x_{<n}`. The hidden state after `align_layer` blocks is exposed for
//! representation alignment.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenGrid;
use crate::error::{ensure_domain, Error, Result};
use crate::geometry::{AttnMask, GridShape, Neighborhood};
use crate::nn::{self, BlockCache, BlockIdx, DropoutRates, KvCache, NormCache};
use crate::params::{LinearIdx, NormIdx, ParamKind, ParamLayout};
use crate::real::{all_finite, Real};
use crate::rng::{self, StreamRng};

/// Where the layer-`l` state is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HiddenTap {
    /// Residual stream after block `l`'s final residual add.
    #[default]
    Residual,
    /// The same, passed through a parameter-free layer normalization.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub align_layer: usize,
    pub dropout_token: f64,
    pub dropout_attn: f64,
    pub dropout_ffn: f64,
    pub dropout_cond: f64,
    pub hidden_tap: HiddenTap,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            d_model: 96,
            n_heads: 4,
            vocab_size: 64,
            height: 16,
            width: 16,
            num_classes: 8,
            align_layer: 4,
            dropout_token: 0.1,
            dropout_attn: 0.1,
            dropout_ffn: 0.1,
            dropout_cond: 0.1,
            hidden_tap: HiddenTap::Residual,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// The gradient-check model: 2 layers, width 8, 3x3 grid, 5 tokens.
    pub fn micro() -> Self {
        Self {
            layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 5,
            height: 3,
            width: 3,
            num_classes: 2,
            align_layer: 1,
            init_std: 0.3,
            ..Self::default()
        }
    }

    pub fn shape(&self) -> GridShape {
        GridShape {
            height: self.height,
            width: self.width,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.height * self.width
    }

    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn validate(&self) -> Result<()> {
        ensure_domain!(self.layers >= 2, "need at least two layers for an internal alignment layer");
        ensure_domain!(
            self.align_layer > 0 && self.align_layer < self.layers,
            "align_layer {} must lie strictly between 0 and {}",
            self.align_layer,
            self.layers
        );
        ensure_domain!(self.n_heads >= 1 && self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads");
        ensure_domain!(self.vocab_size >= 2, "vocabulary must have at least two tokens");
        ensure_domain!(self.height >= 1 && self.width >= 1, "grid must be non-empty");
        ensure_domain!(self.num_classes >= 1, "need at least one class");
        for (name, p) in [
            ("dropout_token", self.dropout_token),
            ("dropout_attn", self.dropout_attn),
            ("dropout_ffn", self.dropout_ffn),
            ("dropout_cond", self.dropout_cond),
        ] {
            ensure_domain!((0.0..1.0).contains(&p), "{name} = {p} outside [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ArModel {
    pub cfg: ModelConfig,
    pub layout: ParamLayout,
    tok_emb: Range<usize>,
    cls_emb: Range<usize>,
    pos_emb: Range<usize>,
    blocks: Vec<BlockIdx>,
    ln_f: NormIdx,
    head: LinearIdx,
}

/// Unnormalized logits and tapped hidden states, one row per grid position.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<T> {
    /// `N × V`; row `n` scores `x_n`.
    pub logits: Vec<T>,
    /// `N × d` states after `align_layer` blocks.
    pub hidden_l: Vec<T>,
    /// `N × d` final normalized states (input of the output heads).
    pub hidden_final: Vec<T>,
}

pub struct Forward<T> {
    pub out: ForwardOutput<T>,
    emb_mask: Option<Vec<T>>,
    caches: Vec<BlockCache<T>>,
    tap: Option<NormCache<T>>,
    norm_f: NormCache<T>,
    final_full: Vec<T>,
    tokens: Vec<u16>,
    class_used: usize,
}

impl ArModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut layout = ParamLayout::new();
        let tok_emb = layout.push("tok_emb", &[cfg.vocab_size, d], ParamKind::Embedding);
        let cls_emb = layout.push("cls_emb", &[cfg.num_classes + 1, d], ParamKind::Embedding);
        let pos_emb = layout.push("pos_emb", &[cfg.seq_len() + 1, d], ParamKind::Embedding);
        let blocks = (0..cfg.layers)
            .map(|i| BlockIdx::declare(&mut layout, &format!("blocks.{i}"), d, cfg.n_heads))
            .collect();
        let ln_f = NormIdx::declare(&mut layout, "ln_f", d);
        let head = LinearIdx::declare(&mut layout, "head", d, cfg.vocab_size);
        Ok(Self {
            cfg,
            layout,
            tok_emb,
            cls_emb,
            pos_emb,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init<T: Real>(&self, seed: u64) -> Vec<T> {
        self.layout.init(self.cfg.init_std, &mut rng::stream(seed, &[0xA5]))
    }

    /// The NTP output head (weight `d × V`, bias `V`).
    pub fn head_idx(&self) -> &LinearIdx {
        &self.head
    }

    fn check_inputs<T: Real>(&self, p: &[T], grid: &TokenGrid) -> Result<()> {
        ensure_domain!(p.len() == self.layout.len(), "parameter buffer has {} values, model needs {}", p.len(), self.layout.len());
        ensure_domain!(grid.tokens.len() == self.cfg.seq_len(), "grid has {} tokens, model expects {}", grid.tokens.len(), self.cfg.seq_len());
        ensure_domain!(grid.class_label <= self.cfg.num_classes, "class {} out of range", grid.class_label);
        ensure_domain!(
            grid.tokens.iter().all(|&t| (t as usize) < self.cfg.vocab_size),
            "token outside vocabulary"
        );
        if !all_finite(p) {
            return Err(Error::numeric("non-finite model parameters"));
        }
        Ok(())
    }

    fn embed<T: Real>(&self, p: &[T], class: usize, tokens: &[u16], slots: usize) -> Vec<T> {
        let d = self.cfg.d_model;
        let mut x = vec![T::zero(); slots * d];
        for s in 0..slots {
            let src = if s == 0 {
                self.cls_emb.start + class * d
            } else {
                self.tok_emb.start + tokens[s - 1] as usize * d
            };
            let pos = self.pos_emb.start + s * d;
            for c in 0..d {
                x[s * d + c] = p[src + c] + p[pos + c];
            }
        }
        x
    }

    /// Full forward pass. `mask` covers the `N + 1` slots (condition prefix at
    /// slot 0). Dropout is active only when `rng` is given.
    pub fn forward<T: Real>(
        &self,
        p: &[T],
        grid: &TokenGrid,
        mask: &AttnMask,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<Forward<T>> {
        self.check_inputs(p, grid)?;
        let n = self.cfg.seq_len();
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let slots = n + 1;
        ensure_domain!(mask.size() == slots, "mask has size {}, expected {slots}", mask.size());

        let mut class_used = grid.class_label;
        if let Some(r) = rng.as_deref_mut() {
            if rng::unit(r) < self.cfg.dropout_cond {
                class_used = self.cfg.null_class();
            }
        }
        let mut x = self.embed(p, class_used, &grid.tokens, slots);
        let emb_mask = nn::dropout_mask::<T>(x.len(), self.cfg.dropout_token, rng.as_deref_mut());
        nn::apply_mask(&mut x, &emb_mask);

        let drop = DropoutRates {
            attn: self.cfg.dropout_attn,
            resid: self.cfg.dropout_ffn,
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut hidden_l = Vec::new();
        let mut tap = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, c) = blk.forward(p, &x, mask, drop, rng.as_deref_mut());
            x = y;
            caches.push(c);
            if i + 1 == self.cfg.align_layer {
                let (h, cache) = self.tap_rows(&x[..n * d]);
                hidden_l = h;
                tap = cache;
            }
        }
        let (final_full, norm_f) = nn::layernorm_fwd(p, Some(&self.ln_f), &x, d);
        let hidden_final = final_full[..n * d].to_vec();
        let logits = nn::linear_fwd(p, &self.head, &hidden_final, n);
        debug_assert_eq!(logits.len(), n * v);
        Ok(Forward {
            out: ForwardOutput {
                logits,
                hidden_l,
                hidden_final,
            },
            emb_mask,
            caches,
            tap,
            norm_f,
            final_full,
            tokens: grid.tokens.clone(),
            class_used,
        })
    }

    fn tap_rows<T: Real>(&self, rows: &[T]) -> (Vec<T>, Option<NormCache<T>>) {
        match self.cfg.hidden_tap {
            HiddenTap::Residual => (rows.to_vec(), None),
            HiddenTap::Normalized => {
                let (h, c) = nn::layernorm_fwd::<T>(&[], None, rows, self.cfg.d_model);
                (h, Some(c))
            }
        }
    }

    /// Evaluation-mode states after the first `layers` blocks, `N × d`.
    pub fn forward_prefix<T: Real>(&self, p: &[T], grid: &TokenGrid, layers: usize) -> Result<Vec<T>> {
        self.check_inputs(p, grid)?;
        ensure_domain!(layers >= 1 && layers <= self.cfg.layers, "prefix depth {layers} out of range");
        let n = self.cfg.seq_len();
        let mask = AttnMask::causal(n + 1);
        let mut x = self.embed(p, grid.class_label, &grid.tokens, n + 1);
        for blk in &self.blocks[..layers] {
            x = blk.forward(p, &x, &mask, DropoutRates::default(), None).0;
        }
        Ok(self.tap_rows(&x[..n * self.cfg.d_model]).0)
    }

    /// Accumulates parameter gradients into `g` given gradients w.r.t. the
    /// logits, the tapped layer-`l` states and the final states.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        fwd: &Forward<T>,
        d_logits: Option<&[T]>,
        d_hidden_l: Option<&[T]>,
        d_hidden_final: Option<&[T]>,
        g: &mut [T],
    ) {
        let n = self.cfg.seq_len();
        let d = self.cfg.d_model;
        let slots = n + 1;
        let mut d_final = vec![T::zero(); slots * d];
        if let Some(dl) = d_logits {
            let dh = nn::linear_bwd(p, &self.head, &fwd.out.hidden_final, dl, n, g, true).unwrap();
            d_final[..n * d].copy_from_slice(&dh);
        }
        if let Some(df) = d_hidden_final {
            for (a, &b) in d_final.iter_mut().zip(df) {
                *a += b;
            }
        }
        debug_assert_eq!(fwd.final_full.len(), slots * d);
        let mut dx = nn::layernorm_bwd(p, Some(&self.ln_f), &fwd.norm_f, &d_final, d, Some(g));
        for (i, blk) in self.blocks.iter().enumerate().rev() {
            if i + 1 == self.cfg.align_layer {
                if let Some(dh) = d_hidden_l {
                    let dh = match &fwd.tap {
                        Some(c) => nn::layernorm_bwd::<T>(&[], None, c, dh, d, None),
                        None => dh.to_vec(),
                    };
                    for (a, &b) in dx.iter_mut().zip(&dh) {
                        *a += b;
                    }
                }
            }
            dx = blk.backward(p, &fwd.caches[i], &dx, g);
        }
        nn::apply_mask(&mut dx, &fwd.emb_mask);
        for s in 0..slots {
            let src = if s == 0 {
                self.cls_emb.start + fwd.class_used * d
            } else {
                self.tok_emb.start + fwd.tokens[s - 1] as usize * d
            };
            let pos = self.pos_emb.start + s * d;
            for c in 0..d {
                let v = dx[s * d + c];
                g[src + c] += v;
                g[pos + c] += v;
            }
        }
    }

    pub fn decoder<'a, T: Real>(&'a self, p: &'a [T]) -> IncrementalDecoder<'a, T> {
        IncrementalDecoder {
            model: self,
            p,
            caches: vec![KvCache::default(); self.blocks.len()],
            slot: 0,
        }
    }
}

/// Causal decoding one slot at a time with cached keys and values.
pub struct IncrementalDecoder<'a, T> {
    model: &'a ArModel,
    p: &'a [T],
    caches: Vec<KvCache<T>>,
    slot: usize,
}

impl<T: Real> IncrementalDecoder<'_, T> {
    /// Feeds the class prefix; returns logits for `x_0`.
    pub fn start(&mut self, class: usize) -> Vec<T> {
        assert_eq!(self.slot, 0, "decoder already started");
        self.advance(class, None)
    }

    /// Feeds token `x_{slot-1}`; returns logits for the next token.
    pub fn push(&mut self, token: u16) -> Vec<T> {
        assert!(self.slot >= 1 && self.slot <= self.model.cfg.seq_len(), "decoder out of slots");
        self.advance(0, Some(token))
    }

    fn advance(&mut self, class: usize, token: Option<u16>) -> Vec<T> {
        let m = self.model;
        let d = m.cfg.d_model;
        // embed just this slot
        let src = match token {
            None => m.cls_emb.start + class * d,
            Some(t) => m.tok_emb.start + t as usize * d,
        };
        let pos = m.pos_emb.start + self.slot * d;
        let mut x: Vec<T> = (0..d).map(|c| self.p[src + c] + self.p[pos + c]).collect();
        for (blk, kv) in m.blocks.iter().zip(self.caches.iter_mut()) {
            x = blk.step(self.p, &x, kv);
        }
        let (h, _) = nn::layernorm_fwd(self.p, Some(&m.ln_f), &x, d);
        self.slot += 1;
        nn::linear_fwd(self.p, &m.head, &h, 1)
    }
}

/// Mean next-token cross-entropy and its gradient w.r.t. the logits.
pub fn ntp_loss_grad<T: Real>(logits: &[T], tokens: &[u16], vocab: usize) -> Result<(f64, Vec<T>)> {
    let n = tokens.len();
    ensure_domain!(logits.len() == n * vocab, "logits shape does not match {n} x {vocab}");
    if !all_finite(logits) {
        return Err(Error::numeric("non-finite logits"));
    }
    let mut grad = logits.to_vec();
    let mut total = 0.0f64;
    let inv_n = T::c(1.0 / n as f64);
    for (i, row) in grad.chunks_exact_mut(vocab).enumerate() {
        nn::softmax_in_place(row);
        let target = tokens[i] as usize;
        total -= row[target].f64().ln();
        row[target] -= T::one();
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    Ok((total / n as f64, grad))
}

/// Mean next-token cross-entropy in nats, computed from log-sum-exp.
pub fn ntp_loss<T: Real>(out: &ForwardOutput<T>, grid: &TokenGrid, vocab: usize) -> Result<f64> {
    let n = grid.tokens.len();
    ensure_domain!(out.logits.len() == n * vocab, "logits shape does not match {n} x {vocab}");
    if !all_finite(&out.logits) {
        return Err(Error::numeric("non-finite logits"));
    }
    let total: f64 = out
        .logits
        .chunks_exact(vocab)
        .zip(&grid.tokens)
        .map(|(row, &t)| log_sum_exp(row) - row[t as usize].f64())
        .sum();
    Ok(total / n as f64)
}

fn log_sum_exp<T: Real>(row: &[T]) -> f64 {
    let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln()
}

/// K linear output heads predicting tokens at neighborhood slots.
#[derive(Clone, Debug)]
pub struct MtpHeads {
    pub layout: ParamLayout,
    pub heads: Vec<LinearIdx>,
}

impl MtpHeads {
    pub fn new(k: usize, d_model: usize, vocab: usize) -> Result<Self> {
        ensure_domain!(k >= 1, "MTP needs at least one head");
        let mut layout = ParamLayout::new();
        let heads = (0..k)
            .map(|i| LinearIdx::declare(&mut layout, &format!("mtp.{i}"), d_model, vocab))
            .collect();
        Ok(Self { layout, heads })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }
}

/// Mean cross-entropy of head `k` applied to `hidden_final[n]` against the
/// token at the `k`-th neighborhood target of `n`, over all available pairs.
/// Returns the loss, the gradient w.r.t. `hidden_final`, and accumulates head
/// gradients into `g_heads` when provided.
pub fn mtp_loss<T: Real>(
    heads: &MtpHeads,
    p_heads: &[T],
    hidden_final: &[T],
    grid: &TokenGrid,
    nbhd: &[Neighborhood],
    g_heads: Option<&mut [T]>,
) -> Result<(f64, Vec<T>)> {
    let n = grid.tokens.len();
    ensure_domain!(nbhd.len() == n, "need one neighborhood per position");
    let d = heads.heads[0].fan_in;
    let vocab = heads.heads[0].fan_out;
    ensure_domain!(hidden_final.len() == n * d, "hidden states do not match {n} x {d}");
    let pairs: usize = nbhd.iter().map(|nb| nb.targets.len().min(heads.k())).sum();
    ensure_domain!(pairs > 0, "no available prediction pairs");
    let scale = T::c(1.0 / pairs as f64);

    let mut total = 0.0f64;
    let mut d_hidden = vec![T::zero(); n * d];
    let mut g_heads = g_heads;
    for (k, head) in heads.heads.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| nbhd[i].targets.len() > k).collect();
        if rows.is_empty() {
            continue;
        }
        let x: Vec<T> = rows.iter().flat_map(|&i| hidden_final[i * d..(i + 1) * d].iter().copied()).collect();
        let mut logits = nn::linear_fwd(p_heads, head, &x, rows.len());
        if !all_finite(&logits) {
            return Err(Error::numeric("non-finite MTP logits"));
        }
        for (r, &i) in rows.iter().enumerate() {
            let row = &mut logits[r * vocab..(r + 1) * vocab];
            let target = grid.tokens[nbhd[i].targets[k]] as usize;
            total += log_sum_exp(row) - row[target].f64();
            nn::softmax_in_place(row);
            row[target] -= T::one();
            row.iter_mut().for_each(|v| *v *= scale);
        }
        let mut scratch;
        let g = match g_heads.as_deref_mut() {
            Some(g) => g,
            None => {
                scratch = vec![T::zero(); p_heads.len()];
                &mut scratch[..]
            }
        };
        let dx = nn::linear_bwd(p_heads, head, &x, &logits, rows.len(), g, true).unwrap();
        for (r, &i) in rows.iter().enumerate() {
            for c in 0..d {
                d_hidden[i * d + c] += dx[r * d + c];
            }
        }
    }
    Ok((total / pairs as f64, d_hidden))
}
