//! Foresight sources and the alignment objective: EMA-model targets at
//! explicit future grid positions, frozen bidirectional-encoder features at
//! the same position, projection heads, and the cosine loss.

pub mod ema;
pub mod encoder;
pub mod heads;
pub mod loss;
pub mod schedule;

use serde::{Deserialize, Serialize};

pub use ema::ema_update;
pub use encoder::{pretrain_bidir_encoder, BidirEncoder, EncoderConfig, EncoderModel};
pub use heads::{HeadKind, ProjectionHeads};
pub use loss::{cosine_alignment_loss, AlignPair};
pub use schedule::{lambda_at, ScheduleKind, ScheduleSpec};

use crate::backbone::ArModel;
use crate::corpus::TokenGrid;
use crate::error::{ensure_domain, Result};
use crate::geometry::{AttnMask, Layout, Neighborhood};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForesightMode {
    /// Plain next-token prediction.
    #[default]
    None,
    /// Align layer-`l` states to EMA-model states at K future grid positions.
    ExplicitEma,
    /// Align layer-`l` states to frozen bidirectional-encoder features.
    ImplicitEncoder,
    /// K output heads predicting future tokens directly.
    OutputMtp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmaSource {
    /// Updated after every optimizer step.
    #[default]
    Online,
    /// Loaded once from a prior checkpoint and never updated.
    PretrainedFrozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForesightConfig {
    pub mode: ForesightMode,
    pub layout: Layout,
    pub k: usize,
    pub tau: f64,
    pub warmup_fraction: f64,
    pub lambda: ScheduleSpec,
    pub ema_source: EmaSource,
    /// Checkpoint supplying the frozen EMA when `ema_source = pretrained_frozen`.
    pub ema_checkpoint: Option<String>,
    /// Pretrained encoder checkpoint for implicit foresight; when absent the
    /// encoder is pretrained on the training split before the run starts.
    pub encoder_checkpoint: Option<String>,
    pub head_kind: HeadKind,
    pub head_hidden: usize,
    pub encoder: EncoderConfig,
}

impl Default for ForesightConfig {
    fn default() -> Self {
        Self {
            mode: ForesightMode::None,
            layout: Layout::Grid,
            k: 3,
            tau: 0.9999,
            warmup_fraction: 0.05,
            lambda: ScheduleSpec::step(2.0, 1.0, 0.5),
            ema_source: EmaSource::Online,
            ema_checkpoint: None,
            encoder_checkpoint: None,
            head_kind: HeadKind::Mlp,
            head_hidden: 128,
            encoder: EncoderConfig::default(),
        }
    }
}

impl ForesightConfig {
    pub fn none() -> Self {
        Self::default()
    }

    /// Explicit EMA foresight: K = 3 nearest future grid positions, step λ 2→1.
    pub fn explicit() -> Self {
        Self {
            mode: ForesightMode::ExplicitEma,
            ..Self::default()
        }
    }

    /// Implicit encoder foresight: same-position target, constant λ = 2.
    pub fn implicit() -> Self {
        Self {
            mode: ForesightMode::ImplicitEncoder,
            k: 1,
            warmup_fraction: 0.0,
            lambda: ScheduleSpec::constant(2.0),
            ..Self::default()
        }
    }

    pub fn mtp(k: usize, layout: Layout) -> Self {
        Self {
            mode: ForesightMode::OutputMtp,
            k,
            layout,
            warmup_fraction: 0.0,
            lambda: ScheduleSpec::constant(1.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_domain!((0.0..=1.0).contains(&self.tau), "tau {} outside [0, 1]", self.tau);
        ensure_domain!((0.0..1.0).contains(&self.warmup_fraction), "warmup_fraction must lie in [0, 1)");
        ensure_domain!(self.lambda.start >= 0.0 && self.lambda.end >= 0.0, "lambda values must be non-negative");
        if self.mode != ForesightMode::None {
            ensure_domain!(self.k >= 1, "foresight needs K >= 1");
        }
        if self.mode == ForesightMode::ImplicitEncoder {
            ensure_domain!(self.k == 1, "implicit foresight aligns only the current position (K = 1)");
        }
        if self.ema_source == EmaSource::PretrainedFrozen && self.mode == ForesightMode::ExplicitEma {
            ensure_domain!(self.ema_checkpoint.is_some(), "pretrained_frozen EMA needs ema_checkpoint");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).ceil() as usize
    }
}

/// Explicit targets: the EMA model's first `l` layers over the full sequence,
/// one row per position (`N × d`). Gathering by neighborhood happens through
/// [`explicit_pairs`].
pub fn explicit_targets<T: Real>(model: &ArModel, ema: &[T], grid: &TokenGrid) -> Result<Vec<T>> {
    model.forward_prefix(ema, grid, model.cfg.align_layer)
}

/// `(anchor, slot k, target j)` for every available neighborhood slot; slot
/// `k` is served by projection head `k`.
pub fn explicit_pairs(nbhd: &[Neighborhood], k: usize) -> Vec<AlignPair> {
    nbhd.iter()
        .flat_map(|nb| {
            nb.targets.iter().take(k).enumerate().map(move |(slot, &j)| AlignPair {
                anchor: nb.anchor,
                slot,
                target: j,
            })
        })
        .collect()
}

/// Same-position pairs used by implicit foresight.
pub fn same_position_pairs(len: usize) -> Vec<AlignPair> {
    (0..len)
        .map(|n| AlignPair {
            anchor: n,
            slot: 0,
            target: n,
        })
        .collect()
}

/// Encoder features under `mask` (`N × C`), constant w.r.t. the decoder.
pub fn implicit_targets<T: Real>(encoder: &BidirEncoder, grid: &TokenGrid, mask: &AttnMask) -> Result<Vec<T>> {
    encoder.features_with_mask(grid, mask)
}

/// Evaluates the alignment term over `hidden_l`: runs every head, compares
/// with `targets`, and returns the loss plus the gradient w.r.t. `hidden_l`
/// scaled by `weight`. Head gradients (also scaled) accumulate into `g_heads`.
pub fn foresight_loss<T: Real>(
    heads: &ProjectionHeads,
    p_heads: &[T],
    hidden_l: &[T],
    targets: &[T],
    pairs: &[AlignPair],
    weight: f64,
    g_heads: &mut [T],
) -> Result<(f64, Vec<T>)> {
    ensure_domain!(hidden_l.len() % heads.d_in == 0, "hidden width does not match head input width");
    ensure_domain!(targets.len() % heads.d_out == 0, "target width does not match head output width");
    let mut used = vec![false; heads.count()];
    for pair in pairs {
        ensure_domain!(pair.slot < heads.count(), "pair slot {} has no head", pair.slot);
        used[pair.slot] = true;
    }
    let mut outs = Vec::with_capacity(heads.count());
    let mut caches = Vec::with_capacity(heads.count());
    for k in 0..heads.count() {
        if used[k] {
            let (y, c) = heads.forward(p_heads, k, hidden_l)?;
            outs.push(y);
            caches.push(Some(c));
        } else {
            outs.push(Vec::new());
            caches.push(None);
        }
    }
    let (loss, dys) = cosine_alignment_loss(&outs, targets, pairs, heads.d_out)?;
    let mut dh = vec![T::zero(); hidden_l.len()];
    let w = T::c(weight);
    for (k, (dy, cache)) in dys.into_iter().zip(&caches).enumerate() {
        if let Some(cache) = cache {
            let scaled: Vec<T> = dy.iter().map(|&v| v * w).collect();
            let dx = heads.backward(p_heads, k, cache, &scaled, g_heads);
            for (a, b) in dh.iter_mut().zip(dx) {
                *a += b;
            }
        }
    }
    Ok((loss, dh))
}
