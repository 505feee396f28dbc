//! Training loop: next-token loss plus the weighted foresight term, one
//! global-norm clip, AdamW, EMA maintenance, checkpoints and the metrics log.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{mtp_loss, ntp_loss_grad, ArModel, ModelConfig, MtpHeads};
use crate::checkpoint::{layout_tensors, read_layout, Checkpoint, Component, NamedTensor};
use crate::config::RunConfig;
use crate::corpus::{make_splits, SampleStream, TokenGrid};
use crate::error::{ensure_domain, Error, Result};
use crate::alignment::{
    ema_update, explicit_pairs, explicit_targets, foresight_loss, implicit_targets, lambda_at, pretrain_bidir_encoder,
    same_position_pairs, AlignPair, BidirEncoder, EmaSource, EncoderConfig, ForesightConfig, ForesightMode, HeadKind,
    ProjectionHeads, ScheduleSpec,
};
use crate::geometry::{all_neighborhoods, AttnMask, Neighborhood};
use crate::optim::{clip_global_norm, AdamW, AdamWParams};
use crate::params::ParamLayout;
use crate::real::{cast_vec, Real};
use crate::rng::{self, RngState, StreamRng};

pub const METRICS_HEADER: &str = "step,ntp,foresight,lambda,total,grad_norm,wall_ms";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Cosine learning-rate decay to zero over `total_steps`.
    pub cosine_decay: bool,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Log measured step times; when off the `wall_ms` column holds 0.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
            cosine_decay: false,
            batch_size: 8,
            total_steps: 1000,
            seed: 0,
            eval_every: 100,
            n_train: 4096,
            n_val: 256,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_domain!(self.lr > 0.0, "lr must be positive");
        ensure_domain!((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2), "betas must lie in [0, 1)");
        ensure_domain!(self.eps > 0.0, "eps must be positive");
        ensure_domain!(self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure_domain!(self.clip_norm > 0.0, "clip_norm must be positive");
        ensure_domain!(self.batch_size >= 1, "batch_size must be positive");
        ensure_domain!(self.total_steps >= 1, "total_steps must be positive");
        ensure_domain!(self.eval_every >= 1, "eval_every must be positive");
        ensure_domain!(self.n_train >= 1 && self.n_val >= 1, "splits must be non-empty");
        Ok(())
    }

    pub fn adam(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay {
            let progress = step as f64 / self.total_steps as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    /// Number of completed updates, starting at 1.
    pub step: u64,
    pub ntp_loss: f64,
    /// Absent when the foresight term is off (no mode, warm-up, or zero weight).
    pub foresight_loss: Option<f64>,
    /// Weight applied to the foresight term, 0 when absent.
    pub lambda: f64,
    pub total_loss: f64,
    pub grad_norm_preclip: f64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let fs = self.foresight_loss.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.ntp_loss, fs, self.lambda, self.total_loss, self.grad_norm_preclip, self.wall_ms
        )
    }
}

/// Training-only output heads appended after the backbone parameters.
#[derive(Clone, Debug)]
pub enum AuxHeads {
    None,
    Mtp(MtpHeads),
    Projection(ProjectionHeads),
}

impl AuxHeads {
    pub fn layout(&self) -> Option<&ParamLayout> {
        match self {
            AuxHeads::None => None,
            AuxHeads::Mtp(h) => Some(&h.layout),
            AuxHeads::Projection(h) => Some(&h.layout),
        }
    }
}

/// Mutable training state. `params` holds the backbone followed by the
/// auxiliary heads; `ema` shadows the backbone only.
#[derive(Clone, Debug)]
pub struct ArState {
    pub params: Vec<f32>,
    pub backbone_len: usize,
    pub opt: AdamW<f32>,
    pub ema: Option<Vec<f32>>,
    pub step: u64,
    pub rng: StreamRng,
}

impl ArState {
    pub fn backbone(&self) -> &[f32] {
        &self.params[..self.backbone_len]
    }
}

/// Loss values and the gradient over all trainable parameters.
pub struct LossGrad<T> {
    pub ntp: f64,
    pub foresight: Option<f64>,
    pub grad: Vec<T>,
}

/// Immutable pieces of a run: architecture, heads, frozen targets and pairs.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: ArModel,
    pub aux: AuxHeads,
    pub encoder: Option<BidirEncoder>,
    frozen_ema: Option<Vec<f32>>,
    layout: ParamLayout,
    decay: Vec<bool>,
    mask: AttnMask,
    pairs: Vec<AlignPair>,
    mtp_nbhd: Vec<Neighborhood>,
}

impl Trainer {
    /// Builds a trainer; implicit foresight requires `encoder`.
    pub fn new(cfg: RunConfig, encoder: Option<BidirEncoder>) -> Result<Self> {
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.foresight.validate()?;
        let model = ArModel::new(cfg.model.clone())?;
        let m = &cfg.model;
        let f = &cfg.foresight;
        let n = m.seq_len();
        let mut pairs = Vec::new();
        let mut mtp_nbhd = Vec::new();
        let aux = match f.mode {
            ForesightMode::None => AuxHeads::None,
            ForesightMode::OutputMtp => {
                // slot 0 of a neighborhood is the anchor itself, already
                // covered by the NTP head
                mtp_nbhd = all_neighborhoods(f.k + 1, m.shape(), f.layout)?
                    .into_iter()
                    .map(|mut nb| {
                        debug_assert_eq!(nb.targets.first(), Some(&nb.anchor));
                        nb.targets.remove(0);
                        nb
                    })
                    .collect();
                AuxHeads::Mtp(MtpHeads::new(f.k, m.d_model, m.vocab_size)?)
            }
            ForesightMode::ExplicitEma => {
                pairs = explicit_pairs(&all_neighborhoods(f.k, m.shape(), f.layout)?, f.k);
                AuxHeads::Projection(ProjectionHeads::new(f.head_kind, f.k, m.d_model, f.head_hidden, m.d_model)?)
            }
            ForesightMode::ImplicitEncoder => {
                let enc = encoder
                    .as_ref()
                    .ok_or_else(|| Error::domain("implicit foresight needs a pretrained encoder"))?;
                ensure_domain!(
                    enc.model.seq_len == n && enc.model.vocab_size == m.vocab_size,
                    "encoder was built for a different grid or vocabulary"
                );
                pairs = same_position_pairs(n);
                AuxHeads::Projection(ProjectionHeads::new(f.head_kind, 1, m.d_model, f.head_hidden, enc.width())?)
            }
        };
        let frozen_ema = match (f.mode, f.ema_source) {
            (ForesightMode::ExplicitEma, EmaSource::PretrainedFrozen) => {
                let path = f.ema_checkpoint.as_deref().expect("validated");
                let ckpt = Checkpoint::load(Path::new(path))?;
                Some(read_layout(&ckpt, "model.", &model.layout)?)
            }
            _ => None,
        };
        let mut layout = model.layout.clone();
        if let Some(l) = aux.layout() {
            layout.append("aux.", l);
        }
        let decay = layout.decay_mask();
        Ok(Self {
            mask: AttnMask::causal(n + 1),
            encoder: if f.mode == ForesightMode::ImplicitEncoder { encoder } else { None },
            cfg,
            model,
            aux,
            frozen_ema,
            layout,
            decay,
            pairs,
            mtp_nbhd,
        })
    }

    /// Builds a trainer, loading or pretraining the encoder when needed.
    pub fn prepare(cfg: RunConfig) -> Result<Self> {
        let encoder = if cfg.foresight.mode == ForesightMode::ImplicitEncoder {
            Some(match &cfg.foresight.encoder_checkpoint {
                Some(path) => BidirEncoder::from_checkpoint(&Checkpoint::load(Path::new(path))?)?,
                None => {
                    let (train, _) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;
                    pretrain_bidir_encoder(&cfg.foresight.encoder, &train, cfg.model.vocab_size)?.0
                }
            })
        } else {
            None
        };
        Self::new(cfg, encoder)
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_trainable(&self) -> usize {
        self.layout.len()
    }

    pub fn init_state(&self) -> ArState {
        let seed = self.cfg.train.seed;
        let std = self.cfg.model.init_std;
        let mut params: Vec<f32> = self.model.init(seed);
        let backbone_len = params.len();
        match &self.aux {
            AuxHeads::None => {}
            AuxHeads::Mtp(h) => params.extend(h.layout.init::<f32>(std, &mut rng::stream(seed, &[0x3770]))),
            AuxHeads::Projection(h) => params.extend(h.init::<f32>(seed, std)),
        }
        let ema = (self.cfg.foresight.mode == ForesightMode::ExplicitEma)
            .then(|| self.frozen_ema.clone().unwrap_or_else(|| params[..backbone_len].to_vec()));
        ArState {
            opt: AdamW::new(params.len()),
            params,
            backbone_len,
            ema,
            step: 0,
            rng: rng::stream(seed, &[0xD409]),
        }
    }

    /// Weight of the foresight term at `step`, or `None` when the term is off.
    pub fn lambda_for_step(&self, step: usize) -> Option<f64> {
        let f = &self.cfg.foresight;
        let total = self.cfg.train.total_steps;
        if f.mode == ForesightMode::None || step < f.warmup_steps(total) {
            return None;
        }
        let lambda = lambda_at(&f.lambda, step as f64 / total as f64);
        (lambda != 0.0).then_some(lambda)
    }

    /// Mean batch loss and its gradient. Dropout is active when `rng` is given.
    /// Targets (EMA states, encoder features) are constants of this function.
    pub fn loss_and_grad<T: Real>(
        &self,
        params: &[T],
        ema: Option<&[T]>,
        batch: &[TokenGrid],
        lambda: Option<f64>,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<LossGrad<T>> {
        ensure_domain!(!batch.is_empty(), "empty batch");
        ensure_domain!(params.len() == self.layout.len(), "parameter buffer does not match the trainer layout");
        let nb = self.model.num_params();
        let (p_bb, p_aux) = params.split_at(nb);
        let mut grad = vec![T::zero(); params.len()];
        let inv_b = 1.0 / batch.len() as f64;
        let (mut ntp_sum, mut fs_sum) = (0.0, 0.0);
        for grid in batch {
            let fwd = self.model.forward(p_bb, grid, &self.mask, rng.as_deref_mut())?;
            let (ntp, mut d_logits) = ntp_loss_grad(&fwd.out.logits, &grid.tokens, self.cfg.model.vocab_size)?;
            ntp_sum += ntp;
            let sb = T::c(inv_b);
            d_logits.iter_mut().for_each(|v| *v *= sb);
            let (g_bb, g_aux) = grad.split_at_mut(nb);
            let mut d_hidden_l = None;
            let mut d_hidden_final = None;
            if let Some(lambda) = lambda {
                let w = lambda * inv_b;
                match &self.aux {
                    AuxHeads::None => {}
                    AuxHeads::Mtp(heads) => {
                        let mut gh = vec![T::zero(); p_aux.len()];
                        let (loss, mut dh) =
                            mtp_loss(heads, p_aux, &fwd.out.hidden_final, grid, &self.mtp_nbhd, Some(&mut gh))?;
                        fs_sum += loss;
                        let wt = T::c(w);
                        for (a, b) in g_aux.iter_mut().zip(&gh) {
                            *a += *b * wt;
                        }
                        dh.iter_mut().for_each(|v| *v *= wt);
                        d_hidden_final = Some(dh);
                    }
                    AuxHeads::Projection(heads) => {
                        let targets: Vec<T> = match self.cfg.foresight.mode {
                            ForesightMode::ExplicitEma => {
                                let ema = ema.ok_or_else(|| Error::domain("explicit foresight needs EMA parameters"))?;
                                explicit_targets(&self.model, ema, grid)?
                            }
                            _ => {
                                let enc = self.encoder.as_ref().expect("checked at construction");
                                implicit_targets(enc, grid, enc.mask())?
                            }
                        };
                        let (loss, dh) = foresight_loss(heads, p_aux, &fwd.out.hidden_l, &targets, &self.pairs, w, g_aux)?;
                        fs_sum += loss;
                        d_hidden_l = Some(dh);
                    }
                }
            }
            self.model
                .backward(p_bb, &fwd, Some(&d_logits), d_hidden_l.as_deref(), d_hidden_final.as_deref(), g_bb);
        }
        Ok(LossGrad {
            ntp: ntp_sum * inv_b,
            foresight: lambda.map(|_| fs_sum * inv_b),
            grad,
        })
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&self, state: &mut ArState, batch: &[TokenGrid]) -> Result<StepMetrics> {
        let t0 = Instant::now();
        let step = state.step as usize;
        let lambda = self.lambda_for_step(step);
        let LossGrad { ntp, foresight, mut grad } =
            self.loss_and_grad(&state.params, state.ema.as_deref(), batch, lambda, Some(&mut state.rng))?;
        let total = match (lambda, foresight) {
            (Some(l), Some(f)) => ntp + l * f,
            _ => ntp,
        };
        if !total.is_finite() {
            return Err(Error::numeric(format!("non-finite loss at step {}", step + 1)));
        }
        let grad_norm = clip_global_norm(&mut grad, self.cfg.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient norm at step {}", step + 1)));
        }
        let hp = self.cfg.train.adam();
        state.opt.step(&mut state.params, &grad, &self.decay, &hp, self.cfg.train.lr_at(step));
        let f = &self.cfg.foresight;
        if let Some(ema) = state.ema.as_mut() {
            if f.ema_source == EmaSource::Online {
                ema_update(ema, &state.params[..state.backbone_len], f.tau)?;
            }
        }
        state.step += 1;
        let wall_ms = if self.cfg.train.record_wall_time {
            t0.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(StepMetrics {
            step: state.step,
            ntp_loss: ntp,
            foresight_loss: foresight,
            lambda: lambda.unwrap_or(0.0),
            total_loss: total,
            grad_norm_preclip: grad_norm,
            wall_ms,
        })
    }

    /// Training indices for `step`: an epoch-wise permutation of the training
    /// split drawn from a counter-based stream.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let t = &self.cfg.train;
        let n = t.n_train as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..t.batch_size as u64)
            .map(|j| {
                let g = step * t.batch_size as u64 + j;
                let epoch = g / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..t.n_train).collect();
                    perm.shuffle(&mut rng::stream(t.seed, &[0xBA7C, epoch]));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().unwrap().1[(g % n) as usize]
            })
            .collect()
    }

    pub fn batch(&self, train: &SampleStream, step: u64) -> Vec<TokenGrid> {
        self.batch_indices(step).into_iter().map(|i| train.get(i)).collect()
    }

    /// Runs updates until `state.step == until`, calling `on_step` after each.
    pub fn train_until(
        &self,
        state: &mut ArState,
        train: &SampleStream,
        until: u64,
        mut on_step: impl FnMut(&ArState, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while state.step < until {
            let batch = self.batch(train, state.step);
            let m = self.train_step(state, &batch)?;
            on_step(state, &m)?;
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, state: &ArState) -> Checkpoint {
        let mut tensors = layout_tensors("", &self.layout, &state.params)
            .into_iter()
            .map(|mut t| {
                if !t.name.starts_with("aux.") {
                    t.name = format!("model.{}", t.name);
                }
                t
            })
            .collect::<Vec<_>>();
        tensors.push(NamedTensor::new("adam.m", &[state.opt.m.len()], state.opt.m.clone()));
        tensors.push(NamedTensor::new("adam.v", &[state.opt.v.len()], state.opt.v.clone()));
        if let Some(ema) = &state.ema {
            tensors.extend(layout_tensors("ema.", &self.model.layout, ema));
        }
        if let Some(enc) = &self.encoder {
            tensors.extend(enc.to_checkpoint().tensors);
        }
        Checkpoint {
            component: Component::Ar,
            config: self.cfg.to_toml(),
            tensors,
            rng: RngState::capture(&state.rng),
            step: state.step,
        }
    }

    pub fn restore(&self, ckpt: &Checkpoint) -> Result<ArState> {
        if ckpt.component != Component::Ar {
            return Err(Error::Format("checkpoint does not hold an AR model".into()));
        }
        let mut params = read_layout(ckpt, "model.", &self.model.layout)?;
        let backbone_len = params.len();
        if let Some(l) = self.aux.layout() {
            params.extend(read_layout(ckpt, "aux.", l)?);
        }
        let flat = |name: &str| -> Result<Vec<f32>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.data.len() != params.len() {
                return Err(Error::Format(format!("tensor {name} does not match the parameter count")));
            }
            Ok(t.data.clone())
        };
        let opt = AdamW {
            m: flat("adam.m")?,
            v: flat("adam.v")?,
            t: ckpt.step,
        };
        let ema = if self.cfg.foresight.mode == ForesightMode::ExplicitEma {
            Some(read_layout(ckpt, "ema.", &self.model.layout)?)
        } else {
            None
        };
        Ok(ArState {
            params,
            backbone_len,
            opt,
            ema,
            step: ckpt.step,
            rng: ckpt.rng.restore(),
        })
    }
}

/// Backbone parameters of an AR checkpoint, ignoring every training-only tensor.
pub fn load_backbone(ckpt: &Checkpoint, model: &ArModel) -> Result<Vec<f32>> {
    if ckpt.component != Component::Ar {
        return Err(Error::Format("checkpoint does not hold an AR model".into()));
    }
    read_layout(ckpt, "model.", &model.layout)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub state: ArState,
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<StepMetrics>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt_{step:07}.ckpt"))
}

/// Full run with artifacts in `out_dir`: `metrics.csv`, a checkpoint every
/// `eval_every` steps and `final.ckpt`. With `resume`, training continues from
/// that checkpoint and the metrics log is cut back to its step.
pub fn run_training(cfg: &RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let resumed = resume.map(Checkpoint::load).transpose()?;
    let trainer = match &resumed {
        Some(ckpt) if cfg.foresight.mode == ForesightMode::ImplicitEncoder && ckpt.tensors.iter().any(|t| t.name.starts_with("encoder.")) => {
            let enc_ckpt = Checkpoint {
                component: Component::Bidir,
                config: encoder_header(cfg),
                tensors: ckpt.tensors.iter().filter(|t| t.name.starts_with("encoder.")).cloned().collect(),
                rng: ckpt.rng,
                step: 0,
            };
            Trainer::new(cfg.clone(), Some(BidirEncoder::from_checkpoint(&enc_ckpt)?))?
        }
        _ => Trainer::prepare(cfg.clone())?,
    };
    let mut state = match &resumed {
        Some(ckpt) => trainer.restore(ckpt)?,
        None => trainer.init_state(),
    };
    let (train, _) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;

    let metrics_path = out_dir.join("metrics.csv");
    let kept = if resumed.is_some() {
        read_metrics_prefix(&metrics_path, state.step)?
    } else {
        Vec::new()
    };
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(csv, "{METRICS_HEADER}").map_err(io)?;
    for line in &kept {
        writeln!(csv, "{line}").map_err(io)?;
    }

    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);
    let mut metrics = Vec::new();
    let total = cfg.train.total_steps as u64;
    while state.step < total {
        let batch = trainer.batch(&train, state.step);
        let m = match trainer.train_step(&mut state, &batch) {
            Ok(m) => m,
            Err(Error::Numeric(msg)) => {
                csv.flush().map_err(io)?;
                let at = last_good
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(Error::Numeric(format!("{msg}; last good checkpoint: {at}")));
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", m.csv_row()).map_err(io)?;
        metrics.push(m);
        if state.step % cfg.train.eval_every as u64 == 0 {
            csv.flush().map_err(io)?;
            let path = checkpoint_path(out_dir, state.step);
            trainer.to_checkpoint(&state).save(&path)?;
            last_good = Some(path);
        }
    }
    csv.flush().map_err(io)?;
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.to_checkpoint(&state).save(&final_checkpoint)?;
    Ok(TrainOutcome {
        trainer,
        state,
        final_checkpoint,
        metrics,
    })
}

fn encoder_header(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Header<'a> {
        vocab_size: usize,
        seq_len: usize,
        encoder: &'a EncoderConfig,
    }
    toml::to_string(&Header {
        vocab_size: cfg.model.vocab_size,
        seq_len: cfg.model.seq_len(),
        encoder: &cfg.foresight.encoder,
    })
    .expect("encoder header serializes")
}

fn read_metrics_prefix(path: &Path, upto: u64) -> Result<Vec<String>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines().skip(1) {
        let line = line.map_err(|e| Error::io(path, e))?;
        let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
        if step <= upto {
            kept.push(line);
        }
    }
    Ok(kept)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub mode: ForesightMode,
    pub params_checked: usize,
    pub max_rel_err: f64,
    /// EMA or encoder parameters left bit-identical by the gradient pass.
    pub frozen_untouched: bool,
    pub loss: f64,
}

/// Run configuration of the gradient-check model for `mode`.
pub fn grad_check_config(mode: ForesightMode, head_kind: HeadKind) -> RunConfig {
    // the corpus section is unused: grad checks draw uniform random grids
    let model = ModelConfig::micro();
    let base = ForesightConfig {
        warmup_fraction: 0.0,
        head_kind,
        head_hidden: 6,
        ..ForesightConfig::default()
    };
    let foresight = match mode {
        ForesightMode::None => ForesightConfig::none(),
        ForesightMode::OutputMtp => ForesightConfig {
            mode,
            k: 2,
            lambda: ScheduleSpec::constant(0.7),
            ..base
        },
        ForesightMode::ExplicitEma => ForesightConfig {
            mode,
            k: 3,
            lambda: ScheduleSpec::constant(1.5),
            ..base
        },
        ForesightMode::ImplicitEncoder => ForesightConfig {
            mode,
            k: 1,
            lambda: ScheduleSpec::constant(2.0),
            encoder: EncoderConfig {
                layers: 1,
                d_model: 6,
                n_heads: 2,
                ..EncoderConfig::default()
            },
            ..base
        },
    };
    RunConfig {
        model,
        foresight,
        train: TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

/// Five-point central differences with step `h` on every trainable parameter
/// of the micro model against the analytic gradient of the total loss, in f64.
pub fn grad_check(mode: ForesightMode, head_kind: HeadKind, seed: u64, h: f64) -> Result<GradCheckReport> {
    ensure_domain!(h > 0.0, "finite-difference step must be positive");
    let cfg = grad_check_config(mode, head_kind);
    let encoder = (mode == ForesightMode::ImplicitEncoder)
        .then(|| BidirEncoder::random(cfg.foresight.encoder.clone(), cfg.model.vocab_size, cfg.model.seq_len()))
        .transpose()?;
    let trainer = Trainer::new(cfg.clone(), encoder)?;
    let state = trainer.init_state();
    let params: Vec<f64> = cast_vec(&state.params);
    // targets come from parameters distinct from θ, so a leaked target
    // gradient would show up as a mismatch
    let mut r = rng::stream(seed, &[0x6C]);
    let ema: Option<Vec<f64>> = state
        .ema
        .as_ref()
        .map(|e| e.iter().map(|&v| v as f64 + 0.05 * rng::normal(&mut r)).collect());
    let batch: Vec<TokenGrid> = (0..cfg.train.batch_size)
        .map(|b| TokenGrid {
            class_label: b % (cfg.model.num_classes + 1),
            tokens: (0..cfg.model.seq_len())
                .map(|_| (rng::unit(&mut r) * cfg.model.vocab_size as f64) as u16)
                .collect(),
        })
        .collect();
    let lambda = trainer.lambda_for_step(0);
    let total = |p: &[f64]| -> Result<f64> {
        let lg = trainer.loss_and_grad(p, ema.as_deref(), &batch, lambda, None)?;
        Ok(lg.ntp + lambda.unwrap_or(0.0) * lg.foresight.unwrap_or(0.0))
    };
    let ema_before = ema.clone();
    let enc_before = trainer.encoder.as_ref().map(|e| e.params().to_vec());
    let analytic = trainer.loss_and_grad(&params, ema.as_deref(), &batch, lambda, None)?;
    let loss = analytic.ntp + lambda.unwrap_or(0.0) * analytic.foresight.unwrap_or(0.0);
    let mut p = params.clone();
    let mut max_rel = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        let mut at = |x: f64| -> Result<f64> {
            p[i] = x;
            total(&p)
        };
        let (u1, d1, u2, d2) = (at(orig + h)?, at(orig - h)?, at(orig + 2.0 * h)?, at(orig - 2.0 * h)?);
        p[i] = orig;
        let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * h);
        let a = analytic.grad[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    let frozen_untouched = ema == ema_before && trainer.encoder.as_ref().map(|e| e.params().to_vec()) == enc_before;
    Ok(GradCheckReport {
        mode,
        params_checked: p.len(),
        max_rel_err: max_rel,
        frozen_untouched,
        loss,
    })
}
