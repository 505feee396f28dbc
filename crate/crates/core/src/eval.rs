//! Evaluation: validation loss, sample coherence, hidden-state smoothness,
//! block-size and λ sweeps, convergence comparison, FLOPs accounting, and
//! CSV / SVG report writers.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ntp_loss, ArModel, ModelConfig};
use crate::config::RunConfig;
use crate::corpus::{coherence_score, make_splits, CorpusConfig, TokenGrid};
use crate::error::{ensure_domain, Error, Result};
use crate::alignment::{ForesightConfig, ForesightMode, HeadKind};
use crate::geometry::AttnMask;
use crate::real::Real;
use crate::rng::{self, StreamRng};
use crate::sampler::{sample_grid_with, SampleParams};
use crate::trainer::{ArState, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Grids sampled per coherence estimate.
    pub coherence_samples: usize,
    pub coherence_threshold: f64,
    /// Validation grids used for loss and smoothness.
    pub val_samples: usize,
    /// Encoder block sizes for the block sweep; empty selects {1, 4, 16, 64, N}.
    pub block_sizes: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            coherence_samples: 64,
            coherence_threshold: 0.9,
            val_samples: 64,
            block_sizes: Vec::new(),
            lambda_values: vec![0.0, 0.5, 1.0, 2.0, 4.0],
            seeds: vec![0, 1, 2],
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn block_sizes_for(&self, n: usize) -> Vec<usize> {
        let mut b = if self.block_sizes.is_empty() {
            vec![1, 4, 16, 64, n]
        } else {
            self.block_sizes.clone()
        };
        b.retain(|&x| x >= 1 && x <= n);
        b.sort_unstable();
        b.dedup();
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub val_ntp: f64,
    pub coherence_rate: f64,
    pub smoothness_gap: f64,
    pub samples_used: usize,
}

/// Mean next-token loss over `grids` with dropout disabled.
pub fn eval_validation(model: &ArModel, params: &[f32], grids: &[TokenGrid]) -> Result<f64> {
    ensure_domain!(!grids.is_empty(), "empty validation set");
    let mask = AttnMask::causal(model.cfg.seq_len() + 1);
    let mut total = 0.0;
    for g in grids {
        let f = model.forward(params, g, &mask, None)?;
        total += ntp_loss(&f.out, g, model.cfg.vocab_size)?;
    }
    Ok(total / grids.len() as f64)
}

/// Mean coherence of `n_samples` sampled grids, classes cycled in order.
pub fn eval_coherence(
    model: &ArModel,
    params: &[f32],
    sp: &SampleParams,
    n_samples: usize,
    corpus: &CorpusConfig,
    seed: u64,
) -> Result<f64> {
    ensure_domain!(n_samples >= 1, "need at least one sample");
    let mut total = 0.0;
    for i in 0..n_samples {
        let class = i % corpus.num_classes;
        let mut r = rng::stream(seed, &[0xC0E, i as u64]);
        let g = sample_grid_with(model, params, class, sp, &mut r)?;
        total += coherence_score(&g, corpus).score;
    }
    Ok(total / n_samples as f64)
}

/// Mean coherence of uniformly random grids: the chance level of the metric.
pub fn chance_coherence(corpus: &CorpusConfig, n: usize, seed: u64) -> f64 {
    let mut r = rng::stream(seed, &[0xC4A]);
    let len = corpus.height * corpus.width;
    let mut total = 0.0;
    for i in 0..n {
        let g = TokenGrid {
            class_label: i % corpus.num_classes,
            tokens: (0..len).map(|_| r.gen_range(0..corpus.vocab_size) as u16).collect(),
        };
        total += coherence_score(&g, corpus).score;
    }
    total / n as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// Mean cosine over 4-adjacent position pairs minus mean cosine over an
/// equal number of uniformly drawn distinct position pairs, for one grid of
/// `height × width` rows of width `dim`.
pub fn smoothness_gap_rows(rows: &[f64], height: usize, width: usize, dim: usize, rng: &mut StreamRng) -> Result<f64> {
    let n = height * width;
    ensure_domain!(n >= 2 && rows.len() == n * dim, "rows do not match a {height}x{width} grid of width {dim}");
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];
    let mut adjacent = Vec::new();
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c + 1 < width {
                adjacent.push((i, i + 1));
            }
            if r + 1 < height {
                adjacent.push((i, i + width));
            }
        }
    }
    ensure_domain!(!adjacent.is_empty(), "grid has no adjacent pairs");
    let adj: f64 = adjacent.iter().map(|&(i, j)| cosine(row(i), row(j))).sum::<f64>() / adjacent.len() as f64;
    let mut rand_sum = 0.0;
    for _ in 0..adjacent.len() {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        rand_sum += cosine(row(i), row(j));
    }
    Ok(adj - rand_sum / adjacent.len() as f64)
}

/// Average smoothness gap of the layer-`l` states over `grids`.
pub fn smoothness_gap(model: &ArModel, params: &[f32], grids: &[TokenGrid], seed: u64) -> Result<f64> {
    ensure_domain!(!grids.is_empty(), "need at least one grid");
    let cfg = &model.cfg;
    let mut total = 0.0;
    for (k, g) in grids.iter().enumerate() {
        let h: Vec<f64> = model
            .forward_prefix(params, g, cfg.align_layer)?
            .iter()
            .map(|v| v.f64())
            .collect();
        let mut r = rng::stream(seed, &[0x5300, k as u64]);
        total += smoothness_gap_rows(&h, cfg.height, cfg.width, cfg.d_model, &mut r)?;
    }
    Ok(total / grids.len() as f64)
}

/// Validation loss, coherence and smoothness of a trained state.
pub fn evaluate(trainer: &Trainer, state: &ArState) -> Result<EvalReport> {
    let cfg = &trainer.cfg;
    let (_, val) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;
    let grids: Vec<TokenGrid> = val.iter().take(cfg.eval.val_samples.max(1)).collect();
    let params = state.backbone();
    Ok(EvalReport {
        val_ntp: eval_validation(&trainer.model, params, &grids)?,
        coherence_rate: eval_coherence(
            &trainer.model,
            params,
            &cfg.sample,
            cfg.eval.coherence_samples,
            &cfg.corpus,
            cfg.eval.seed,
        )?,
        smoothness_gap: smoothness_gap(&trainer.model, params, &grids, cfg.eval.seed)?,
        samples_used: grids.len(),
    })
}

/// One measurement of a sweep: the swept value, the seed, and the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub x: f64,
    pub seed: u64,
    pub val_ntp: f64,
    pub coherence: f64,
    pub smoothness: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub x_name: String,
    pub rows: Vec<SweepRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl SweepResult {
    /// Distinct x values in increasing order.
    pub fn xs(&self) -> Vec<f64> {
        let mut xs: Vec<f64> = self.rows.iter().map(|r| r.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        xs
    }

    /// `(x, median val_ntp, median coherence, median smoothness)` per x.
    pub fn medians(&self) -> Vec<(f64, f64, f64, f64)> {
        self.xs()
            .into_iter()
            .map(|x| {
                let sel: Vec<&SweepRow> = self.rows.iter().filter(|r| r.x == x).collect();
                let m = |f: fn(&SweepRow) -> f64| median(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                (x, m(|r| r.val_ntp), m(|r| r.coherence), m(|r| r.smoothness))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},seed,val_ntp,coherence,smoothness\n", self.x_name);
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.x, r.seed, r.val_ntp, r.coherence, r.smoothness);
        }
        s
    }
}

fn train_and_eval(cfg: RunConfig) -> Result<EvalReport> {
    let trainer = Trainer::prepare(cfg)?;
    let (train, _) = make_splits(&trainer.cfg.corpus, trainer.cfg.train.n_train, trainer.cfg.train.n_val)?;
    let mut state = trainer.init_state();
    trainer.train_until(&mut state, &train, trainer.cfg.train.total_steps as u64, |_, _| Ok(()))?;
    evaluate(&trainer, &state)
}

fn with_seed(base: &RunConfig, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.seed = seed;
    cfg.foresight.encoder.seed = seed;
    cfg.eval.seed = seed;
    cfg
}

/// Implicit-foresight runs whose encoder is pretrained under a block-causal
/// mask of each block size, one row per (block size, seed), sorted by size.
pub fn block_sweep(base: &RunConfig, block_sizes: &[usize], seeds: &[u64], budget_steps: usize) -> Result<SweepResult> {
    let n = base.model.seq_len();
    ensure_domain!(
        block_sizes.iter().all(|&b| b >= 1 && b <= n),
        "block sizes must lie in [1, {n}]"
    );
    let mut sizes = block_sizes.to_vec();
    sizes.sort_unstable();
    sizes.dedup();
    let mut rows = Vec::new();
    for &b in &sizes {
        for &seed in seeds {
            let mut cfg = with_seed(base, seed);
            cfg.foresight.mode = ForesightMode::ImplicitEncoder;
            cfg.foresight.k = 1;
            cfg.foresight.encoder.block_size = b;
            cfg.foresight.encoder_checkpoint = None;
            cfg.train.total_steps = budget_steps;
            let r = train_and_eval(cfg)?;
            rows.push(SweepRow {
                x: b as f64,
                seed,
                val_ntp: r.val_ntp,
                coherence: r.coherence_rate,
                smoothness: r.smoothness_gap,
            });
        }
    }
    Ok(SweepResult {
        x_name: "block_size".into(),
        rows,
    })
}

/// Constant-λ runs of the configured foresight mode, one row per (λ, seed).
pub fn lambda_sweep(base: &RunConfig, lambdas: &[f64], seeds: &[u64], budget_steps: usize) -> Result<SweepResult> {
    ensure_domain!(base.foresight.mode != ForesightMode::None, "λ sweep needs a foresight mode");
    let mut values = lambdas.to_vec();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut rows = Vec::new();
    for &lambda in &values {
        for &seed in seeds {
            let mut cfg = with_seed(base, seed);
            cfg.foresight.lambda = crate::alignment::ScheduleSpec::constant(lambda);
            cfg.train.total_steps = budget_steps;
            let r = train_and_eval(cfg)?;
            rows.push(SweepRow {
                x: lambda,
                seed,
                val_ntp: r.val_ntp,
                coherence: r.coherence_rate,
                smoothness: r.smoothness_gap,
            });
        }
    }
    Ok(SweepResult {
        x_name: "lambda".into(),
        rows,
    })
}

#[derive(Clone, Debug)]
pub struct ConvergenceResult {
    pub name: String,
    /// First evaluated step whose coherence reached the threshold.
    pub crossing: Option<u64>,
    /// `(step, coherence)` at every evaluation.
    pub curve: Vec<(u64, f64)>,
    pub final_state: ArState,
}

/// Trains one configuration, evaluating coherence every `eval_every` steps,
/// and stops at the first crossing of `threshold` or after `max_steps`.
pub fn convergence_run(name: &str, cfg: &RunConfig, threshold: f64, max_steps: u64, stop_at_crossing: bool) -> Result<ConvergenceResult> {
    let trainer = Trainer::prepare(cfg.clone())?;
    let (train, _) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;
    let mut state = trainer.init_state();
    let every = cfg.train.eval_every as u64;
    let mut curve = Vec::new();
    let mut crossing = None;
    while state.step < max_steps {
        let until = (state.step + every).min(max_steps);
        trainer.train_until(&mut state, &train, until, |_, _| Ok(()))?;
        let c = eval_coherence(
            &trainer.model,
            state.backbone(),
            &cfg.sample,
            cfg.eval.coherence_samples,
            &cfg.corpus,
            cfg.eval.seed,
        )?;
        curve.push((state.step, c));
        if crossing.is_none() && c >= threshold {
            crossing = Some(state.step);
            if stop_at_crossing {
                break;
            }
        }
    }
    Ok(ConvergenceResult {
        name: name.to_string(),
        crossing,
        curve,
        final_state: state,
    })
}

/// Steps to reach `threshold` coherence for each named configuration.
pub fn convergence_compare(configs: &[(String, RunConfig)], threshold: f64, max_steps: u64) -> Result<Vec<ConvergenceResult>> {
    ensure_domain!(threshold > 0.0 && threshold < 1.0, "threshold must lie in (0, 1)");
    configs
        .iter()
        .map(|(name, cfg)| convergence_run(name, cfg, threshold, max_steps, false))
        .collect()
}

pub fn convergence_csv(results: &[ConvergenceResult]) -> String {
    let mut s = String::from("config,step,coherence\n");
    for r in results {
        for (step, c) in &r.curve {
            let _ = writeln!(s, "{},{},{}", r.name, step, c);
        }
    }
    s
}

/// How the implicit encoder's forward pass is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderCost {
    /// Features computed once per image and reused across epochs.
    Cached,
    /// Encoder forward run on every training sample.
    Online,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopsReport {
    pub baseline: f64,
    pub extra: f64,
    pub total: f64,
    pub overhead_pct: f64,
}

/// Dense-matmul FLOPs of one pre-norm transformer layer forward over `t` rows.
pub fn layer_flops(t: f64, d: f64) -> f64 {
    2.0 * t * 12.0 * d * d + 4.0 * t * t * d
}

/// Forward FLOPs of the backbone (all layers plus the output head).
pub fn backbone_forward_flops(m: &ModelConfig) -> f64 {
    let n = m.seq_len() as f64;
    let d = m.d_model as f64;
    m.layers as f64 * layer_flops(n + 1.0, d) + 2.0 * n * d * m.vocab_size as f64
}

fn head_forward_flops(f: &ForesightConfig, rows: f64, d_in: f64, d_out: f64) -> f64 {
    let h = f.head_hidden as f64;
    match f.head_kind {
        HeadKind::Mlp => 2.0 * rows * (d_in * h + h * h + h * d_out),
        HeadKind::TransformerBlock => layer_flops(rows, d_in) + 2.0 * rows * d_in * d_out,
    }
}

/// Per-sample training FLOPs counting dense matrix multiplications only;
/// backward passes cost twice their forward.
pub fn flops_estimate(m: &ModelConfig, f: &ForesightConfig, encoder_cost: EncoderCost) -> FlopsReport {
    let n = m.seq_len() as f64;
    let d = m.d_model as f64;
    let baseline = 3.0 * backbone_forward_flops(m);
    let extra = match f.mode {
        ForesightMode::None => 0.0,
        ForesightMode::OutputMtp => f.k as f64 * 3.0 * 2.0 * n * d * m.vocab_size as f64,
        ForesightMode::ExplicitEma => {
            let ema = m.align_layer as f64 * layer_flops(n + 1.0, d);
            ema + f.k as f64 * 3.0 * head_forward_flops(f, n, d, d)
        }
        ForesightMode::ImplicitEncoder => {
            let c = f.encoder.d_model as f64;
            let enc = match encoder_cost {
                EncoderCost::Cached => 0.0,
                EncoderCost::Online => f.encoder.layers as f64 * layer_flops(n, c),
            };
            enc + 3.0 * head_forward_flops(f, n, d, c)
        }
    };
    FlopsReport {
        baseline,
        extra,
        total: baseline + extra,
        overhead_pct: 100.0 * extra / baseline,
    }
}

/// Matmul FLOPs of one guided sampling run: each of the `N` steps feeds one
/// slot through every layer against the cached prefix, once per guidance
/// branch. Depends only on the backbone configuration.
pub fn sampling_flops(m: &ModelConfig, sp: &SampleParams) -> f64 {
    let d = m.d_model as f64;
    let branches = if sp.cfg_scale != 1.0 { 2.0 } else { 1.0 };
    let n = m.seq_len();
    let mut total = 0.0;
    // slot s attends to s + 1 cached slots; slot N is never fed
    for s in 0..n {
        let ctx = (s + 1) as f64;
        total += m.layers as f64 * (2.0 * 12.0 * d * d + 4.0 * ctx * d) + 2.0 * d * m.vocab_size as f64;
    }
    branches * total
}

/// The reference scale used for FLOPs comparisons: 12 layers, width 768,
/// 16×16 tokens, a 16384-token codebook, 1000 classes; explicit foresight
/// aligns at layer 8 with three MLP heads, implicit foresight uses a
/// 768-wide encoder; heads have hidden width 2048.
pub fn reference_flops_configs() -> (ModelConfig, ForesightConfig, ForesightConfig) {
    let model = ModelConfig {
        layers: 12,
        d_model: 768,
        n_heads: 12,
        vocab_size: 16384,
        height: 16,
        width: 16,
        num_classes: 1000,
        align_layer: 8,
        ..ModelConfig::default()
    };
    let mut implicit = ForesightConfig::implicit();
    implicit.head_hidden = 2048;
    implicit.encoder.d_model = 768;
    implicit.encoder.layers = 12;
    implicit.encoder.n_heads = 12;
    let mut explicit = ForesightConfig::explicit();
    explicit.head_hidden = 2048;
    (model, implicit, explicit)
}

/// Standalone SVG line chart with labeled axes.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, esc(title));
    let _ = writeln!(s, r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - B, W - R, H - B);
    let _ = writeln!(s, r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#, H - B);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, px(fx), H - B + 16.0, tick(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#, L - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 12.0, esc(x_label));
    let _ = writeln!(s, r#"<text x="18" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#, (T + H - B) / 2.0, (T + H - B) / 2.0, esc(y_label));
    for (k, (name, points)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" "));
        let ly = T + 16.0 * k as f64 + 8.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, W - R + 10.0, W - R + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text>"#, W - R + 36.0, ly + 4.0, esc(name));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
