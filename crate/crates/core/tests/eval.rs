use foresight::alignment::EncoderConfig;
use foresight::eval::{
    backbone_forward_flops, block_sweep, chance_coherence, eval_coherence, eval_validation, flops_estimate,
    line_chart_svg, median, reference_flops_configs, smoothness_gap, smoothness_gap_rows, EncoderCost,
};
use foresight::corpus::coherence_score;
use foresight::rng;
use foresight::{ArModel, CorpusConfig, ForesightConfig, ModelConfig, RunConfig, SampleParams, TokenGrid};

fn gaussian(seed: u64, len: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[]);
    (0..len).map(|_| rng::normal(&mut r)).collect()
}

/// Adjacent pairs on an `h × w` grid, counted independently of the library.
fn adjacent_pairs(h: usize, w: usize) -> usize {
    h * (w - 1) + w * (h - 1)
}

#[test]
fn identical_rows_have_zero_gap() {
    let row = gaussian(1, 8);
    let rows: Vec<f64> = (0..16).flat_map(|_| row.clone()).collect();
    let gap = smoothness_gap_rows(&rows, 4, 4, 8, &mut rng::stream(0, &[])).unwrap();
    assert!(gap.abs() < 1e-12, "{gap}");
}

#[test]
fn isotropic_null_is_centred_at_zero() {
    // 50 grids of 10x10 give 50 · 180 = 9000 adjacent and 9000 random pairs.
    let (h, w, d) = (10, 10, 16);
    let grids = 50;
    let pairs = grids * adjacent_pairs(h, w);
    let mut total = 0.0;
    for k in 0..grids {
        let rows = gaussian(100 + k as u64, h * w * d);
        total += smoothness_gap_rows(&rows, h, w, d, &mut rng::stream(7, &[k as u64])).unwrap();
    }
    let gap = total / grids as f64;
    // Each cosine of independent isotropic vectors has variance 1/d; the gap
    // differences two independent means of `pairs` such terms.
    let se = (2.0 / (d as f64 * pairs as f64)).sqrt();
    assert!(gap.abs() < 3.0 * se, "gap {gap}, se {se}");
}

#[test]
fn smooth_field_has_positive_gap() {
    // h_n = (cos θ, sin θ, cos 2φ, sin 2φ) with angles linear in the grid coordinates.
    let (h, w) = (8, 8);
    let rows: Vec<f64> = (0..h * w)
        .flat_map(|n| {
            let (r, c) = ((n / w) as f64, (n % w) as f64);
            let (a, b) = (0.3 * r, 0.3 * c);
            [a.cos(), a.sin(), b.cos(), b.sin()]
        })
        .collect();
    let gap = smoothness_gap_rows(&rows, h, w, 4, &mut rng::stream(0, &[])).unwrap();
    assert!(gap > 0.1, "{gap}");
}

#[test]
fn gap_is_invariant_under_orthogonal_maps() {
    let d = 6;
    // Random orthogonal matrix from Gram-Schmidt on Gaussian columns.
    let mut q = gaussian(11, d * d);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| q[i * d + k] * q[j * d + k]).sum();
            for k in 0..d {
                q[i * d + k] -= dot * q[j * d + k];
            }
        }
        let norm: f64 = (0..d).map(|k| q[i * d + k].powi(2)).sum::<f64>().sqrt();
        (0..d).for_each(|k| q[i * d + k] /= norm);
    }
    let rows = gaussian(12, 5 * 7 * d);
    let rotated: Vec<f64> = rows
        .chunks(d)
        .flat_map(|x| (0..d).map(|i| (0..d).map(|k| q[i * d + k] * x[k]).sum::<f64>()).collect::<Vec<_>>())
        .collect();
    let a = smoothness_gap_rows(&rows, 5, 7, d, &mut rng::stream(3, &[])).unwrap();
    let b = smoothness_gap_rows(&rotated, 5, 7, d, &mut rng::stream(3, &[])).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    assert!(smoothness_gap_rows(&rows, 5, 6, d, &mut rng::stream(3, &[])).is_err());
}

fn small_model() -> ArModel {
    ArModel::new(ModelConfig {
        layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 64,
        height: 4,
        width: 4,
        num_classes: 8,
        align_layer: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn validation_and_coherence_are_deterministic() {
    let model = small_model();
    let zero = vec![0.0f32; model.num_params()];
    let corpus = CorpusConfig { height: 4, width: 4, ..CorpusConfig::default() };
    let grids: Vec<TokenGrid> = (0..4)
        .map(|i| TokenGrid { class_label: i, tokens: (0..16).map(|t| (t * 3 + i) as u16).collect() })
        .collect();
    let v = eval_validation(&model, &zero, &grids).unwrap();
    assert!((v - 64f64.ln()).abs() < 1e-6, "{v}");
    let p = model.init::<f32>(2);
    assert_eq!(eval_validation(&model, &p, &grids).unwrap(), eval_validation(&model, &p, &grids).unwrap());
    assert!(eval_validation(&model, &p, &[]).is_err());
    let sp = SampleParams::default();
    let c = eval_coherence(&model, &p, &sp, 8, &corpus, 1).unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert_eq!(c, eval_coherence(&model, &p, &sp, 8, &corpus, 1).unwrap());
    let s = smoothness_gap(&model, &p, &grids, 4).unwrap();
    assert!((-2.0..=2.0).contains(&s));
    assert_eq!(s, smoothness_gap(&model, &p, &grids, 4).unwrap());
}

#[test]
fn chance_level_matches_uniform_grids() {
    let corpus = CorpusConfig { height: 4, width: 4, ..CorpusConfig::default() };
    let n = 4000;
    let a = chance_coherence(&corpus, n, 1);
    assert_eq!(a, chance_coherence(&corpus, n, 1));
    let mut r = rng::stream(99, &[]);
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let tokens = (0..16).map(|_| (rng::unit(&mut r) * 64.0) as u16).collect();
            coherence_score(&TokenGrid { class_label: i % 8, tokens }, &corpus).score
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (2.0 * var / n as f64).sqrt();
    assert!((a - mean).abs() < 4.0 * se, "{a} vs {mean} (se {se})");
    assert!(a < 0.9);
}

/// Dense-matmul count written out one projection at a time.
fn layer_matmuls(t: f64, d: f64) -> f64 {
    let qkv = 3.0 * 2.0 * t * d * d;
    let scores = 2.0 * t * t * d;
    let mix = 2.0 * t * t * d;
    let out = 2.0 * t * d * d;
    let ffn = 2.0 * 2.0 * t * d * 4.0 * d;
    qkv + scores + mix + out + ffn
}

#[test]
fn reference_flops_land_on_published_values() {
    let (m, implicit, explicit) = reference_flops_configs();
    let t = (m.seq_len() + 1) as f64;
    let d = m.d_model as f64;
    let fwd = 12.0 * layer_matmuls(t, d) + 2.0 * 256.0 * d * 16384.0;
    assert!((backbone_forward_flops(&m) - fwd).abs() / fwd < 1e-12);
    let base = flops_estimate(&m, &ForesightConfig::none(), EncoderCost::Cached);
    assert_eq!(base.baseline, 3.0 * fwd);
    assert_eq!(base.overhead_pct, 0.0);
    assert!((base.baseline / 1.70e11 - 1.0).abs() < 0.15, "{:e}", base.baseline);
    let i = flops_estimate(&m, &implicit, EncoderCost::Cached);
    assert!((i.overhead_pct - 6.6).abs() < 3.0, "implicit {}", i.overhead_pct);
    let e = flops_estimate(&m, &explicit, EncoderCost::Cached);
    assert!((e.overhead_pct - 38.2).abs() < 6.0, "explicit {}", e.overhead_pct);
    let online = flops_estimate(&m, &implicit, EncoderCost::Online);
    assert!(online.total > i.total);
}

#[test]
fn flops_are_monotone() {
    let base = ModelConfig::default();
    let modes = [ForesightConfig::none(), ForesightConfig::implicit(), ForesightConfig::explicit(), ForesightConfig::mtp(3, foresight::Layout::Grid)];
    let total = |m: &ModelConfig, f: &ForesightConfig| flops_estimate(m, f, EncoderCost::Online).total;
    let grow: [fn(&mut ModelConfig); 4] = [
        |m| m.layers += 1,
        |m| {
            m.d_model += 8;
        },
        |m| {
            m.height += 1;
            m.width += 1;
        },
        |m| m.vocab_size += 16,
    ];
    for f in &modes {
        for g in grow {
            let mut bigger = base.clone();
            g(&mut bigger);
            assert!(total(&bigger, f) > total(&base, f), "{:?}", f.mode);
        }
        if f.mode != foresight::ForesightMode::None {
            assert!(total(&base, f) > total(&base, &modes[0]));
        }
    }
}

#[test]
fn medians_and_svg() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
    let svg = line_chart_svg("a < b", "step", "coherence", &[("x".into(), vec![(0.0, 0.1), (1.0, 0.5)]), ("y".into(), vec![])]);
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    assert!(svg.contains("a &lt; b") && svg.contains(">step<") && svg.contains(">coherence<"));
}

#[test]
fn block_sweep_rows_are_sorted_and_reproducible() {
    let corpus = CorpusConfig { vocab_size: 16, height: 4, width: 4, num_classes: 2, ..CorpusConfig::default() };
    let model = ModelConfig { layers: 2, d_model: 8, n_heads: 2, vocab_size: 16, height: 4, width: 4, num_classes: 2, align_layer: 1, ..ModelConfig::default() };
    let mut cfg = RunConfig { model, corpus, ..RunConfig::default() };
    cfg.train.batch_size = 2;
    cfg.train.n_train = 16;
    cfg.train.n_val = 4;
    cfg.eval.val_samples = 4;
    cfg.eval.coherence_samples = 2;
    cfg.foresight.head_hidden = 8;
    cfg.foresight.encoder = EncoderConfig { layers: 1, d_model: 8, n_heads: 2, pretrain_steps: 3, ..EncoderConfig::default() };
    let a = block_sweep(&cfg, &[16, 1, 4], &[0], 3).unwrap();
    let xs: Vec<f64> = a.rows.iter().map(|r| r.x).collect();
    assert_eq!(xs, vec![1.0, 4.0, 16.0]);
    assert_eq!(a.to_csv(), block_sweep(&cfg, &[4, 16, 1], &[0], 3).unwrap().to_csv());
    assert!(a.to_csv().starts_with("block_size,seed,val_ntp,coherence,smoothness\n"));
    assert!(block_sweep(&cfg, &[17], &[0], 3).is_err());
}
