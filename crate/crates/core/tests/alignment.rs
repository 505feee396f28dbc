use foresight::alignment::{
    cosine_alignment_loss, ema_update, explicit_targets, foresight_loss, implicit_targets, lambda_at,
    pretrain_bidir_encoder, same_position_pairs, AlignPair, BidirEncoder, EncoderConfig, HeadKind, ProjectionHeads,
    ScheduleSpec,
};
use foresight::corpus::make_splits;
use foresight::geometry::{block_causal_mask, AttnMask};
use foresight::rng;
use foresight::{ArModel, CorpusConfig, ModelConfig, TokenGrid};
use proptest::prelude::*;

fn pair(anchor: usize, slot: usize, target: usize) -> AlignPair {
    AlignPair { anchor, slot, target }
}

fn random_rows(seed: u64, len: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, &[]);
    (0..len).map(|_| rng::normal(&mut r)).collect()
}

#[test]
fn ema_matches_geometric_closed_form() {
    let tau = 0.9999f64;
    let phi0 = random_rows(1, 64);
    let theta = random_rows(2, 64);
    for s in [1i32, 10, 1000] {
        let mut phi = phi0.clone();
        for _ in 0..s {
            ema_update(&mut phi, &theta, tau).unwrap();
        }
        let ts = tau.powi(s);
        for ((p, p0), t) in phi.iter().zip(&phi0).zip(&theta) {
            assert!((p - (ts * p0 + (1.0 - ts) * t)).abs() < 1e-6, "s={s}");
        }
    }
    let mut phi = vec![0.0f64];
    ema_update(&mut phi, &[1.0], tau).unwrap();
    assert!((phi[0] - 1e-4).abs() < 1e-15);
    assert!(ema_update(&mut phi, &[1.0, 2.0], tau).is_err());
}

#[test]
fn schedules_match_closed_forms_at_101_points() {
    let pi = std::f64::consts::PI;
    let c = ScheduleSpec::constant(2.0);
    let st = ScheduleSpec::step(2.0, 1.0, 0.5);
    let co = ScheduleSpec::cosine(2.0, 0.0);
    let co2 = ScheduleSpec::cosine(0.5, 3.0);
    for i in 0..=100 {
        let p = i as f64 / 100.0;
        assert_eq!(lambda_at(&c, p), 2.0);
        assert_eq!(lambda_at(&st, p), if i < 50 { 2.0 } else { 1.0 });
        let w = (1.0 + (pi * p).cos()) / 2.0;
        assert!((lambda_at(&co, p) - 2.0 * w).abs() <= 4.0 * f64::EPSILON);
        assert!((lambda_at(&co2, p) - (0.5 * w + 3.0 * (1.0 - w))).abs() <= 8.0 * f64::EPSILON);
    }
    assert_eq!(lambda_at(&st, 0.49), 2.0);
    assert_eq!(lambda_at(&st, 0.5), 1.0);
    assert!((lambda_at(&co, 0.5) - 1.0).abs() < 1e-15);
}

#[test]
fn cosine_loss_examples() {
    let t = vec![1.0f64, 0.0, 0.0, 1.0];
    let (l, _) = cosine_alignment_loss(&[t.clone()], &t, &[pair(0, 0, 0), pair(1, 0, 1)], 2).unwrap();
    assert_eq!(l, -1.0);
    let orth = vec![0.0f64, 2.0, -3.0, 0.0];
    let (l, _) = cosine_alignment_loss(&[orth], &t, &[pair(0, 0, 0), pair(1, 0, 1)], 2).unwrap();
    assert_eq!(l, 0.0);
    let mixed = vec![5.0f64, 0.0, 1.0, 0.0];
    let (l, _) = cosine_alignment_loss(&[mixed], &t, &[pair(0, 0, 0), pair(1, 0, 1)], 2).unwrap();
    assert!((l + 0.5).abs() < 1e-15);
    assert!(cosine_alignment_loss::<f64>(&[t.clone()], &t, &[], 2).is_err());
}

#[test]
fn cosine_gradient_matches_differences() {
    let pred = vec![random_rows(3, 12), random_rows(4, 12)];
    let tgt = random_rows(5, 12);
    let pairs = [pair(0, 0, 0), pair(1, 0, 2), pair(1, 1, 1), pair(2, 1, 2)];
    let (_, grads) = cosine_alignment_loss(&pred, &tgt, &pairs, 4).unwrap();
    let h = 1e-6;
    for s in 0..2 {
        for i in 0..12 {
            let mut up = pred.clone();
            up[s][i] += h;
            let mut dn = pred.clone();
            dn[s][i] -= h;
            let num = (cosine_alignment_loss(&up, &tgt, &pairs, 4).unwrap().0
                - cosine_alignment_loss(&dn, &tgt, &pairs, 4).unwrap().0)
                / (2.0 * h);
            assert!((num - grads[s][i]).abs() < 1e-8, "slot {s} index {i}");
        }
    }
}

proptest! {
    #[test]
    fn cosine_loss_bounded_and_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let pred = vec![random_rows(seed, 15)];
        let tgt = random_rows(seed ^ 0xFF, 15);
        let pairs: Vec<_> = (0..5).map(|i| pair(i, 0, (i + 1) % 5)).collect();
        let (l, _) = cosine_alignment_loss(&pred, &tgt, &pairs, 3).unwrap();
        prop_assert!((-1.0..=1.0).contains(&l));
        let scaled: Vec<f64> = tgt.iter().map(|x| x * c).collect();
        let (l2, _) = cosine_alignment_loss(&pred, &scaled, &pairs, 3).unwrap();
        prop_assert!((l - l2).abs() < 1e-6);
        let pos: Vec<f64> = (0..5).flat_map(|i| tgt[((i + 1) % 5) * 3..((i + 1) % 5) * 3 + 3].iter().map(move |x| x * (1.0 + i as f64))).collect();
        let (l3, _) = cosine_alignment_loss(&[pos], &tgt, &pairs, 3).unwrap();
        prop_assert!((l3 + 1.0).abs() < 1e-12);
    }
}

#[test]
fn head_parameter_counts_at_reference_width() {
    let mlp = ProjectionHeads::new(HeadKind::Mlp, 1, 768, 2048, 768).unwrap();
    assert_eq!(mlp.num_params(), 768 * 2048 + 2048 + 2048 * 2048 + 2048 + 2048 * 768 + 768);
    assert!((mlp.num_params() as f64 / 1e6 - 7.34).abs() < 0.01);
    let blk = ProjectionHeads::new(HeadKind::TransformerBlock, 1, 768, 2048, 768).unwrap();
    assert!((blk.num_params() as f64 / 1e6 - 7.68).abs() < 0.01, "{}", blk.num_params());
    let three = ProjectionHeads::new(HeadKind::Mlp, 3, 96, 128, 32).unwrap();
    assert_eq!(three.count(), 3);
    assert_eq!(three.num_params(), 3 * (96 * 128 + 128 + 128 * 128 + 128 + 128 * 32 + 32));
}

#[test]
fn zero_final_layer_gives_zero_output() {
    let heads = ProjectionHeads::new(HeadKind::Mlp, 1, 6, 8, 5).unwrap();
    let mut p = heads.init::<f64>(1, 0.5);
    for e in heads.layout.entries() {
        if e.name.contains("fc3") {
            p[e.range()].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let (y, _) = heads.forward(&p, 0, &vec![0.0; 12]).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
    assert!(heads.forward(&p, 0, &[0.0; 7]).is_err());
}

fn tiny_model() -> ArModel {
    ArModel::new(ModelConfig {
        layers: 3,
        d_model: 16,
        n_heads: 2,
        vocab_size: 9,
        height: 4,
        width: 4,
        num_classes: 2,
        align_layer: 2,
        init_std: 0.3,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn grid(seed: u64, v: usize, n: usize) -> TokenGrid {
    let mut r = rng::stream(seed, &[]);
    TokenGrid {
        class_label: 0,
        tokens: (0..n).map(|_| (rng::unit(&mut r) * v as f64) as u16).collect(),
    }
}

#[test]
fn live_model_targets_with_identity_head_give_minus_one() {
    let model = tiny_model();
    let p = model.init::<f64>(2);
    let g = grid(3, 9, 16);
    let mut phi = vec![0.0f64; p.len()];
    ema_update(&mut phi, &p, 0.0).unwrap();
    let targets = explicit_targets(&model, &phi, &g).unwrap();
    let hidden = model.forward(&p, &g, &AttnMask::causal(17), None).unwrap().out.hidden_l;
    assert_eq!(targets, hidden);
    let heads = ProjectionHeads::new(HeadKind::TransformerBlock, 1, 16, 16, 16).unwrap();
    let ph = heads.identity_params::<f64>().unwrap();
    let mut gh = vec![0.0; ph.len()];
    let (l, _) = foresight_loss(&heads, &ph, &hidden, &targets, &same_position_pairs(16), 1.0, &mut gh).unwrap();
    assert!((l + 1.0).abs() < 1e-6, "{l}");
}

#[test]
fn encoder_masks_control_dependence() {
    let cfg = EncoderConfig { layers: 2, d_model: 12, n_heads: 2, ..EncoderConfig::default() };
    let enc = BidirEncoder::random(cfg, 9, 16).unwrap();
    let base = grid(4, 9, 16);
    let full = block_causal_mask(16, 16).unwrap();
    let unit = block_causal_mask(16, 1).unwrap();
    let f0: Vec<f64> = implicit_targets(&enc, &base, &full).unwrap();
    let c0: Vec<f64> = implicit_targets(&enc, &base, &unit).unwrap();
    assert_eq!(f0, implicit_targets::<f64>(&enc, &base, &full).unwrap());
    let w = enc.width();
    for m in 0..16 {
        let mut g = base.clone();
        g.tokens[m] = (g.tokens[m] + 1) % 9;
        let f: Vec<f64> = implicit_targets(&enc, &g, &full).unwrap();
        assert_ne!(f, f0);
        if m > 0 {
            // full attention: rows before m change as well
            assert_ne!(f[..w], f0[..w]);
        }
        let c: Vec<f64> = implicit_targets(&enc, &g, &unit).unwrap();
        assert_eq!(c[..m * w], c0[..m * w], "row < {m} saw a later token");
    }
    assert!(implicit_targets::<f64>(&enc, &base, &AttnMask::full(15)).is_err());
}

#[test]
fn pretrained_encoder_beats_random_on_held_out_grids() {
    let corpus = CorpusConfig { height: 8, width: 8, ..CorpusConfig::default() };
    let (train, val) = make_splits(&corpus, 512, 64).unwrap();
    let held: Vec<TokenGrid> = val.iter().collect();
    for seed in 0..3 {
        let cfg = EncoderConfig { pretrain_steps: 150, seed, ..EncoderConfig::default() };
        let (enc, losses) = pretrain_bidir_encoder(&cfg, &train, 64).unwrap();
        assert_eq!(losses.len(), 150);
        let random = BidirEncoder::random(cfg, 64, 64).unwrap();
        let a = enc.masked_accuracy(&held, 0.3, 7).unwrap();
        let b = random.masked_accuracy(&held, 0.3, 7).unwrap();
        assert!(a > b, "seed {seed}: trained {a} vs random {b}");
    }
    let zero = EncoderConfig { mask_ratio: 0.0, ..EncoderConfig::default() };
    assert!(pretrain_bidir_encoder(&zero, &train, 64).is_err());
}

#[test]
fn encoder_checkpoint_roundtrip() {
    let enc = BidirEncoder::random(EncoderConfig { d_model: 8, ..EncoderConfig::default() }, 9, 16).unwrap();
    let ckpt = enc.to_checkpoint();
    let bytes = ckpt.encode().unwrap();
    let back = BidirEncoder::from_checkpoint(&foresight::Checkpoint::decode(&bytes).unwrap()).unwrap();
    assert_eq!(back.params(), enc.params());
    let g = grid(1, 9, 16);
    assert_eq!(back.features::<f32>(&g).unwrap(), enc.features::<f32>(&g).unwrap());
}
