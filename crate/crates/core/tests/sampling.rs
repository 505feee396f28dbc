use foresight::alignment::{EncoderConfig, ScheduleSpec};
use foresight::checkpoint::{Checkpoint, NamedTensor};
use foresight::eval::sampling_flops;
use foresight::rng;
use foresight::sampler::{
    argmax, cfg_combine, filter_top_k_top_p, load_for_sampling, next_token, sample_categorical, sample_grid,
};
use foresight::trainer::run_training;
use foresight::{CorpusConfig, ForesightConfig, ForesightMode, ModelConfig, RunConfig, SampleParams};
use proptest::prelude::*;

fn tiny(foresight: ForesightConfig) -> RunConfig {
    let corpus = CorpusConfig { vocab_size: 16, height: 4, width: 4, num_classes: 2, ..CorpusConfig::default() };
    let model = ModelConfig {
        layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab_size: 16,
        height: 4,
        width: 4,
        num_classes: 2,
        align_layer: 1,
        ..ModelConfig::default()
    };
    let mut cfg = RunConfig { model, corpus, foresight, ..RunConfig::default() };
    cfg.train.lr = 1e-3;
    cfg.train.batch_size = 4;
    cfg.train.total_steps = 30;
    cfg.train.eval_every = 30;
    cfg.train.n_train = 64;
    cfg.foresight.head_hidden = 16;
    cfg.foresight.encoder = EncoderConfig { layers: 1, d_model: 8, n_heads: 2, pretrain_steps: 10, ..EncoderConfig::default() };
    cfg
}

/// The checkpoint with every training-only tensor removed and the
/// configuration rewritten to plain next-token prediction.
fn strip(ckpt: &Checkpoint) -> Checkpoint {
    let mut cfg = RunConfig::parse(&ckpt.config).unwrap();
    cfg.foresight = ForesightConfig::none();
    let tensors: Vec<NamedTensor> = ckpt.tensors.iter().filter(|t| t.name.starts_with("model.")).cloned().collect();
    Checkpoint { config: cfg.to_toml(), tensors, ..ckpt.clone() }
}

#[test]
fn foresight_machinery_does_not_touch_sampling() {
    let modes = [
        ForesightConfig { tau: 0.9, warmup_fraction: 0.0, ..ForesightConfig::explicit() },
        ForesightConfig::implicit(),
        ForesightConfig { lambda: ScheduleSpec::constant(1.0), ..ForesightConfig::mtp(2, foresight::Layout::Grid) },
    ];
    for f in modes {
        let mode = f.mode;
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&tiny(f), dir.path(), None).unwrap();
        let full = Checkpoint::load(&out.final_checkpoint).unwrap();
        assert!(full.tensors.iter().any(|t| t.name.starts_with("aux.")));
        let lean = strip(&full);
        let lean_path = dir.path().join("lean.ckpt");
        lean.save(&lean_path).unwrap();
        let (m1, p1) = load_for_sampling(&full).unwrap();
        let (m2, p2) = load_for_sampling(&Checkpoint::load(&lean_path).unwrap()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1, out.state.backbone());
        for sp in [
            SampleParams { seed: 5, ..SampleParams::default() },
            SampleParams { seed: 6, cfg_scale: 1.0, top_k: 4, top_p: 0.9, temperature: 0.8 },
            SampleParams { seed: 7, temperature: 0.0, ..SampleParams::default() },
        ] {
            for class in 0..=2 {
                let a = sample_grid(&m1, &p1, class, &sp).unwrap();
                let b = sample_grid(&m2, &p2, class, &sp).unwrap();
                assert_eq!(a, b, "{mode:?} class {class}");
            }
            assert_eq!(sampling_flops(&m1.cfg, &sp), sampling_flops(&m2.cfg, &sp));
            assert_eq!(sampling_flops(&m1.cfg, &sp), sampling_flops(&tiny(ForesightConfig::none()).model, &sp));
        }
        assert_ne!(mode, ForesightMode::None);
    }
}

#[test]
fn sampling_is_seed_stable() {
    let cfg = tiny(ForesightConfig::none());
    let model = foresight::ArModel::new(cfg.model).unwrap();
    let p = model.init::<f32>(1);
    let sp = SampleParams { seed: 3, ..SampleParams::default() };
    let a = sample_grid(&model, &p, 1, &sp).unwrap();
    assert_eq!(a, sample_grid(&model, &p, 1, &sp).unwrap());
    assert_ne!(a, sample_grid(&model, &p, 1, &SampleParams { seed: 4, ..sp.clone() }).unwrap());
    assert!(sample_grid(&model, &p, 3, &sp).is_err());
    assert!(sample_grid(&model, &p, 0, &SampleParams { top_p: 0.0, ..sp }).is_err());
}

#[test]
fn categorical_draws_follow_softmax() {
    let logits = [0.2f64, -1.0, 1.5, 0.0, f64::NEG_INFINITY];
    let m = 1.5f64;
    let w: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let probs: Vec<f64> = w.iter().map(|x| x / z).collect();
    let n = 100_000;
    let mut counts = [0usize; 5];
    let mut r = rng::stream(17, &[]);
    for _ in 0..n {
        counts[sample_categorical(&logits, &mut r)] += 1;
    }
    assert_eq!(counts[4], 0);
    // chi-square with 3 degrees of freedom; 16.27 is the 0.999 quantile
    let chi: f64 = (0..4)
        .map(|i| {
            let e = probs[i] * n as f64;
            (counts[i] as f64 - e).powi(2) / e
        })
        .sum();
    assert!(chi < 16.27, "chi-square {chi}, counts {counts:?}");
}

#[test]
fn greedy_and_guidance_identities() {
    let cond = [0.1, 3.0, 3.0, -2.0];
    let uncond = [1.0, 0.0, 2.0, 0.5];
    assert_eq!(argmax(&cond), 1);
    let sp = SampleParams { temperature: 0.0, cfg_scale: 3.0, ..SampleParams::default() };
    let mut r = rng::stream(0, &[]);
    let want = argmax(&cfg_combine(&cond, &uncond, 3.0));
    assert_eq!(next_token(&cond, Some(&uncond), &sp, &mut r).unwrap(), want);
    assert_eq!(cfg_combine(&cond, &uncond, 1.0), cond.to_vec());
    assert_eq!(cfg_combine(&cond, &uncond, 0.0), uncond.to_vec());
}

proptest! {
    #[test]
    fn filters_keep_the_expected_set(logits in proptest::collection::vec(-5.0f64..5.0, 2..30), k in 0usize..10, p in 0.05f64..1.0) {
        let out = filter_top_k_top_p(&logits, k, p).unwrap();
        let kept: Vec<usize> = (0..logits.len()).filter(|&i| out[i].is_finite()).collect();
        prop_assert!(!kept.is_empty());
        if k > 0 {
            prop_assert!(kept.len() <= k);
        }
        for &i in &kept {
            prop_assert_eq!(out[i], logits[i]);
        }
        // every kept entry ranks at least as high as every dropped one
        let min_kept = kept.iter().map(|&i| logits[i]).fold(f64::INFINITY, f64::min);
        for i in 0..logits.len() {
            if !out[i].is_finite() {
                prop_assert!(logits[i] <= min_kept);
            }
        }
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            prop_assert!(out[sample_categorical(&out, &mut r)].is_finite());
        }
    }
}
