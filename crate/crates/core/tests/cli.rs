use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use foresight::alignment::ScheduleSpec;
use foresight::{CorpusConfig, ForesightConfig, ModelConfig, RunConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_foresight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

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
    cfg.train.total_steps = 12;
    cfg.train.eval_every = 6;
    cfg.train.n_train = 32;
    cfg.train.record_wall_time = false;
    cfg.foresight.head_hidden = 16;
    cfg
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn misspelled_section_is_a_config_error_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let good = tiny(ForesightConfig::none()).to_toml();
    for (text, key) in [
        (format!("{good}\nmodle.layers = 4\n"), "modle"),
        (format!("[modle]\nlayers = 4\n{good}"), "modle"),
        (good.replacen("layers", "layerz", 1), "layerz"),
    ] {
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, &text).unwrap();
        let out = run(&["train", "--config", s(&p), "--out", s(&dir.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2));
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(key), "{err}");
        assert!(err.contains("line") && err.contains("column"), "{err}");
    }
    let missing = run(&["train", "--config", "/nonexistent.toml", "--out", s(dir.path())]);
    assert_ne!(missing.status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_lambda_and_baseline_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.toml", &tiny(ForesightConfig::none()));
    let zero = ForesightConfig { lambda: ScheduleSpec::constant(0.0), tau: 0.9, ..ForesightConfig::explicit() };
    let zero = write_config(dir.path(), "zero.toml", &tiny(zero));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run(&["train", "--config", s(&base), "--out", s(&a), "--seed", "5"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--config", s(&zero), "--out", s(&b), "--seed", "5"]).status.code(), Some(0));
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 13);
    assert!(a.join("final.ckpt").exists() && a.join("loss.svg").exists());
    assert!(!a.join(".lock").exists());
}

#[test]
fn sampling_twice_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(ForesightConfig::none()));
    let train = dir.path().join("train");
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&train)]).status.success());
    let ckpt = train.join("final.ckpt");
    let mut outs = Vec::new();
    for name in ["s1", "s2"] {
        let o = dir.path().join(name);
        let r = run(&["sample", "--config", s(&cfg), "--out", s(&o), "--checkpoint", s(&ckpt), "--seed", "9", "--count", "3"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        outs.push(o);
    }
    for f in ["samples.bin", "sample_0000.pgm", "sample_0001.pgm", "sample_0002.pgm"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let r = run(&["render", "--config", s(&cfg), "--out", s(&dir.path().join("r")), "--input", s(&outs[0].join("samples.bin"))]);
    assert!(r.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("r/grid_0001.pgm")).unwrap(),
        std::fs::read(outs[0].join("sample_0001.pgm")).unwrap()
    );
    let e = dir.path().join("e");
    assert!(run(&["eval", "--config", s(&cfg), "--out", s(&e), "--checkpoint", s(&ckpt)]).status.success());
    let report = std::fs::read_to_string(e.join("report.csv")).unwrap();
    assert!(report.starts_with("val_ntp,coherence_rate,smoothness_gap,samples_used\n"));
}

#[test]
fn output_directory_is_locked_and_threads_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(ForesightConfig::none()));
    let out = dir.path().join("busy");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "1\n").unwrap();
    let r = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("in use"));
    assert!(out.join(".lock").exists());
    let r = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t")), "--device-threads", "4"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("t")), "--device-threads", "1", "--steps", "2"]);
    assert!(r.status.success());
}

#[test]
fn resume_from_cli_matches_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &tiny(ForesightConfig::implicit()));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(run(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "0"]).status.success());
    std::fs::remove_file(b.join("final.ckpt")).unwrap();
    let half = b.join("ckpt_0000006.ckpt");
    let r = run(&["train", "--config", s(&cfg), "--out", s(&b), "--resume", s(&half)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(std::fs::read(a.join("final.ckpt")).unwrap(), std::fs::read(b.join("final.ckpt")).unwrap());
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}
