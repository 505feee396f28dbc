//! Command-line front end. Every subcommand reads a run configuration and
//! writes its artifacts into one output directory guarded by a lockfile.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{make_splits, read_dump, write_dump, CorpusHeader, TokenGrid};
use crate::error::{Error, Result};
use crate::eval::{
    block_sweep, convergence_compare, convergence_csv, eval_coherence, eval_validation, lambda_sweep, line_chart_svg,
    smoothness_gap, write_text, SweepResult,
};
use crate::alignment::{pretrain_bidir_encoder, ForesightConfig, ForesightMode};
use crate::render::render_grid;
use crate::sampler::{load_for_sampling, sample_grid};
use crate::trainer::run_training;

#[derive(Parser, Debug)]
#[command(name = "foresight", version, about = "Train, sample and evaluate token-grid AR models with foresight alignment")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training and sampling seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint to resume training from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Worker threads; computation is single-threaded, so only 1 is accepted.
    #[arg(long, default_value_t = 1)]
    pub device_threads: usize,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.csv, periodic checkpoints and final.ckpt.
    Train(Common),
    /// Sample grids from a checkpoint into samples.bin and PGM images.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of grids; classes are cycled in order.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Validation loss, coherence and smoothness of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Implicit-foresight runs over encoder block sizes.
    SweepBlock(Common),
    /// Constant-λ runs of the configured foresight mode.
    SweepLambda(Common),
    /// Steps-to-coherence of the baseline, explicit and implicit foresight.
    Compare(Common),
    /// Pretrain the bidirectional encoder; writes encoder.ckpt.
    PretrainEncoder(Common),
    /// Render every grid of a corpus or sample dump as PGM.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train(c) | Command::SweepBlock(c) | Command::SweepLambda(c) | Command::Compare(c) | Command::PretrainEncoder(c) => c,
            Command::Sample { common, .. } | Command::Eval { common, .. } | Command::Render { common, .. } => common,
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        _ => 1,
    }
}

/// Parses arguments, runs the subcommand and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Domain(format!(
                "output directory {} is in use by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
        cfg.sample.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(steps) = c.steps {
        cfg.train.total_steps = steps;
    }
    cfg.validate().map_err(|e| match e {
        Error::Domain(msg) => Error::Config(msg),
        other => other,
    })?;
    if c.device_threads != 1 {
        return Err(Error::Config(format!(
            "--device-threads {} requested; this build runs on one thread",
            c.device_threads
        )));
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = load_config(common)?;
    let out = &common.out;
    let _lock = DirLock::acquire(out)?;
    match &cli.command {
        Command::Train(c) => train(&cfg, out, c.resume.as_deref()),
        Command::Sample { checkpoint, count, .. } => sample(&cfg, out, checkpoint, *count),
        Command::Eval { checkpoint, .. } => eval(&cfg, out, checkpoint),
        Command::SweepBlock(_) => {
            let sizes = cfg.eval.block_sizes_for(cfg.model.seq_len());
            let res = block_sweep(&cfg, &sizes, &cfg.eval.seeds, cfg.train.total_steps)?;
            write_sweep(out, "block_sweep", "encoder block size", &res)
        }
        Command::SweepLambda(_) => {
            let res = lambda_sweep(&cfg, &cfg.eval.lambda_values, &cfg.eval.seeds, cfg.train.total_steps)?;
            write_sweep(out, "lambda_sweep", "lambda", &res)
        }
        Command::Compare(_) => compare(&cfg, out),
        Command::PretrainEncoder(_) => pretrain(&cfg, out),
        Command::Render { input, .. } => render(&cfg, out, input),
    }
}

fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let outcome = run_training(cfg, out, resume)?;
    let ntp: Vec<(f64, f64)> = outcome.metrics.iter().map(|m| (m.step as f64, m.ntp_loss)).collect();
    let total: Vec<(f64, f64)> = outcome.metrics.iter().map(|m| (m.step as f64, m.total_loss)).collect();
    if !ntp.is_empty() {
        let svg = line_chart_svg("training loss", "step", "nats", &[("ntp".into(), ntp), ("total".into(), total)]);
        write_text(&out.join("loss.svg"), &svg)?;
    }
    if let Some(m) = outcome.metrics.last() {
        println!("step {} ntp {:.4} total {:.4}", m.step, m.ntp_loss, m.total_loss);
    }
    println!("wrote {}", outcome.final_checkpoint.display());
    Ok(())
}

fn sample(cfg: &RunConfig, out: &Path, checkpoint: &Path, count: Option<usize>) -> Result<()> {
    let (model, params) = load_for_sampling(&Checkpoint::load(checkpoint)?)?;
    let count = count.unwrap_or(model.cfg.num_classes);
    let mut grids = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % model.cfg.num_classes;
        let mut sp = cfg.sample.clone();
        sp.seed = crate::rng::derive_seed(cfg.sample.seed, &[i as u64]);
        let g = sample_grid(&model, &params, class, &sp)?;
        render_grid(&g, model.cfg.height, model.cfg.width, model.cfg.vocab_size, &out.join(format!("sample_{i:04}.pgm")))?;
        grids.push(g);
    }
    write_dump(&out.join("samples.bin"), &header_for(&model.cfg), &grids)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn header_for(m: &crate::backbone::ModelConfig) -> CorpusHeader {
    CorpusHeader {
        vocab_size: m.vocab_size,
        shape: m.shape(),
    }
}

fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<()> {
    let (model, params) = load_for_sampling(&Checkpoint::load(checkpoint)?)?;
    let (_, val) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;
    let grids: Vec<TokenGrid> = val.iter().take(cfg.eval.val_samples.max(1)).collect();
    let val_ntp = eval_validation(&model, &params, &grids)?;
    let coherence = eval_coherence(&model, &params, &cfg.sample, cfg.eval.coherence_samples, &cfg.corpus, cfg.eval.seed)?;
    let smooth = smoothness_gap(&model, &params, &grids, cfg.eval.seed)?;
    let report = format!(
        "val_ntp,coherence_rate,smoothness_gap,samples_used\n{val_ntp},{coherence},{smooth},{}\n",
        grids.len()
    );
    write_text(&out.join("report.csv"), &report)?;
    print!("{report}");
    Ok(())
}

fn write_sweep(out: &Path, stem: &str, x_label: &str, res: &SweepResult) -> Result<()> {
    write_text(&out.join("report.csv"), &res.to_csv())?;
    let med = res.medians();
    let ntp: Vec<(f64, f64)> = med.iter().map(|m| (m.0, m.1)).collect();
    let coh: Vec<(f64, f64)> = med.iter().map(|m| (m.0, m.2)).collect();
    write_text(
        &out.join(format!("{stem}_ntp.svg")),
        &line_chart_svg("validation loss (median over seeds)", x_label, "nats", &[("val_ntp".into(), ntp)]),
    )?;
    write_text(
        &out.join(format!("{stem}_coherence.svg")),
        &line_chart_svg("coherence (median over seeds)", x_label, "coherence", &[("coherence".into(), coh)]),
    )?;
    let mut s = String::new();
    for (x, n, c, sm) in med {
        let _ = writeln!(s, "{x_label} {x}: val_ntp {n:.4} coherence {c:.3} smoothness {sm:.4}");
    }
    print!("{s}");
    Ok(())
}

fn compare(cfg: &RunConfig, out: &Path) -> Result<()> {
    let variant = |mode: ForesightMode| {
        let mut c = cfg.clone();
        c.foresight = match mode {
            ForesightMode::None => ForesightConfig::none(),
            ForesightMode::ExplicitEma => ForesightConfig {
                mode,
                ..cfg.foresight.clone()
            },
            _ => ForesightConfig {
                encoder: cfg.foresight.encoder.clone(),
                encoder_checkpoint: cfg.foresight.encoder_checkpoint.clone(),
                head_kind: cfg.foresight.head_kind,
                head_hidden: cfg.foresight.head_hidden,
                ..ForesightConfig::implicit()
            },
        };
        c
    };
    let configs = vec![
        ("baseline".to_string(), variant(ForesightMode::None)),
        ("explicit".to_string(), variant(ForesightMode::ExplicitEma)),
        ("implicit".to_string(), variant(ForesightMode::ImplicitEncoder)),
    ];
    let results = convergence_compare(&configs, cfg.eval.coherence_threshold, cfg.train.total_steps as u64)?;
    let mut report = String::from("config,steps_to_threshold\n");
    for r in &results {
        let steps = r.crossing.map(|s| s.to_string()).unwrap_or_else(|| "not reached".into());
        let _ = writeln!(report, "{},{}", r.name, steps);
    }
    write_text(&out.join("report.csv"), &report)?;
    write_text(&out.join("curves.csv"), &convergence_csv(&results))?;
    let series: Vec<(String, Vec<(f64, f64)>)> = results
        .iter()
        .map(|r| (r.name.clone(), r.curve.iter().map(|&(s, c)| (s as f64, c)).collect()))
        .collect();
    write_text(&out.join("convergence.svg"), &line_chart_svg("sample coherence", "step", "coherence", &series))?;
    print!("{report}");
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, _) = make_splits(&cfg.corpus, cfg.train.n_train, cfg.train.n_val)?;
    let (enc, losses) = pretrain_bidir_encoder(&cfg.foresight.encoder, &train, cfg.model.vocab_size)?;
    enc.to_checkpoint().save(&out.join("encoder.ckpt"))?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{}", i + 1, l);
    }
    write_text(&out.join("encoder_losses.csv"), &csv)?;
    let pts: Vec<(f64, f64)> = losses.iter().enumerate().map(|(i, &l)| ((i + 1) as f64, l)).collect();
    write_text(&out.join("encoder_loss.svg"), &line_chart_svg("masked-token loss", "step", "nats", &[("loss".into(), pts)]))?;
    println!("wrote {}", out.join("encoder.ckpt").display());
    Ok(())
}

fn render(_cfg: &RunConfig, out: &Path, input: &Path) -> Result<()> {
    let (header, grids) = read_dump(input)?;
    for (i, g) in grids.iter().enumerate() {
        render_grid(
            g,
            header.shape.height,
            header.shape.width,
            header.vocab_size,
            &out.join(format!("grid_{i:04}.pgm")),
        )?;
    }
    println!("rendered {} grids", grids.len());
    Ok(())
}
