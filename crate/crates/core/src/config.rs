//! Run configuration files: TOML with `[model]`, `[train]`, `[foresight]`,
//! `[corpus]`, `[sample]` and `[eval]` sections. Unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::corpus::CorpusConfig;
use crate::error::{ensure_domain, Error, Result};
use crate::eval::EvalConfig;
use crate::alignment::ForesightConfig;
use crate::sampler::SampleParams;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub foresight: ForesightConfig,
    pub corpus: CorpusConfig,
    pub sample: SampleParams,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(describe(&e, text)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    /// Cross-section consistency: the model must match the corpus it trains on.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.foresight.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        ensure_domain!(
            self.model.vocab_size == self.corpus.vocab_size
                && self.model.height == self.corpus.height
                && self.model.width == self.corpus.width
                && self.model.num_classes == self.corpus.num_classes,
            "model (V={}, {}x{}, {} classes) does not match corpus (V={}, {}x{}, {} classes)",
            self.model.vocab_size,
            self.model.height,
            self.model.width,
            self.model.num_classes,
            self.corpus.vocab_size,
            self.corpus.height,
            self.corpus.width,
            self.corpus.num_classes
        );
        Ok(())
    }
}

fn describe(err: &toml::de::Error, text: &str) -> String {
    let msg = err.message();
    match err.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
            let key = text[span.clone()].trim();
            format!("line {line}, column {col}: {msg} (at `{key}`)")
        }
        None => msg.to_string(),
    }
}
