//! Token-by-token causal decoding with classifier-free guidance, temperature
//! and top-k / top-p filtering. Only backbone parameters are involved.

use serde::{Deserialize, Serialize};

use crate::backbone::ArModel;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::TokenGrid;
use crate::error::{ensure_domain, Error, Result};
use crate::rng::{self, StreamRng};
use crate::trainer::load_backbone;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleParams {
    pub cfg_scale: f64,
    /// 0 selects greedy (argmax) decoding.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    /// 1 disables top-p filtering.
    pub top_p: f64,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        Self {
            cfg_scale: 2.0,
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            seed: 0,
        }
    }
}

impl SampleParams {
    pub fn validate(&self) -> Result<()> {
        ensure_domain!(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite(), "cfg_scale must be finite and >= 0");
        ensure_domain!(self.temperature >= 0.0 && self.temperature.is_finite(), "temperature must be finite and >= 0");
        ensure_domain!(self.top_p > 0.0 && self.top_p <= 1.0, "top_p {} outside (0, 1]", self.top_p);
        Ok(())
    }
}

/// `uncond + s·(cond − uncond)`; `s = 1` and `s = 0` return the inputs exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], s: f64) -> Vec<f64> {
    assert_eq!(cond.len(), uncond.len(), "guidance rows differ in width");
    if s == 1.0 {
        return cond.to_vec();
    }
    if s == 0.0 {
        return uncond.to_vec();
    }
    cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect()
}

/// Sets disallowed entries to −∞. Entries are ranked by value, ties by
/// ascending token id; top-k applies first, then top-p on the survivors.
pub fn filter_top_k_top_p(logits: &[f64], top_k: usize, top_p: f64) -> Result<Vec<f64>> {
    ensure_domain!(top_p > 0.0 && top_p <= 1.0, "top_p {top_p} outside (0, 1]");
    ensure_domain!(!logits.is_empty(), "empty logit row");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite logits"));
    }
    let keep_k = if top_k == 0 { logits.len() } else { top_k.min(logits.len()) };
    if keep_k == logits.len() && top_p == 1.0 {
        return Ok(logits.to_vec());
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(keep_k);
    if top_p < 1.0 {
        let m = logits[order[0]];
        let weights: Vec<f64> = order.iter().map(|&i| (logits[i] - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut mass = 0.0;
        let mut keep = 0;
        for w in &weights {
            mass += w / z;
            keep += 1;
            if mass >= top_p {
                break;
            }
        }
        order.truncate(keep);
    }
    let mut out = vec![f64::NEG_INFINITY; logits.len()];
    for i in order {
        out[i] = logits[i];
    }
    Ok(out)
}

/// Smallest index among the maxima.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Categorical draw from softmax(`logits`); −∞ entries have probability 0.
pub fn sample_categorical(logits: &[f64], rng: &mut StreamRng) -> usize {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { (v - m).exp() }).collect();
    let z: f64 = weights.iter().sum();
    let u = rng::unit(rng) * z;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Guided, filtered next-token choice from one conditional and one
/// unconditional logit row.
pub fn next_token(cond: &[f64], uncond: Option<&[f64]>, sp: &SampleParams, rng: &mut StreamRng) -> Result<usize> {
    let mut row = match uncond {
        Some(u) => cfg_combine(cond, u, sp.cfg_scale),
        None => cond.to_vec(),
    };
    if sp.temperature == 0.0 {
        return Ok(argmax(&row));
    }
    if sp.temperature != 1.0 {
        row.iter_mut().for_each(|v| *v /= sp.temperature);
    }
    let row = filter_top_k_top_p(&row, sp.top_k, sp.top_p)?;
    Ok(sample_categorical(&row, rng))
}

/// Samples one grid for `class` (the null id gives unconditional samples)
/// using a stream derived from `sp.seed` and the class.
pub fn sample_grid(model: &ArModel, params: &[f32], class: usize, sp: &SampleParams) -> Result<TokenGrid> {
    let mut rng = rng::stream(sp.seed, &[0x5A3, class as u64]);
    sample_grid_with(model, params, class, sp, &mut rng)
}

pub fn sample_grid_with(
    model: &ArModel,
    params: &[f32],
    class: usize,
    sp: &SampleParams,
    rng: &mut StreamRng,
) -> Result<TokenGrid> {
    sp.validate()?;
    let cfg = &model.cfg;
    ensure_domain!(class <= cfg.num_classes, "class {class} out of range");
    ensure_domain!(params.len() == model.num_params(), "parameter buffer does not match the model");
    let guided = sp.cfg_scale != 1.0 && class != cfg.null_class();
    let mut cond = model.decoder(params);
    let mut uncond = guided.then(|| model.decoder(params));
    let to64 = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    let mut lc = to64(cond.start(class));
    let mut lu = uncond.as_mut().map(|d| to64(d.start(cfg.null_class())));
    let n = cfg.seq_len();
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n {
        let t = next_token(&lc, lu.as_deref(), sp, rng)? as u16;
        tokens.push(t);
        if i + 1 < n {
            lc = to64(cond.push(t));
            lu = uncond.as_mut().map(|d| to64(d.push(t)));
        }
    }
    Ok(TokenGrid {
        class_label: class,
        tokens,
    })
}

/// Model and backbone parameters of an AR checkpoint; training-only tensors
/// (projection heads, EMA, optimizer moments) are ignored.
pub fn load_for_sampling(ckpt: &Checkpoint) -> Result<(ArModel, Vec<f32>)> {
    let cfg = RunConfig::parse(&ckpt.config)?;
    let model = ArModel::new(cfg.model)?;
    let params = load_backbone(ckpt, &model)?;
    Ok((model, params))
}
