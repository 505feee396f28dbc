//! Flat parameter buffers addressed through a named layout.

use std::ops::Range;

use crate::real::Real;
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix; subject to weight decay.
    Weight,
    Bias,
    /// LayerNorm gain.
    NormGain,
    NormBias,
    Embedding,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], kind: ParamKind) -> Range<usize> {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
            kind,
        };
        let r = entry.range();
        self.total = r.end;
        self.entries.push(entry);
        r
    }

    /// Appends all entries of `other`, renamed with `prefix`; returns the base offset.
    pub fn append(&mut self, prefix: &str, other: &ParamLayout) -> usize {
        let base = self.total;
        for e in &other.entries {
            self.push(format!("{prefix}{}", e.name), &e.shape, e.kind);
        }
        base
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// 1 where weight decay applies, 0 elsewhere.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for e in &self.entries {
            if e.kind.decays() {
                m[e.range()].iter_mut().for_each(|x| *x = true);
            }
        }
        m
    }

    /// Standard initialization: N(0, std) for weights and embeddings, ones for
    /// norm gains, zeros for biases.
    pub fn init<T: Real>(&self, std: f64, rng: &mut StreamRng) -> Vec<T> {
        let mut data = vec![T::zero(); self.total];
        for e in &self.entries {
            let slot = &mut data[e.range()];
            match e.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    slot.iter_mut().for_each(|x| *x = T::c(std * rng::normal(rng)))
                }
                ParamKind::NormGain => slot.iter_mut().for_each(|x| *x = T::one()),
                ParamKind::Bias | ParamKind::NormBias => {}
            }
        }
        data
    }
}

#[derive(Clone, Debug)]
pub struct LinearIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LinearIdx {
    pub fn declare(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = layout.push(format!("{name}.weight"), &[fan_in, fan_out], ParamKind::Weight);
        let b = layout.push(format!("{name}.bias"), &[fan_out], ParamKind::Bias);
        Self { w, b, fan_in, fan_out }
    }

    pub fn shifted(&self, by: usize) -> Self {
        Self {
            w: self.w.start + by..self.w.end + by,
            b: self.b.start + by..self.b.end + by,
            ..*self
        }
    }
}

#[derive(Clone, Debug)]
pub struct NormIdx {
    pub g: Range<usize>,
    pub b: Range<usize>,
    pub dim: usize,
}

impl NormIdx {
    pub fn declare(layout: &mut ParamLayout, name: &str, dim: usize) -> Self {
        let g = layout.push(format!("{name}.gain"), &[dim], ParamKind::NormGain);
        let b = layout.push(format!("{name}.bias"), &[dim], ParamKind::NormBias);
        Self { g, b, dim }
    }
}
