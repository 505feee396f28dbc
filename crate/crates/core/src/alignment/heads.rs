//! Projection heads mapping decoder states to the foresight feature space.
//! Used only during training; sampling never touches them.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_domain, Result};
use crate::geometry::AttnMask;
use crate::nn::{self, BlockCache, BlockIdx, DropoutRates};
use crate::params::{LinearIdx, ParamLayout};
use crate::real::Real;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear–SiLU–Linear–SiLU–Linear.
    #[default]
    Mlp,
    /// Pre-norm 4-head attention block followed by a linear map.
    TransformerBlock,
}

const HEAD_ATTN_HEADS: usize = 4;

#[derive(Clone, Debug)]
enum HeadIdx {
    Mlp { fc1: LinearIdx, fc2: LinearIdx, fc3: LinearIdx },
    Block { block: BlockIdx, out: LinearIdx },
}

pub enum HeadCache<T> {
    Mlp {
        x: Vec<T>,
        pre1: Vec<T>,
        act1: Vec<T>,
        pre2: Vec<T>,
        act2: Vec<T>,
    },
    Block {
        cache: BlockCache<T>,
        mixed: Vec<T>,
    },
}

#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub kind: HeadKind,
    pub layout: ParamLayout,
    heads: Vec<HeadIdx>,
    pub d_in: usize,
    pub d_out: usize,
}

impl ProjectionHeads {
    pub fn new(kind: HeadKind, count: usize, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        ensure_domain!(count >= 1, "need at least one projection head");
        ensure_domain!(d_in >= 1 && d_out >= 1, "head widths must be positive");
        let mut layout = ParamLayout::new();
        let heads = (0..count)
            .map(|k| {
                let name = format!("proj.{k}");
                Ok(match kind {
                    HeadKind::Mlp => {
                        ensure_domain!(hidden >= 1, "MLP head hidden width must be positive");
                        HeadIdx::Mlp {
                            fc1: LinearIdx::declare(&mut layout, &format!("{name}.fc1"), d_in, hidden),
                            fc2: LinearIdx::declare(&mut layout, &format!("{name}.fc2"), hidden, hidden),
                            fc3: LinearIdx::declare(&mut layout, &format!("{name}.fc3"), hidden, d_out),
                        }
                    }
                    HeadKind::TransformerBlock => {
                        ensure_domain!(
                            d_in % HEAD_ATTN_HEADS == 0,
                            "transformer head needs input width divisible by {HEAD_ATTN_HEADS}"
                        );
                        HeadIdx::Block {
                            block: BlockIdx::declare(&mut layout, &format!("{name}.block"), d_in, HEAD_ATTN_HEADS),
                            out: LinearIdx::declare(&mut layout, &format!("{name}.out"), d_in, d_out),
                        }
                    }
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            layout,
            heads,
            d_in,
            d_out,
        })
    }

    pub fn count(&self) -> usize {
        self.heads.len()
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn init<T: Real>(&self, seed: u64, std: f64) -> Vec<T> {
        self.layout.init(std, &mut rng::stream(seed, &[0x4EAD]))
    }

    /// Parameters making every transformer-kind head the identity map
    /// (requires `d_in == d_out`).
    pub fn identity_params<T: Real>(&self) -> Result<Vec<T>> {
        ensure_domain!(self.kind == HeadKind::TransformerBlock, "only transformer heads can represent the identity");
        ensure_domain!(self.d_in == self.d_out, "identity needs equal input and output widths");
        let mut p = self.init::<T>(0, 0.02);
        for h in &self.heads {
            if let HeadIdx::Block { block, out } = h {
                p[block.proj.w.clone()].iter_mut().for_each(|x| *x = T::zero());
                p[block.fc2.w.clone()].iter_mut().for_each(|x| *x = T::zero());
                let w = &mut p[out.w.clone()];
                w.iter_mut().for_each(|x| *x = T::zero());
                for i in 0..self.d_in {
                    w[i * self.d_out + i] = T::one();
                }
            }
        }
        Ok(p)
    }

    /// Applies head `k` to every row of `x` (`rows × d_in`).
    pub fn forward<T: Real>(&self, p: &[T], k: usize, x: &[T]) -> Result<(Vec<T>, HeadCache<T>)> {
        ensure_domain!(x.len() % self.d_in == 0, "input width does not match head width {}", self.d_in);
        let rows = x.len() / self.d_in;
        Ok(match &self.heads[k] {
            HeadIdx::Mlp { fc1, fc2, fc3 } => {
                let pre1 = nn::linear_fwd(p, fc1, x, rows);
                let act1: Vec<T> = pre1.iter().map(|&v| nn::silu(v)).collect();
                let pre2 = nn::linear_fwd(p, fc2, &act1, rows);
                let act2: Vec<T> = pre2.iter().map(|&v| nn::silu(v)).collect();
                let y = nn::linear_fwd(p, fc3, &act2, rows);
                (
                    y,
                    HeadCache::Mlp {
                        x: x.to_vec(),
                        pre1,
                        act1,
                        pre2,
                        act2,
                    },
                )
            }
            HeadIdx::Block { block, out } => {
                let (mixed, cache) = block.forward(p, x, &AttnMask::causal(rows), DropoutRates::default(), None);
                let y = nn::linear_fwd(p, out, &mixed, rows);
                (y, HeadCache::Block { cache, mixed })
            }
        })
    }

    pub fn backward<T: Real>(&self, p: &[T], k: usize, cache: &HeadCache<T>, dy: &[T], g: &mut [T]) -> Vec<T> {
        let rows = dy.len() / self.d_out;
        match (&self.heads[k], cache) {
            (HeadIdx::Mlp { fc1, fc2, fc3 }, HeadCache::Mlp { x, pre1, act1, pre2, act2 }) => {
                let da2 = nn::linear_bwd(p, fc3, act2, dy, rows, g, true).unwrap();
                let dp2: Vec<T> = da2.iter().zip(pre2).map(|(&a, &z)| a * nn::silu_grad(z)).collect();
                let da1 = nn::linear_bwd(p, fc2, act1, &dp2, rows, g, true).unwrap();
                let dp1: Vec<T> = da1.iter().zip(pre1).map(|(&a, &z)| a * nn::silu_grad(z)).collect();
                nn::linear_bwd(p, fc1, x, &dp1, rows, g, true).unwrap()
            }
            (HeadIdx::Block { block, out }, HeadCache::Block { cache, mixed }) => {
                let dm = nn::linear_bwd(p, out, mixed, dy, rows, g, true).unwrap();
                block.backward(p, cache, &dm, g)
            }
            _ => unreachable!("cache kind always matches head kind"),
        }
    }
}
