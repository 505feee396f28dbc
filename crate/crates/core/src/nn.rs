//! Dense building blocks with hand-written backward passes. All activations
//! are row-major `rows × width` matrices stored in flat vectors.

use crate::geometry::AttnMask;
use crate::params::{LinearIdx, NormIdx, ParamLayout};
use crate::real::{gemm, MatMut, MatRef, Real};
use rand::RngCore;

use crate::rng::StreamRng;

pub const LN_EPS: f64 = 1e-5;

pub fn linear_fwd<T: Real>(p: &[T], idx: &LinearIdx, x: &[T], rows: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * idx.fan_out);
    let b = &p[idx.b.clone()];
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    gemm(
        MatRef::new(x, rows, idx.fan_in),
        MatRef::new(&p[idx.w.clone()], idx.fan_in, idx.fan_out),
        MatMut::new(&mut y, rows, idx.fan_out),
        true,
    );
    y
}

/// Accumulates weight and bias gradients into `g`; returns `dx` when asked.
pub fn linear_bwd<T: Real>(
    p: &[T],
    idx: &LinearIdx,
    x: &[T],
    dy: &[T],
    rows: usize,
    g: &mut [T],
    want_dx: bool,
) -> Option<Vec<T>> {
    gemm(
        MatRef::new(x, rows, idx.fan_in).t(),
        MatRef::new(dy, rows, idx.fan_out),
        MatMut::new(&mut g[idx.w.clone()], idx.fan_in, idx.fan_out),
        true,
    );
    let gb = &mut g[idx.b.clone()];
    for r in 0..rows {
        for (acc, &d) in gb.iter_mut().zip(&dy[r * idx.fan_out..(r + 1) * idx.fan_out]) {
            *acc += d;
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * idx.fan_in];
        gemm(
            MatRef::new(dy, rows, idx.fan_out),
            MatRef::new(&p[idx.w.clone()], idx.fan_in, idx.fan_out).t(),
            MatMut::new(&mut dx, rows, idx.fan_in),
            false,
        );
        dx
    })
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer normalization over the last axis; parameter-free when `idx` is None.
pub fn layernorm_fwd<T: Real>(p: &[T], idx: Option<&NormIdx>, x: &[T], dim: usize) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / dim;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_dim = T::one() / T::c(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() * inv_dim;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_dim;
        let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
        for (o, &v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    let y = match idx {
        Some(idx) => {
            let (gain, bias) = (&p[idx.g.clone()], &p[idx.b.clone()]);
            xhat.chunks_exact(dim)
                .flat_map(|row| row.iter().zip(gain).zip(bias).map(|((&h, &g), &b)| h * g + b))
                .collect()
        }
        None => xhat.clone(),
    };
    (y, NormCache { xhat, rstd })
}

pub fn layernorm_bwd<T: Real>(
    p: &[T],
    idx: Option<&NormIdx>,
    cache: &NormCache<T>,
    dy: &[T],
    dim: usize,
    g: Option<&mut [T]>,
) -> Vec<T> {
    let rows = dy.len() / dim;
    let mut dxhat = dy.to_vec();
    if let Some(idx) = idx {
        let gain = &p[idx.g.clone()];
        if let Some(g) = g {
            for r in 0..rows {
                for c in 0..dim {
                    let d = dy[r * dim + c];
                    g[idx.g.start + c] += d * cache.xhat[r * dim + c];
                    g[idx.b.start + c] += d;
                }
            }
        }
        for row in dxhat.chunks_exact_mut(dim) {
            for (v, &gg) in row.iter_mut().zip(gain) {
                *v *= gg;
            }
        }
    }
    let inv_dim = T::one() / T::c(dim as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for r in 0..rows {
        let dh = &dxhat[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mean_dh = dh.iter().copied().sum::<T>() * inv_dim;
        let mean_dhx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_dim;
        let rs = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = rs * (dh[c] - mean_dh - xh[c] * mean_dhx);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let u = T::c(GELU_K) * (x + T::c(0.044715) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::c(0.5);
    let u = T::c(GELU_K) * (x + T::c(0.044715) * x * x * x);
    let t = u.tanh();
    let du = T::c(GELU_K) * (T::one() + T::c(3.0 * 0.044715) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Per-element keep scales (`0` or `1/(1-p)`), or None when dropout is off.
pub fn dropout_mask<T: Real>(len: usize, p: f64, rng: Option<&mut StreamRng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = T::c(1.0 / (1.0 - p));
    let cut = drop_threshold(p);
    Some((0..len).map(|_| if (rng.next_u32() as u64) < cut { T::zero() } else { keep }).collect())
}

/// Draws below this 32-bit value drop an element.
fn drop_threshold(p: f64) -> u64 {
    (p * 4_294_967_296.0).round() as u64
}

/// Dropout over attention probabilities of `heads` stacked `t × t` maps;
/// only entries the mask allows consume a draw (the rest are zero anyway).
pub fn attn_dropout_mask<T: Real>(heads: usize, mask: &AttnMask, p: f64, rng: Option<&mut StreamRng>) -> Option<Vec<T>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let t = mask.size();
    let keep = T::c(1.0 / (1.0 - p));
    let cut = drop_threshold(p);
    let mut out = vec![T::zero(); heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            let row = &mut out[(h * t + i) * t..(h * t + i + 1) * t];
            for (v, &ok) in row.iter_mut().zip(mask.row(i)) {
                if ok && (rng.next_u32() as u64) >= cut {
                    *v = keep;
                }
            }
        }
    }
    Some(out)
}

pub fn apply_mask<T: Real>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct DropoutRates {
    pub attn: f64,
    pub resid: f64,
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))` with
/// a 4x GELU feed-forward.
#[derive(Clone, Debug)]
pub struct BlockIdx {
    pub ln1: NormIdx,
    pub qkv: LinearIdx,
    pub proj: LinearIdx,
    pub ln2: NormIdx,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
    pub d: usize,
    pub heads: usize,
}

pub struct BlockCache<T> {
    h1: Vec<T>,
    n1: NormCache<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    pmask: Option<Vec<T>>,
    att: Vec<T>,
    proj_mask: Option<Vec<T>>,
    h2: Vec<T>,
    n2: NormCache<T>,
    pre: Vec<T>,
    act: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

impl BlockIdx {
    pub fn declare(layout: &mut ParamLayout, name: &str, d: usize, heads: usize) -> Self {
        Self {
            ln1: NormIdx::declare(layout, &format!("{name}.ln1"), d),
            qkv: LinearIdx::declare(layout, &format!("{name}.attn.qkv"), d, 3 * d),
            proj: LinearIdx::declare(layout, &format!("{name}.attn.proj"), d, d),
            ln2: NormIdx::declare(layout, &format!("{name}.ln2"), d),
            fc1: LinearIdx::declare(layout, &format!("{name}.mlp.fc1"), d, 4 * d),
            fc2: LinearIdx::declare(layout, &format!("{name}.mlp.fc2"), 4 * d, d),
            d,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn forward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        mask: &AttnMask,
        drop: DropoutRates,
        mut rng: Option<&mut StreamRng>,
    ) -> (Vec<T>, BlockCache<T>) {
        let (d, hd, nh) = (self.d, self.head_dim(), self.heads);
        let t = x.len() / d;
        assert_eq!(mask.size(), t, "mask size does not match sequence length");
        let scale = T::c(1.0 / (hd as f64).sqrt());

        let (h1, n1) = layernorm_fwd(p, Some(&self.ln1), x, d);
        let qkv = linear_fwd(p, &self.qkv, &h1, t);
        let mut probs = vec![T::zero(); nh * t * t];
        for h in 0..nh {
            let s = &mut probs[h * t * t..(h + 1) * t * t];
            gemm(
                MatRef::cols_of(&qkv, t, 3 * d, h * hd, hd),
                MatRef::cols_of(&qkv, t, 3 * d, d + h * hd, hd).t(),
                MatMut::new(s, t, t),
                false,
            );
            for i in 0..t {
                let row = &mut s[i * t..(i + 1) * t];
                let allowed = mask.row(i);
                let mut m = T::neg_infinity();
                for j in 0..t {
                    if allowed[j] {
                        row[j] *= scale;
                        m = m.max(row[j]);
                    }
                }
                let mut sum = T::zero();
                for j in 0..t {
                    if allowed[j] {
                        row[j] = (row[j] - m).exp();
                        sum += row[j];
                    } else {
                        row[j] = T::zero();
                    }
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let pmask = attn_dropout_mask::<T>(nh, mask, drop.attn, rng.as_deref_mut());
        let mut att = vec![T::zero(); t * d];
        {
            let mut dropped;
            let used: &[T] = match &pmask {
                Some(m) => {
                    dropped = probs.clone();
                    dropped.iter_mut().zip(m).for_each(|(v, &s)| *v *= s);
                    &dropped
                }
                None => &probs,
            };
            for h in 0..nh {
                gemm(
                    MatRef::new(&used[h * t * t..(h + 1) * t * t], t, t),
                    MatRef::cols_of(&qkv, t, 3 * d, 2 * d + h * hd, hd),
                    MatMut::cols_of(&mut att, t, d, h * hd, hd),
                    false,
                );
            }
        }
        let mut a_out = linear_fwd(p, &self.proj, &att, t);
        let proj_mask = dropout_mask::<T>(a_out.len(), drop.resid, rng.as_deref_mut());
        apply_mask(&mut a_out, &proj_mask);
        let x_mid: Vec<T> = x.iter().zip(&a_out).map(|(&a, &b)| a + b).collect();

        let (h2, n2) = layernorm_fwd(p, Some(&self.ln2), &x_mid, d);
        let pre = linear_fwd(p, &self.fc1, &h2, t);
        let act: Vec<T> = pre.iter().map(|&v| gelu(v)).collect();
        let mut f_out = linear_fwd(p, &self.fc2, &act, t);
        let ffn_mask = dropout_mask::<T>(f_out.len(), drop.resid, rng.as_deref_mut());
        apply_mask(&mut f_out, &ffn_mask);
        let out: Vec<T> = x_mid.iter().zip(&f_out).map(|(&a, &b)| a + b).collect();

        (
            out,
            BlockCache {
                h1,
                n1,
                qkv,
                probs,
                pmask,
                att,
                proj_mask,
                h2,
                n2,
                pre,
                act,
                ffn_mask,
            },
        )
    }

    pub fn backward<T: Real>(&self, p: &[T], cache: &BlockCache<T>, dout: &[T], g: &mut [T]) -> Vec<T> {
        let (d, hd, nh) = (self.d, self.head_dim(), self.heads);
        let t = dout.len() / d;
        let scale = T::c(1.0 / (hd as f64).sqrt());

        // feed-forward branch
        let mut df = dout.to_vec();
        apply_mask(&mut df, &cache.ffn_mask);
        let dact = linear_bwd(p, &self.fc2, &cache.act, &df, t, g, true).unwrap();
        let dpre: Vec<T> = dact.iter().zip(&cache.pre).map(|(&a, &x)| a * gelu_grad(x)).collect();
        let dh2 = linear_bwd(p, &self.fc1, &cache.h2, &dpre, t, g, true).unwrap();
        let dxm_ln = layernorm_bwd(p, Some(&self.ln2), &cache.n2, &dh2, d, Some(g));
        let dx_mid: Vec<T> = dout.iter().zip(&dxm_ln).map(|(&a, &b)| a + b).collect();

        // attention branch
        let mut da = dx_mid.clone();
        apply_mask(&mut da, &cache.proj_mask);
        let datt = linear_bwd(p, &self.proj, &cache.att, &da, t, g, true).unwrap();
        let mut dqkv = vec![T::zero(); t * 3 * d];
        let mut dp = vec![T::zero(); t * t];
        let mut used = vec![T::zero(); t * t];
        for h in 0..nh {
            let probs = &cache.probs[h * t * t..(h + 1) * t * t];
            used.copy_from_slice(probs);
            if let Some(m) = &cache.pmask {
                used.iter_mut().zip(&m[h * t * t..(h + 1) * t * t]).for_each(|(v, &s)| *v *= s);
            }
            // dV = P^T dO
            gemm(
                MatRef::new(&used, t, t).t(),
                MatRef::cols_of(&datt, t, d, h * hd, hd),
                MatMut::cols_of(&mut dqkv, t, 3 * d, 2 * d + h * hd, hd),
                false,
            );
            // dP = dO V^T
            gemm(
                MatRef::cols_of(&datt, t, d, h * hd, hd),
                MatRef::cols_of(&cache.qkv, t, 3 * d, 2 * d + h * hd, hd).t(),
                MatMut::new(&mut dp, t, t),
                false,
            );
            if let Some(m) = &cache.pmask {
                dp.iter_mut().zip(&m[h * t * t..(h + 1) * t * t]).for_each(|(v, &s)| *v *= s);
            }
            // softmax backward, folded with the score scale
            for i in 0..t {
                let pr = &probs[i * t..(i + 1) * t];
                let row = &mut dp[i * t..(i + 1) * t];
                let dot = pr.iter().zip(row.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (v, &pv) in row.iter_mut().zip(pr) {
                    *v = pv * (*v - dot) * scale;
                }
            }
            gemm(
                MatRef::new(&dp, t, t),
                MatRef::cols_of(&cache.qkv, t, 3 * d, d + h * hd, hd),
                MatMut::cols_of(&mut dqkv, t, 3 * d, h * hd, hd),
                false,
            );
            gemm(
                MatRef::new(&dp, t, t).t(),
                MatRef::cols_of(&cache.qkv, t, 3 * d, h * hd, hd),
                MatMut::cols_of(&mut dqkv, t, 3 * d, d + h * hd, hd),
                false,
            );
        }
        let dh1 = linear_bwd(p, &self.qkv, &cache.h1, &dqkv, t, g, true).unwrap();
        let dx_ln = layernorm_bwd(p, Some(&self.ln1), &cache.n1, &dh1, d, Some(g));
        dx_mid.iter().zip(&dx_ln).map(|(&a, &b)| a + b).collect()
    }

    /// Evaluation-mode forward of one new position given cached keys and
    /// values of all earlier positions (which it extends).
    pub fn step<T: Real>(&self, p: &[T], x: &[T], kv: &mut KvCache<T>) -> Vec<T> {
        let (d, hd, nh) = (self.d, self.head_dim(), self.heads);
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let (h1, _) = layernorm_fwd(p, Some(&self.ln1), x, d);
        let qkv = linear_fwd(p, &self.qkv, &h1, 1);
        kv.keys.extend_from_slice(&qkv[d..2 * d]);
        kv.values.extend_from_slice(&qkv[2 * d..]);
        let t = kv.keys.len() / d;
        let mut att = vec![T::zero(); d];
        let mut scores = vec![T::zero(); t];
        for h in 0..nh {
            let q = &qkv[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let k = &kv.keys[j * d + h * hd..j * d + (h + 1) * hd];
                *s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            softmax_in_place(&mut scores);
            let out = &mut att[h * hd..(h + 1) * hd];
            for (j, &s) in scores.iter().enumerate() {
                let v = &kv.values[j * d + h * hd..j * d + (h + 1) * hd];
                for (o, &vv) in out.iter_mut().zip(v) {
                    *o += s * vv;
                }
            }
        }
        let a_out = linear_fwd(p, &self.proj, &att, 1);
        let x_mid: Vec<T> = x.iter().zip(&a_out).map(|(&a, &b)| a + b).collect();
        let (h2, _) = layernorm_fwd(p, Some(&self.ln2), &x_mid, d);
        let act: Vec<T> = linear_fwd(p, &self.fc1, &h2, 1).into_iter().map(gelu).collect();
        let f_out = linear_fwd(p, &self.fc2, &act, 1);
        x_mid.iter().zip(&f_out).map(|(&a, &b)| a + b).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct KvCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
}
