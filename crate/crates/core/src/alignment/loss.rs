use crate::error::{ensure_domain, Error, Result};
use crate::real::Real;

pub const COSINE_EPS: f64 = 1e-8;

/// One alignment pair: projection head `slot` applied at `anchor` is
/// compared with target row `target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignPair {
    pub anchor: usize,
    pub slot: usize,
    pub target: usize,
}

/// Negative mean cosine similarity between projected states and targets.
///
/// `projected[slot]` holds the `rows × width` output of head `slot`;
/// `targets` is `target_rows × width`. Returns the loss and its gradient
/// w.r.t. each head's output (targets receive no gradient).
pub fn cosine_alignment_loss<T: Real>(
    projected: &[Vec<T>],
    targets: &[T],
    pairs: &[AlignPair],
    width: usize,
) -> Result<(f64, Vec<Vec<T>>)> {
    ensure_domain!(!pairs.is_empty(), "foresight loss needs at least one pair");
    let scale = 1.0 / pairs.len() as f64;
    let mut grads: Vec<Vec<T>> = projected.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut total = 0.0;
    for pair in pairs {
        let p = &projected[pair.slot][pair.anchor * width..(pair.anchor + 1) * width];
        let f = &targets[pair.target * width..(pair.target + 1) * width];
        let dot: f64 = p.iter().zip(f).map(|(a, b)| a.f64() * b.f64()).sum();
        let pn = p.iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
        let fn_ = f.iter().map(|a| a.f64() * a.f64()).sum::<f64>().sqrt();
        let (pd, fd) = (pn.max(COSINE_EPS), fn_.max(COSINE_EPS));
        let cos = dot / (pd * fd);
        if !cos.is_finite() {
            return Err(Error::numeric("non-finite cosine similarity"));
        }
        total += cos;
        let g = &mut grads[pair.slot][pair.anchor * width..(pair.anchor + 1) * width];
        // d(-cos)/dp; the norm term vanishes when the guard is active
        let norm_term = if pn > COSINE_EPS { cos / (pn * pn) } else { 0.0 };
        for ((gv, &pv), &fv) in g.iter_mut().zip(p).zip(f) {
            *gv += T::c(-scale * (fv.f64() / (pd * fd) - norm_term * pv.f64()));
        }
    }
    Ok((-total * scale, grads))
}
