use foresight::geometry::{
    block_causal_mask, coord_to_raster, neighborhood, neighborhood_1d, neighborhood_2d, raster_to_coord, AttnMask,
    GridShape, Layout,
};
use proptest::prelude::*;

/// Scores every future position by floating-point distance, then raster index.
fn oracle_2d(n: usize, k: usize, h: usize, w: usize) -> Vec<usize> {
    let (r0, c0) = ((n / w) as f64, (n % w) as f64);
    let mut all: Vec<(f64, usize)> = (n..h * w)
        .map(|j| {
            let (r, c) = ((j / w) as f64, (j % w) as f64);
            (((r - r0).powi(2) + (c - c0).powi(2)).sqrt(), j)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, j)| j).collect()
}

#[test]
fn matches_oracle_on_every_shape_up_to_16() {
    for h in 1..=16 {
        for w in 1..=16 {
            let shape = GridShape::new(h, w).unwrap();
            for k in [1, 3, 4, 9] {
                for n in 0..h * w {
                    assert_eq!(neighborhood_2d(n, k, shape).unwrap().targets, oracle_2d(n, k, h, w), "{h}x{w} n={n} k={k}");
                }
            }
        }
    }
}

#[test]
fn worked_examples() {
    let s = GridShape::new(4, 4).unwrap();
    assert_eq!(neighborhood_2d(5, 3, s).unwrap().targets, vec![5, 6, 9]);
    assert_eq!(neighborhood_2d(7, 3, s).unwrap().targets, vec![7, 11, 10]);
    assert_eq!(neighborhood_2d(15, 3, s).unwrap().targets, vec![15]);
    assert_eq!(neighborhood_2d(5, 4, s).unwrap().targets, vec![5, 6, 9, 8]);
    assert_eq!(neighborhood_1d(14, 3, 16).unwrap().targets, vec![14, 15]);
    assert!(neighborhood_2d(16, 1, s).is_err());
    assert!(neighborhood_2d(0, 0, s).is_err());
}

#[test]
fn block_masks_at_the_ends() {
    assert_eq!(block_causal_mask(9, 1).unwrap(), AttnMask::causal(9));
    assert_eq!(block_causal_mask(9, 9).unwrap(), AttnMask::full(9));
    assert!(block_causal_mask(9, 0).is_err());
    assert!(block_causal_mask(9, 10).is_err());
}

#[test]
fn block_masks_need_not_nest_without_divisibility() {
    let b2 = block_causal_mask(5, 2).unwrap();
    let b3 = block_causal_mask(5, 3).unwrap();
    assert!(b2.allowed(2, 3) && !b3.allowed(2, 3));
    assert!(!b2.is_subset_of(&b3));
}

proptest! {
    #[test]
    fn coords_roundtrip(h in 1usize..20, w in 1usize..20, seed in any::<usize>()) {
        let shape = GridShape::new(h, w).unwrap();
        let n = seed % (h * w);
        let c = raster_to_coord(n, shape).unwrap();
        prop_assert_eq!(coord_to_raster(c, shape).unwrap(), n);
    }

    #[test]
    fn targets_lie_in_the_future(h in 1usize..17, w in 1usize..17, k in 1usize..12, seed in any::<usize>(), grid in any::<bool>()) {
        let shape = GridShape::new(h, w).unwrap();
        let n = seed % (h * w);
        let layout = if grid { Layout::Grid } else { Layout::Raster };
        let nb = neighborhood(n, k, shape, layout).unwrap();
        prop_assert_eq!(nb.targets[0], n);
        prop_assert!(nb.targets.iter().all(|&j| j >= n && j < h * w));
        prop_assert_eq!(nb.targets.len(), k.min(h * w - n));
        let mut uniq = nb.targets.clone();
        uniq.sort_unstable();
        uniq.dedup();
        prop_assert_eq!(uniq.len(), nb.targets.len());
    }

    #[test]
    fn layouts_agree_at_k1(h in 1usize..17, w in 1usize..17, seed in any::<usize>()) {
        let shape = GridShape::new(h, w).unwrap();
        let n = seed % (h * w);
        prop_assert_eq!(neighborhood(n, 1, shape, Layout::Grid).unwrap().targets, vec![n]);
        prop_assert_eq!(neighborhood(n, 1, shape, Layout::Raster).unwrap().targets, vec![n]);
    }

    #[test]
    fn block_masks_nest_when_sizes_divide(len in 1usize..40, a in any::<usize>(), m in 1usize..6) {
        let lo = 1 + a % len;
        let hi = (lo * m).min(len);
        let small = block_causal_mask(len, lo).unwrap();
        let large = block_causal_mask(len, hi).unwrap();
        prop_assert!(AttnMask::causal(len).is_subset_of(&small));
        prop_assert!(small.is_subset_of(&AttnMask::full(len)));
        if hi % lo == 0 {
            prop_assert!(small.is_subset_of(&large));
        }
    }
}
