//! Raster order, grid coordinates, future neighborhoods and attention masks.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_domain, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        ensure_domain!(height >= 1 && width >= 1, "grid shape {height}x{width} must be at least 1x1");
        Ok(Self { height, width })
    }

    /// Number of tokens in the grid.
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridCoord {
    pub row: usize,
    pub col: usize,
}

pub fn raster_to_coord(n: usize, shape: GridShape) -> Result<GridCoord> {
    ensure_domain!(n < shape.len(), "raster index {n} outside grid of {} tokens", shape.len());
    Ok(GridCoord {
        row: n / shape.width,
        col: n % shape.width,
    })
}

pub fn coord_to_raster(coord: GridCoord, shape: GridShape) -> Result<usize> {
    ensure_domain!(
        coord.row < shape.height && coord.col < shape.width,
        "coordinate ({}, {}) outside {}x{} grid",
        coord.row,
        coord.col,
        shape.height,
        shape.width
    );
    Ok(coord.row * shape.width + coord.col)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Next positions in raster-scan order.
    #[serde(rename = "1d")]
    Raster,
    /// Nearest future positions on the 2D grid.
    #[serde(rename = "2d")]
    Grid,
}

/// Ordered future targets of one anchor position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    pub anchor: usize,
    pub targets: Vec<usize>,
}

pub fn neighborhood_1d(n: usize, k: usize, len: usize) -> Result<Neighborhood> {
    ensure_domain!(n < len, "anchor {n} outside sequence of length {len}");
    ensure_domain!(k >= 1, "neighborhood size must be positive");
    let end = (n + k).min(len);
    Ok(Neighborhood {
        anchor: n,
        targets: (n..end).collect(),
    })
}

/// The `k` future positions (`j >= n`) closest to `n` on the grid, ordered by
/// squared Euclidean distance and then raster index. Short near the end.
pub fn neighborhood_2d(n: usize, k: usize, shape: GridShape) -> Result<Neighborhood> {
    let anchor = raster_to_coord(n, shape)?;
    ensure_domain!(k >= 1, "neighborhood size must be positive");
    // (squared distance, raster index), kept sorted, at most k long.
    let mut best: Vec<(usize, usize)> = Vec::with_capacity(k + 1);
    for j in n..shape.len() {
        let (r, c) = (j / shape.width, j % shape.width);
        let dr = r.abs_diff(anchor.row);
        let dc = c.abs_diff(anchor.col);
        let key = (dr * dr + dc * dc, j);
        if best.len() == k && key >= best[k - 1] {
            continue;
        }
        let at = best.partition_point(|probe| *probe < key);
        best.insert(at, key);
        best.truncate(k);
    }
    Ok(Neighborhood {
        anchor: n,
        targets: best.into_iter().map(|(_, j)| j).collect(),
    })
}

pub fn neighborhood(n: usize, k: usize, shape: GridShape, layout: Layout) -> Result<Neighborhood> {
    match layout {
        Layout::Raster => neighborhood_1d(n, k, shape.len()),
        Layout::Grid => neighborhood_2d(n, k, shape),
    }
}

/// Neighborhoods for every anchor of the grid, in raster order.
pub fn all_neighborhoods(k: usize, shape: GridShape, layout: Layout) -> Result<Vec<Neighborhood>> {
    (0..shape.len()).map(|n| neighborhood(n, k, shape, layout)).collect()
}

/// Square boolean attention mask; `allowed(i, j)` means query `i` may read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for i in 0..size {
            for j in 0..size {
                allowed.push(f(i, j));
            }
        }
        Self { size, allowed }
    }

    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |i, j| j <= i)
    }

    pub fn full(size: usize) -> Self {
        Self::from_fn(size, |_, _| true)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.size..(i + 1) * self.size]
    }

    /// Mask over `[condition prefix] + tokens`: the prefix slot is visible to
    /// every query and itself sees only the slot itself.
    pub fn with_prefix(&self) -> Self {
        Self::from_fn(self.size + 1, |i, j| match (i, j) {
            (_, 0) => true,
            (0, _) => false,
            (i, j) => self.allowed(i - 1, j - 1),
        })
    }

    pub fn is_subset_of(&self, other: &AttnMask) -> bool {
        self.size == other.size && self.allowed.iter().zip(&other.allowed).all(|(&a, &b)| !a || b)
    }
}

/// `allowed(i, j) = j / block <= i / block` over raster indices.
pub fn block_causal_mask(len: usize, block: usize) -> Result<AttnMask> {
    ensure_domain!(
        block >= 1 && block <= len,
        "block size {block} must lie in [1, {len}]"
    );
    Ok(AttnMask::from_fn(len, |i, j| j / block <= i / block))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    #[test]
    fn raster_coords() {
        assert_eq!(raster_to_coord(0, s(4, 4)).unwrap(), GridCoord { row: 0, col: 0 });
        assert_eq!(raster_to_coord(4, s(4, 4)).unwrap(), GridCoord { row: 1, col: 0 });
        assert_eq!(raster_to_coord(7, s(4, 4)).unwrap(), GridCoord { row: 1, col: 3 });
        assert!(raster_to_coord(16, s(4, 4)).is_err());
        assert!(GridShape::new(0, 3).is_err());
    }

    #[test]
    fn one_d_windows() {
        assert_eq!(neighborhood_1d(5, 3, 16).unwrap().targets, vec![5, 6, 7]);
        assert_eq!(neighborhood_1d(15, 3, 16).unwrap().targets, vec![15]);
        assert_eq!(neighborhood_1d(14, 3, 16).unwrap().targets, vec![14, 15]);
        assert!(neighborhood_1d(16, 3, 16).is_err());
        assert!(neighborhood_1d(0, 0, 16).is_err());
    }

    #[test]
    fn two_d_neighbors() {
        let g = s(4, 4);
        assert_eq!(neighborhood_2d(5, 3, g).unwrap().targets, vec![5, 6, 9]);
        assert_eq!(neighborhood_2d(7, 3, g).unwrap().targets, vec![7, 11, 10]);
        assert_eq!(neighborhood_2d(15, 3, g).unwrap().targets, vec![15]);
        // the two sqrt(2) candidates of anchor 5 are 8 and 10; the smaller wins
        assert_eq!(neighborhood_2d(5, 4, g).unwrap().targets, vec![5, 6, 9, 8]);
    }

    #[test]
    fn k1_layouts_agree() {
        let g = s(3, 5);
        for n in 0..g.len() {
            assert_eq!(neighborhood_2d(n, 1, g).unwrap().targets, vec![n]);
            assert_eq!(neighborhood_1d(n, 1, g.len()).unwrap().targets, vec![n]);
        }
    }

    #[test]
    fn block_masks() {
        assert_eq!(block_causal_mask(4, 4).unwrap(), AttnMask::full(4));
        assert_eq!(block_causal_mask(4, 1).unwrap(), AttnMask::causal(4));
        let m = block_causal_mask(4, 2).unwrap();
        assert_eq!(m.row(0), &[true, true, false, false]);
        assert_eq!(m.row(1), &[true, true, false, false]);
        assert_eq!(m.row(2), &[true; 4]);
        assert_eq!(m.row(3), &[true; 4]);
        assert!(block_causal_mask(4, 0).is_err());
        assert!(block_causal_mask(4, 5).is_err());
    }

    #[test]
    fn prefix_mask_keeps_causality() {
        let m = AttnMask::causal(3).with_prefix();
        assert_eq!(m, AttnMask::causal(4));
    }
}
