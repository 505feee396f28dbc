//! Binary PGM (P5) rendering of token grids.

use std::path::Path;

use crate::corpus::TokenGrid;
use crate::error::{ensure_domain, Error, Result};

/// Pixel value of `token`: `floor(255 · token / (V − 1))`.
pub fn token_gray(token: u16, vocab_size: usize) -> u8 {
    ((255 * token as usize) / (vocab_size - 1)) as u8
}

pub fn encode_pgm(grid: &TokenGrid, height: usize, width: usize, vocab_size: usize) -> Result<Vec<u8>> {
    ensure_domain!(vocab_size >= 2, "vocabulary must have at least two tokens");
    ensure_domain!(grid.tokens.len() == height * width, "grid does not match {height}x{width}");
    ensure_domain!(grid.tokens.iter().all(|&t| (t as usize) < vocab_size), "token outside vocabulary");
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(grid.tokens.iter().map(|&t| token_gray(t, vocab_size)));
    Ok(out)
}

pub fn render_grid(grid: &TokenGrid, height: usize, width: usize, vocab_size: usize, path: &Path) -> Result<()> {
    let bytes = encode_pgm(grid, height, width, vocab_size)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
