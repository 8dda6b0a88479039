//! Patch-grid images of scores and selections as binary PGM (`P5`, maxval
//! 255). Pixel `(r, c)` shows the token with original index `r * cols + c`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::SelectionResult;

pub const LEVEL_VISUAL: u8 = 255;
pub const LEVEL_TEXT: u8 = 170;
pub const LEVEL_MERGED: u8 = 85;

pub enum GridInput<'a> {
    /// Scores in original-index order, drawn min-max scaled.
    Heat(&'a [f64]),
    /// Kept / recovered / merged classes from a selection.
    Mask(&'a SelectionResult),
}

pub fn heat_pixels(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    values
        .iter()
        .map(|&x| if span > 0.0 { ((x - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

pub fn mask_pixels(selection: &SelectionResult, n: usize) -> Result<Vec<u8>> {
    let mut px = vec![0u8; n];
    let groups = [
        (&selection.visual_kept, LEVEL_VISUAL),
        (&selection.text_recovered, LEVEL_TEXT),
        (&selection.background, LEVEL_MERGED),
    ];
    for (indices, level) in groups {
        for &i in indices.iter() {
            *px.get_mut(i).ok_or_else(|| {
                Error::DimensionMismatch(format!("original index {i} lies outside a {n}-token grid"))
            })? = level;
        }
    }
    Ok(px)
}

pub fn encode_pgm(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), rows * cols);
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Renders `input` on a `rows × cols` grid into PGM bytes.
pub fn render_grid_bytes(input: GridInput<'_>, grid: Option<(usize, usize)>) -> Result<Vec<u8>> {
    let (rows, cols) = grid.ok_or(Error::MissingGrid)?;
    let n = rows * cols;
    let pixels = match input {
        GridInput::Heat(values) => {
            if values.len() != n {
                return Err(Error::GridMismatch { rows, cols, n: values.len() });
            }
            heat_pixels(values)
        }
        GridInput::Mask(sel) => {
            let covered = sel.visual_kept.len() + sel.text_recovered.len() + sel.background.len();
            if covered != n {
                return Err(Error::GridMismatch { rows, cols, n: covered });
            }
            mask_pixels(sel, n)?
        }
    };
    Ok(encode_pgm(rows, cols, &pixels))
}

pub fn render_grid(input: GridInput<'_>, grid: Option<(usize, usize)>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = render_grid_bytes(input, grid)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
