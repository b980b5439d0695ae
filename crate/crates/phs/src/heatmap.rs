//! Per-head CLS attention maps at patch resolution.

use std::fs;
use std::path::{Path, PathBuf};

use phs_core::headselect::HeadSelection;
use phs_core::vit::AttentionState;

use crate::error::{PhsError, Result};
use crate::manifest::encode_pgm_bytes;

/// CLS-row attention of `head` over the patches as a `grid_height ×
/// grid_width` grid. Cell `(r, c)` is attention column `1 + R + r·gw + c`.
pub fn attention_grid(state: &AttentionState, head: usize) -> Vec<Vec<f64>> {
    state
        .cls_patch_row(head)
        .chunks(state.grid_width)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Min-max normalization to 8-bit gray; a flat grid maps to 128.
pub fn normalize(grid: &[Vec<f64>]) -> Vec<u8> {
    let flat: Vec<f64> = grid.iter().flatten().copied().collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; flat.len()];
    }
    flat.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

/// Writes `head_XX.pgm` for every head and `selected.pgm`, the sum of the
/// selected heads' grids (all heads without a selection). Returns the paths
/// in that order.
pub fn emit_attention_heatmaps(
    state: &AttentionState,
    selection: Option<&HeadSelection>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| PhsError::io(out_dir, e))?;
    let (gh, gw) = (state.grid_height, state.grid_width);
    let mut paths = Vec::new();
    let mut combined = vec![vec![0.0; gw]; gh];
    for i in 0..state.num_heads() {
        let grid = attention_grid(state, i);
        if selection.is_none_or(|s| s.contains(i)) {
            for (acc, row) in combined.iter_mut().zip(&grid) {
                acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
        }
        let path = out_dir.join(format!("head_{i:02}.pgm"));
        write_pgm(&path, &normalize(&grid), gw, gh)?;
        paths.push(path);
    }
    let path = out_dir.join("selected.pgm");
    write_pgm(&path, &normalize(&combined), gw, gh)?;
    paths.push(path);
    Ok(paths)
}

fn write_pgm(path: &Path, raw: &[u8], w: usize, h: usize) -> Result<()> {
    fs::write(path, encode_pgm_bytes(raw, w, h)?).map_err(|e| PhsError::io(path, e))
}
