//! 2D axial rotary position phases for image-token grids.
//!
//! Each attention head splits its dimensions in half: pairs in the first
//! half rotate by an angle proportional to the token's grid row, pairs in
//! the second half by its column. Angles are stored per token, so copying
//! latent rows into a branch carries the positions along exactly — the
//! branch keeps the phases of the grid cells it was cut from.

use ndarray::Array2;

use crate::error::{Error, Result};

const ROPE_BASE: f64 = 10000.0;

/// Per-token rotation angles, one column per rotated pair of a head.
///
/// Layout: `pairs_row` row-driven angles first, then `pairs_col`
/// column-driven angles. All heads share the same angles.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryPhases {
    pub angles: Array2<f64>,
    pub pairs_row: usize,
    pub pairs_col: usize,
}

impl RotaryPhases {
    /// Identity phases: no rotated pairs. Useful for unit-level streams
    /// that need the image-stream contract without a grid.
    pub fn none(tokens: usize) -> Self {
        RotaryPhases {
            angles: Array2::zeros((tokens, 0)),
            pairs_row: 0,
            pairs_col: 0,
        }
    }

    /// Phases for a full `grid_height x grid_width` grid, row-major.
    ///
    /// `head_dim` decides how many pairs each axis gets: `head_dim / 4`
    /// per axis (leftover dimensions stay unrotated).
    pub fn for_grid(grid_height: usize, grid_width: usize, head_dim: usize) -> Self {
        let pairs_per_axis = head_dim / 4;
        let n = grid_height * grid_width;
        let mut angles = Array2::zeros((n, 2 * pairs_per_axis));
        for r in 0..grid_height {
            for c in 0..grid_width {
                let tok = r * grid_width + c;
                for p in 0..pairs_per_axis {
                    let freq = ROPE_BASE.powf(-(p as f64) / pairs_per_axis.max(1) as f64);
                    angles[[tok, p]] = r as f64 * freq;
                    angles[[tok, pairs_per_axis + p]] = c as f64 * freq;
                }
            }
        }
        RotaryPhases {
            angles,
            pairs_row: pairs_per_axis,
            pairs_col: pairs_per_axis,
        }
    }

    pub fn token_count(&self) -> usize {
        self.angles.nrows()
    }

    /// Exact copy of the phase rows at `indices` (branch inheritance).
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        RotaryPhases {
            angles: self.angles.select(ndarray::Axis(0), indices),
            pairs_row: self.pairs_row,
            pairs_col: self.pairs_col,
        }
    }
}

/// Rotates the per-head pair dimensions of `x` by the stored angles.
///
/// Within each head of width `head_dim`: pair `p < pairs_row` occupies
/// dims `(2p, 2p+1)`; pair `p` of the column half occupies
/// `(head_dim/2 + 2p, head_dim/2 + 2p + 1)`.
pub fn apply_rotation(x: &Array2<f64>, phases: &RotaryPhases, heads: usize) -> Result<Array2<f64>> {
    if phases.angles.nrows() != x.nrows() {
        return Err(Error::Shape(format!(
            "phase rows {} != token rows {}",
            phases.angles.nrows(),
            x.nrows()
        )));
    }
    let total_pairs = phases.pairs_row + phases.pairs_col;
    if total_pairs == 0 {
        return Ok(x.clone());
    }
    let d = x.ncols();
    if !d.is_multiple_of(heads) {
        return Err(Error::Shape(format!(
            "width {d} not divisible by {heads} heads"
        )));
    }
    let head_dim = d / heads;
    if 2 * phases.pairs_row > head_dim / 2 || 2 * phases.pairs_col > head_dim - head_dim / 2 {
        return Err(Error::Shape(format!(
            "{} phase pairs do not fit head_dim {head_dim}",
            total_pairs
        )));
    }
    let half = head_dim / 2;
    let mut out = x.clone();
    for tok in 0..x.nrows() {
        for h in 0..heads {
            let base = h * head_dim;
            for p in 0..phases.pairs_row {
                let theta = phases.angles[[tok, p]];
                let (sin, cos) = theta.sin_cos();
                let i = base + 2 * p;
                let (a, b) = (x[[tok, i]], x[[tok, i + 1]]);
                out[[tok, i]] = a * cos - b * sin;
                out[[tok, i + 1]] = a * sin + b * cos;
            }
            for p in 0..phases.pairs_col {
                let theta = phases.angles[[tok, phases.pairs_row + p]];
                let (sin, cos) = theta.sin_cos();
                let i = base + half + 2 * p;
                let (a, b) = (x[[tok, i]], x[[tok, i + 1]]);
                out[[tok, i]] = a * cos - b * sin;
                out[[tok, i + 1]] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}
