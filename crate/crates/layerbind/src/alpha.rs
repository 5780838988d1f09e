//! Foreground alpha estimation for branch blending.
//!
//! The matte for an occluding layer is read off the difference between the
//! branch tokens and the global latent in the same region:
//!
//! ```text
//! Z     = smooth( || (B - I_region) / (sigma_bg + eps) ||_2 ^ gamma )
//! alpha = screened-Poisson refinement of Z (max-normalized), clipped to [0, 1]
//! ```
//!
//! `sigma_bg` is the robust scale `1.4826 * MAD` of the latent values in a
//! background ring around the region. The refinement iterates
//!
//! ```text
//! alpha_{k+1} = (sum_{p in N4(alpha_k)} alpha_p + lambda * Z) / (4 + lambda)
//! ```
//!
//! with replicate boundary (out-of-grid neighbours clamp to the edge cell)
//! until the max-abs residual drops below `tol`. The iteration is a
//! contraction with factor `4 / (4 + lambda)`, so the residual shrinks
//! monotonically. Matted mode then applies Otsu thresholding over a 64-bin
//! histogram and fills interior holes by morphological reconstruction from
//! the border.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gaussian-consistency factor turning an MAD into a sigma estimate.
pub const MAD_SIGMA_FACTOR: f64 = 1.4826;

/// Histogram resolution for Otsu's method.
const OTSU_BINS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlphaParams {
    /// Saliency correction exponent.
    pub gamma: f64,
    /// Guard against a zero background scale.
    pub epsilon: f64,
    /// Data-term weight of the screened Poisson equation.
    pub lambda: f64,
    /// Max-abs residual stopping threshold.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for AlphaParams {
    fn default() -> Self {
        AlphaParams {
            gamma: 0.9,
            epsilon: 1e-6,
            lambda: 4.0,
            tol: 1e-4,
            max_iters: 200,
        }
    }
}

/// How a layer is blended into the latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    /// Paste the branch as-is (alpha = 1 everywhere).
    Direct,
    /// Use the refined alpha values directly.
    Soft,
    /// Otsu-thresholded, hole-filled 0/1 matte.
    Matted,
}

/// Per-token alpha over a region's bounding-box grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    /// `h x w` values in [0, 1]; 0/1 only in matted mode.
    pub values: Array2<f64>,
    pub mode: AlphaMode,
    /// False when the Poisson refinement hit `max_iters` before `tol`;
    /// the values are still usable.
    pub converged: bool,
    pub iterations: usize,
}

impl AlphaMask {
    pub fn full(h: usize, w: usize) -> Self {
        AlphaMask {
            values: Array2::from_elem((h, w), 1.0),
            mode: AlphaMode::Direct,
            converged: true,
            iterations: 0,
        }
    }
}

/// Median of a sample set (average of the middle two for even counts).
fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Median absolute deviation.
pub fn mad(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    let m = median(&mut s);
    let mut devs: Vec<f64> = samples.iter().map(|x| (x - m).abs()).collect();
    median(&mut devs)
}

/// Robust scale estimate: `1.4826 * MAD`.
pub fn robust_sigma(samples: &[f64]) -> f64 {
    MAD_SIGMA_FACTOR * mad(samples)
}

/// One pass of a 3x3 box filter with replicate borders.
fn box_smooth(z: &Array2<f64>) -> Array2<f64> {
    let (h, w) = z.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut acc = 0.0;
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                acc += z[[clamp(r as isize + dr, h), clamp(c as isize + dc, w)]];
            }
        }
        acc / 9.0
    })
}

/// Result of the screened-Poisson refinement.
#[derive(Debug, Clone)]
pub struct PoissonSolve {
    pub alpha: Array2<f64>,
    /// Max-abs update per iteration, in order.
    pub residuals: Vec<f64>,
    pub converged: bool,
}

/// Damped Jacobi iteration for `(4 + lambda) a - sum_N4(a) = lambda z`
/// with replicate boundary, started at `a_0 = z`.
pub fn screened_poisson(z: &Array2<f64>, lambda: f64, tol: f64, max_iters: usize) -> PoissonSolve {
    let (h, w) = z.dim();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut alpha = z.clone();
    let mut residuals = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let next = Array2::from_shape_fn((h, w), |(r, c)| {
            let mut nsum = 0.0;
            for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                nsum += alpha[[clamp(r as isize + dr, h), clamp(c as isize + dc, w)]];
            }
            (nsum + lambda * z[[r, c]]) / (4.0 + lambda)
        });
        let residual = next
            .iter()
            .zip(alpha.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        residuals.push(residual);
        alpha = next;
        if residual < tol {
            converged = true;
            break;
        }
    }
    PoissonSolve {
        alpha,
        residuals,
        converged,
    }
}

/// Estimates the soft alpha matte of a region from branch / global latent
/// differences.
///
/// `branch` and `global_region` are `(h*w) x channels` token matrices in
/// region row-major order; `ring` holds the background tokens around the
/// region that set the robust scale. Returns a [`AlphaMode::Soft`] mask;
/// non-convergence is reported through `converged`, not as an error.
pub fn estimate_alpha(
    branch: &Array2<f64>,
    global_region: &Array2<f64>,
    ring: &Array2<f64>,
    h: usize,
    w: usize,
    params: &AlphaParams,
) -> Result<AlphaMask> {
    if branch.dim() != global_region.dim() {
        return Err(Error::Shape(format!(
            "branch {:?} vs region {:?}",
            branch.dim(),
            global_region.dim()
        )));
    }
    if branch.nrows() != h * w {
        return Err(Error::Shape(format!(
            "{} tokens cannot fill a {h}x{w} grid",
            branch.nrows()
        )));
    }
    if ring.nrows() == 0 {
        return Err(Error::EmptyRing);
    }
    let ring_values: Vec<f64> = ring.iter().cloned().collect();
    let sigma_bg = robust_sigma(&ring_values);

    let mut z = Array2::zeros((h, w));
    for i in 0..h * w {
        let mut sq = 0.0;
        for c in 0..branch.ncols() {
            let d = (branch[[i, c]] - global_region[[i, c]]) / (sigma_bg + params.epsilon);
            sq += d * d;
        }
        z[[i / w, i % w]] = sq.sqrt().powf(params.gamma);
    }
    let mut z = box_smooth(&z);
    let z_max = z.iter().cloned().fold(0.0, f64::max);
    if z_max > 0.0 {
        z /= z_max;
    }
    let solve = screened_poisson(&z, params.lambda, params.tol, params.max_iters);
    let values = solve.alpha.mapv(|a| a.clamp(0.0, 1.0));
    Ok(AlphaMask {
        values,
        mode: AlphaMode::Soft,
        converged: solve.converged,
        iterations: solve.residuals.len(),
    })
}

/// Otsu split point over a 64-bin histogram: the threshold maximizing
/// between-class variance. `None` when fewer than two distinct values
/// exist.
pub fn otsu_split(samples: &[f64]) -> Option<f64> {
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if samples.is_empty() || !(max > min) {
        return None;
    }
    let width = (max - min) / OTSU_BINS as f64;
    let mut counts = [0usize; OTSU_BINS];
    let mut sums = [0.0f64; OTSU_BINS];
    for &x in samples {
        let bin = (((x - min) / width) as usize).min(OTSU_BINS - 1);
        counts[bin] += 1;
        sums[bin] += x;
    }
    let total_n = samples.len() as f64;
    let total_sum: f64 = samples.iter().sum();
    let mut best: Option<(f64, f64)> = None; // (variance, threshold)
    let mut n0 = 0.0;
    let mut s0 = 0.0;
    for b in 0..OTSU_BINS - 1 {
        n0 += counts[b] as f64;
        s0 += sums[b];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let m0 = s0 / n0;
        let m1 = (total_sum - s0) / n1;
        let var = n0 * n1 * (m0 - m1) * (m0 - m1);
        let threshold = min + (b + 1) as f64 * width;
        if best.is_none_or(|(bv, _)| var > bv) {
            best = Some((var, threshold));
        }
    }
    best.map(|(_, t)| t)
}

/// Binarizes alpha values at the Otsu threshold (`1` where
/// `alpha >= threshold`). Degenerate input (all values equal) passes
/// through as all-foreground.
pub fn otsu_threshold(values: &Array2<f64>) -> Array2<f64> {
    let samples: Vec<f64> = values.iter().cloned().collect();
    match otsu_split(&samples) {
        Some(t) => values.mapv(|a| if a >= t { 1.0 } else { 0.0 }),
        None => Array2::from_elem(values.dim(), 1.0),
    }
}

/// Fills every 0-component (4-connectivity) that does not touch the grid
/// border, by morphological reconstruction: border background is dilated
/// through the background until stable, anything unreached becomes 1.
pub fn morph_fill(field: &Array2<f64>) -> Array2<f64> {
    let (h, w) = field.dim();
    if h == 0 || w == 0 {
        return field.clone();
    }
    let bg = |r: usize, c: usize| field[[r, c]] == 0.0;
    // marker: background cells on the border
    let mut reached = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || r == h - 1 || c == 0 || c == w - 1) && bg(r, c) {
                reached[[r, c]] = true;
            }
        }
    }
    // alternate forward/backward raster sweeps until stable
    let mut changed = true;
    while changed {
        changed = false;
        for r in 0..h {
            for c in 0..w {
                if !reached[[r, c]] && bg(r, c) {
                    let from_up = r > 0 && reached[[r - 1, c]];
                    let from_left = c > 0 && reached[[r, c - 1]];
                    if from_up || from_left {
                        reached[[r, c]] = true;
                        changed = true;
                    }
                }
            }
        }
        for r in (0..h).rev() {
            for c in (0..w).rev() {
                if !reached[[r, c]] && bg(r, c) {
                    let from_down = r + 1 < h && reached[[r + 1, c]];
                    let from_right = c + 1 < w && reached[[r, c + 1]];
                    if from_down || from_right {
                        reached[[r, c]] = true;
                        changed = true;
                    }
                }
            }
        }
    }
    Array2::from_shape_fn((h, w), |(r, c)| {
        if bg(r, c) && !reached[[r, c]] {
            1.0
        } else {
            field[[r, c]]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mad_of_contaminated_ring() {
        // {1,2,3,4,100}: median 3, deviations {2,1,0,1,97}, MAD 1
        let data = [1.0, 2.0, 3.0, 4.0, 100.0];
        assert_eq!(mad(&data), 1.0);
        assert!((robust_sigma(&data) - 1.4826).abs() < 1e-12);
    }

    #[test]
    fn identical_branch_gives_zero_alpha() {
        let tokens = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let ring = arr2(&[[0.5, 0.25], [0.75, 1.0]]);
        let mask = estimate_alpha(&tokens, &tokens, &ring, 2, 2, &AlphaParams::default()).unwrap();
        assert!(mask.values.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn constant_z_is_a_fixed_point() {
        // alpha (4 + lambda) = 4 alpha + lambda c  =>  alpha = c
        let c = 0.6;
        let z = Array2::from_elem((5, 5), c);
        let solve = screened_poisson(&z, 4.0, 1e-10, 200);
        assert!(solve.converged);
        for a in solve.alpha.iter() {
            assert!((a - c).abs() < 1e-9, "{a}");
        }
    }

    /// Dense Gaussian-elimination solve of the screened Poisson system
    /// with the same clamped-neighbour convention.
    fn dense_poisson_oracle(z: &Array2<f64>, lambda: f64) -> Array2<f64> {
        let (h, w) = z.dim();
        let n = h * w;
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let mut a = vec![vec![0.0f64; n + 1]; n];
        for r in 0..h {
            for c in 0..w {
                let row = r * w + c;
                a[row][row] += 4.0 + lambda;
                for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
                    let nr = clamp(r as isize + dr, h);
                    let nc = clamp(c as isize + dc, w);
                    a[row][nr * w + nc] -= 1.0;
                }
                a[row][n] = lambda * z[[r, c]];
            }
        }
        // Gaussian elimination with partial pivoting
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
                .unwrap();
            a.swap(col, pivot);
            let p = a[col][col];
            for j in col..=n {
                a[col][j] /= p;
            }
            for i in 0..n {
                if i != col && a[i][col] != 0.0 {
                    let f = a[i][col];
                    for j in col..=n {
                        a[i][j] -= f * a[col][j];
                    }
                }
            }
        }
        Array2::from_shape_fn((h, w), |(r, c)| a[r * w + c][n])
    }

    #[test]
    fn poisson_matches_dense_solver_on_3x3_impulse() {
        let mut z = Array2::zeros((3, 3));
        z[[1, 1]] = 1.0;
        let solve = screened_poisson(&z, 4.0, 1e-12, 10_000);
        let expected = dense_poisson_oracle(&z, 4.0);
        for (a, b) in solve.alpha.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn poisson_residuals_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let z = Array2::from_shape_fn((6, 7), |_| rng.gen_range(0.0..1.0));
            let solve = screened_poisson(&z, 4.0, 1e-9, 300);
            for wpair in solve.residuals.windows(2) {
                assert!(
                    wpair[1] <= wpair[0] + 1e-15,
                    "{} then {}",
                    wpair[0],
                    wpair[1]
                );
            }
        }
    }

    /// Exhaustive-scan oracle: best split over all midpoints between
    /// consecutive distinct sorted values, exact class statistics.
    fn otsu_oracle_partition(samples: &[f64]) -> Vec<bool> {
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        let mut best: Option<(f64, f64)> = None;
        for pair in sorted.windows(2) {
            let t = 0.5 * (pair[0] + pair[1]);
            let (lo, hi): (Vec<f64>, Vec<f64>) = samples.iter().partition(|x| **x < t);
            if lo.is_empty() || hi.is_empty() {
                continue;
            }
            let m0: f64 = lo.iter().sum::<f64>() / lo.len() as f64;
            let m1: f64 = hi.iter().sum::<f64>() / hi.len() as f64;
            let var = lo.len() as f64 * hi.len() as f64 * (m0 - m1) * (m0 - m1);
            if best.is_none_or(|(bv, _)| var > bv) {
                best = Some((var, t));
            }
        }
        let t = best.map(|(_, t)| t).unwrap_or(f64::NEG_INFINITY);
        samples.iter().map(|x| *x >= t).collect()
    }

    #[test]
    fn otsu_separates_two_groups() {
        let vals = arr2(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]);
        let field = otsu_threshold(&vals);
        assert_eq!(field, arr2(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]));
        let samples: Vec<f64> = vals.iter().cloned().collect();
        let oracle = otsu_oracle_partition(&samples);
        let got: Vec<bool> = field.iter().map(|v| *v == 1.0).collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn otsu_degenerate_input_is_all_foreground() {
        let vals = Array2::from_elem((2, 3), 0.42);
        assert!(otsu_threshold(&vals).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn otsu_matches_oracle_on_bimodal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let n = rng.gen_range(8..60);
            let lo_mean = rng.gen_range(0.05..0.3);
            let hi_mean = rng.gen_range(0.65..0.95);
            let samples: Vec<f64> = (0..n)
                .map(|i| {
                    let mean = if i % 2 == 0 { lo_mean } else { hi_mean };
                    (mean + rng.gen_range(-0.03f64..0.03)).clamp(0.0, 1.0)
                })
                .collect();
            let vals = Array2::from_shape_vec((1, n), samples.clone()).unwrap();
            let got: Vec<bool> = otsu_threshold(&vals).iter().map(|v| *v == 1.0).collect();
            assert_eq!(got, otsu_oracle_partition(&samples));
        }
    }

    #[test]
    fn morph_fill_closes_a_ring() {
        let mut field = Array2::zeros((5, 5));
        for i in 1..4 {
            field[[1, i]] = 1.0;
            field[[3, i]] = 1.0;
            field[[i, 1]] = 1.0;
            field[[i, 3]] = 1.0;
        }
        assert_eq!(field[[2, 2]], 0.0);
        let filled = morph_fill(&field);
        assert_eq!(filled[[2, 2]], 1.0);
        assert_eq!(filled[[0, 0]], 0.0, "border background preserved");
    }

    #[test]
    fn morph_fill_keeps_open_background() {
        let field = Array2::zeros((4, 4));
        assert_eq!(morph_fill(&field), field);
    }

    /// BFS flood fill from the border, the independent route.
    fn flood_fill_oracle(field: &Array2<f64>) -> Array2<f64> {
        let (h, w) = field.dim();
        let mut reached = Array2::from_elem((h, w), false);
        let mut stack = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if (r == 0 || r == h - 1 || c == 0 || c == w - 1) && field[[r, c]] == 0.0 {
                    stack.push((r, c));
                    reached[[r, c]] = true;
                }
            }
        }
        while let Some((r, c)) = stack.pop() {
            let mut push = |nr: usize, nc: usize, reached: &mut Array2<bool>| {
                if field[[nr, nc]] == 0.0 && !reached[[nr, nc]] {
                    reached[[nr, nc]] = true;
                    stack.push((nr, nc));
                }
            };
            if r > 0 {
                push(r - 1, c, &mut reached);
            }
            if r + 1 < h {
                push(r + 1, c, &mut reached);
            }
            if c > 0 {
                push(r, c - 1, &mut reached);
            }
            if c + 1 < w {
                push(r, c + 1, &mut reached);
            }
        }
        Array2::from_shape_fn((h, w), |(r, c)| {
            if field[[r, c]] == 0.0 && !reached[[r, c]] {
                1.0
            } else {
                field[[r, c]]
            }
        })
    }

    #[test]
    fn morph_fill_matches_flood_fill_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..60 {
            let field =
                Array2::from_shape_fn((16, 16), |_| if rng.gen_bool(0.45) { 1.0 } else { 0.0 });
            assert_eq!(morph_fill(&field), flood_fill_oracle(&field));
        }
    }

    #[test]
    fn two_disjoint_rings_both_fill() {
        let mut field = Array2::zeros((5, 9));
        for (off, _) in [(0usize, ()), (5, ())] {
            for i in 1..4 {
                field[[1, off + i]] = 1.0;
                field[[3, off + i]] = 1.0;
                field[[i, off + 1]] = 1.0;
                field[[i, off + 3]] = 1.0;
            }
        }
        let filled = morph_fill(&field);
        assert_eq!(filled[[2, 2]], 1.0);
        assert_eq!(filled[[2, 7]], 1.0);
        assert_eq!(filled[[2, 4]], 0.0, "channel between rings stays open");
        assert_eq!(filled, flood_fill_oracle(&field));
    }

    #[test]
    fn empty_ring_is_an_error() {
        let tokens = Array2::zeros((4, 2));
        let ring = Array2::zeros((0, 2));
        let err =
            estimate_alpha(&tokens, &tokens, &ring, 2, 2, &AlphaParams::default()).unwrap_err();
        assert_eq!(err.code(), "EmptyRingError");
    }

    #[test]
    fn alpha_values_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..10 {
            let branch = Array2::from_shape_fn((16, 4), |_| rng.gen_range(-3.0..3.0));
            let global = Array2::from_shape_fn((16, 4), |_| rng.gen_range(-3.0..3.0));
            let ring = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0));
            let mask =
                estimate_alpha(&branch, &global, &ring, 4, 4, &AlphaParams::default()).unwrap();
            assert!(mask.values.iter().all(|a| (0.0..=1.0).contains(a)));
        }
    }
}
