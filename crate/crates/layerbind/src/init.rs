//! Layer-wise instance initialization.
//!
//! At the spawn step each region gets its own branch: a bitwise copy of
//! the global latent rows at its token indices, inheriting their rotary
//! phases. During the initialization window the streams update per block
//! as
//!
//! ```text
//! branch       <- CA(e_B,    [e_I_bg, e_T_reg])      // grounded update
//! branch       <- CA(e_B,    [e_T_reg])              // hard binding (vital blocks)
//! regional txt <- CA(e_T_reg, [e_B, e_I_bg])
//! background   <- CA(e_I_bg, [e_T_bg, e_B])          // reverse adaptation (vital blocks)
//! ```
//!
//! where `CA` is [`contextual_attention`] with self included and `e_I_bg`
//! is the global image stream outside the branch's region. At the blend
//! step the branches fuse back in ascending occlusion order: layers whose
//! box overlaps nothing already blended merge directly, occluding layers
//! composite through an estimated foreground alpha:
//!
//! ```text
//! I[idx] <- alpha_f * B + (1 - alpha_f) * I[idx]
//! ```

use ndarray::Array2;

use crate::alpha::{estimate_alpha, morph_fill, otsu_threshold, AlphaMask, AlphaMode, AlphaParams};
use crate::attention::{contextual_attention, AttentionPolicy, Projection, StreamTag};
use crate::error::{Error, Result};
use crate::flow::LatentState;
use crate::layout::RegionIndexSet;
use crate::rope::RotaryPhases;

/// One instance branch: copied latent rows, inherited phases, and the
/// encoded regional prompt driving it.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBranch {
    pub order: i64,
    pub region: RegionIndexSet,
    /// `|idx| x d_model` latent rows, euler-updated alongside the global
    /// latent until the blend.
    pub tokens: Array2<f64>,
    /// Rotary phases copied from the global grid at the region indices.
    pub phases: RotaryPhases,
    /// Encoder output of the region prompt (reset to this every step).
    pub regional_text: Array2<f64>,
}

/// Grounded branch update (vital = false) or hard binding (vital = true).
pub fn branch_update_policy(layer: usize, vital: bool) -> AttentionPolicy {
    let contexts = if vital {
        vec![StreamTag::TextRegional(layer)]
    } else {
        vec![StreamTag::ImageGlobal, StreamTag::TextRegional(layer)]
    };
    AttentionPolicy::new(StreamTag::ImageBranch(layer), contexts, true)
        .expect("static policy tags are distinct")
}

/// Regional-text feedback update.
pub fn regional_text_init_policy(layer: usize) -> AttentionPolicy {
    AttentionPolicy::new(
        StreamTag::TextRegional(layer),
        vec![StreamTag::ImageBranch(layer), StreamTag::ImageGlobal],
        true,
    )
    .expect("static policy tags are distinct")
}

/// Reverse adaptation of the background towards a branch (vital blocks).
pub fn background_adapt_policy(layer: usize) -> AttentionPolicy {
    AttentionPolicy::new(
        StreamTag::ImageGlobal,
        vec![StreamTag::TextBackground, StreamTag::ImageBranch(layer)],
        true,
    )
    .expect("static policy tags are distinct")
}

/// Copies latent rows into one branch per region. Bitwise copies: the
/// branch starts from exactly the global tokens (and phases) at its
/// indices.
pub fn construct_branches(
    latent: &LatentState,
    regions: &[RegionIndexSet],
    phases: &RotaryPhases,
    regional_texts: &[Array2<f64>],
) -> Result<Vec<InstanceBranch>> {
    if regions.len() != regional_texts.len() {
        return Err(Error::Shape(format!(
            "{} regions vs {} regional prompts",
            regions.len(),
            regional_texts.len()
        )));
    }
    if phases.token_count() != latent.token_count() {
        return Err(Error::Shape("phase grid does not match the latent".into()));
    }
    let mut branches = Vec::with_capacity(regions.len());
    for (region, text) in regions.iter().zip(regional_texts) {
        if region.is_empty() {
            return Err(Error::EmptyRegion(format!("layer order {}", region.order)));
        }
        let tokens = latent.tokens.select(ndarray::Axis(0), &region.indices);
        branches.push(InstanceBranch {
            order: region.order,
            region: region.clone(),
            tokens,
            phases: phases.select_rows(&region.indices),
            regional_text: text.clone(),
        });
    }
    Ok(branches)
}

/// Attention update of a branch for the current block.
///
/// Non-vital blocks ground the branch in the background context; vital
/// blocks bind it to its regional text alone. A region covering the whole
/// image has no background context, which degenerates the grounded update
/// into the hard-binding form — that fallback is reported through the
/// second return value (`true` when the hard path ran).
pub fn branch_update(
    branch: &Projection,
    regional_text: &Projection,
    background: &Projection,
    vital: bool,
    heads: usize,
) -> Result<(Array2<f64>, bool)> {
    let layer = match branch.tag {
        StreamTag::ImageBranch(i) => i,
        other => return Err(Error::Shape(format!("{other:?} is not a branch stream"))),
    };
    let hard = vital || background.tokens() == 0;
    let out = if hard {
        let policy = branch_update_policy(layer, true);
        contextual_attention(branch, &[regional_text], &policy, heads)?
    } else {
        let policy = branch_update_policy(layer, false);
        contextual_attention(branch, &[background, regional_text], &policy, heads)?
    };
    Ok((out, hard))
}

/// Regional-text update against the branch and the background context.
pub fn regional_text_update(
    regional_text: &Projection,
    branch: &Projection,
    background: &Projection,
    heads: usize,
) -> Result<Array2<f64>> {
    let layer = match regional_text.tag {
        StreamTag::TextRegional(i) => i,
        other => {
            return Err(Error::Shape(format!(
                "{other:?} is not a regional text stream"
            )))
        }
    };
    let policy = regional_text_init_policy(layer);
    contextual_attention(regional_text, &[branch, background], &policy, heads)
}

/// Reverse adaptation of background tokens in vital blocks. Non-vital
/// blocks pass through (`None`): there the background rows keep their
/// standard joint-attention update.
pub fn reverse_adapt_background(
    background: &Projection,
    background_text: &Projection,
    branch: &Projection,
    vital: bool,
    heads: usize,
) -> Result<Option<Array2<f64>>> {
    if !vital {
        return Ok(None);
    }
    let layer = match branch.tag {
        StreamTag::ImageBranch(i) => i,
        other => return Err(Error::Shape(format!("{other:?} is not a branch stream"))),
    };
    let policy = background_adapt_policy(layer);
    let out = contextual_attention(background, &[background_text, branch], &policy, heads)?;
    Ok(Some(out))
}

/// Outcome of fusing the branches back into the latent.
#[derive(Debug, Clone)]
pub struct BlendResult {
    pub latent: LatentState,
    /// Estimated masks for the occluding layers, by layer order.
    pub alphas: Vec<(i64, AlphaMask)>,
}

fn boxes_intersect(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
}

/// Latent rows of a 2-patch-wide ring around the region's rectangle
/// (clipped to the grid, excluding the region itself).
pub fn background_ring(latent: &LatentState, region: &RegionIndexSet) -> Array2<f64> {
    let (r0, r1, c0, c1) = region.rect();
    let rr0 = r0.saturating_sub(2);
    let rr1 = (r1 + 2).min(latent.grid_height);
    let cc0 = c0.saturating_sub(2);
    let cc1 = (c1 + 2).min(latent.grid_width);
    let mut rows = Vec::new();
    for r in rr0..rr1 {
        for c in cc0..cc1 {
            if r >= r0 && r < r1 && c >= c0 && c < c1 {
                continue;
            }
            rows.push(r * latent.grid_width + c);
        }
    }
    latent.tokens.select(ndarray::Axis(0), &rows)
}

/// Fuses branches into the latent in ascending occlusion order.
///
/// A layer whose box overlaps no previously blended box merges directly.
/// Occluding layers blend through an alpha matte per `modes[i]`: `direct`
/// forces alpha = 1, `soft` uses the refined values, `matted` thresholds
/// and hole-fills them. Tokens outside every region are untouched.
pub fn blend_branches(
    latent: &LatentState,
    branches: &[InstanceBranch],
    modes: &[AlphaMode],
    params: &AlphaParams,
) -> Result<BlendResult> {
    if modes.len() != branches.len() {
        return Err(Error::Shape(format!(
            "{} blend modes for {} branches",
            modes.len(),
            branches.len()
        )));
    }
    for pair in branches.windows(2) {
        if pair[0].order >= pair[1].order {
            return Err(Error::Order(format!(
                "branches not in ascending order: {} then {}",
                pair[0].order, pair[1].order
            )));
        }
    }
    let mut out = latent.clone();
    let mut alphas = Vec::new();
    let mut blended_boxes: Vec<[f64; 4]> = Vec::new();
    for (branch, mode) in branches.iter().zip(modes) {
        let region = &branch.region;
        if region.grid_height != latent.grid_height || region.grid_width != latent.grid_width {
            return Err(Error::Shape("region grid does not match the latent".into()));
        }
        let occupied = blended_boxes
            .iter()
            .any(|b| boxes_intersect(b, &region.box_px));
        let alpha = if !occupied || *mode == AlphaMode::Direct {
            None
        } else {
            let (r0, r1, c0, c1) = region.rect();
            let (h, w) = (r1 - r0, c1 - c0);
            if h * w != region.len() {
                return Err(Error::Shape("region is not a solid rectangle".into()));
            }
            let global_region = out.tokens.select(ndarray::Axis(0), &region.indices);
            let ring = background_ring(&out, region);
            let mut mask = estimate_alpha(&branch.tokens, &global_region, &ring, h, w, params)?;
            if *mode == AlphaMode::Matted {
                mask.values = morph_fill(&otsu_threshold(&mask.values));
                mask.mode = AlphaMode::Matted;
            }
            Some(mask)
        };
        match &alpha {
            None => {
                for (row, &tok) in region.indices.iter().enumerate() {
                    out.tokens.row_mut(tok).assign(&branch.tokens.row(row));
                }
            }
            Some(mask) => {
                let flat: Vec<f64> = mask.values.iter().cloned().collect();
                for (row, &tok) in region.indices.iter().enumerate() {
                    let a = flat[row];
                    if a == 1.0 {
                        out.tokens.row_mut(tok).assign(&branch.tokens.row(row));
                    } else if a != 0.0 {
                        let mut target = out.tokens.row_mut(tok);
                        let source = branch.tokens.row(row);
                        for (t, s) in target.iter_mut().zip(source.iter()) {
                            *t = a * s + (1.0 - a) * *t;
                        }
                    }
                }
            }
        }
        if let Some(mask) = alpha {
            alphas.push((branch.order, mask));
        }
        blended_boxes.push(region.box_px);
    }
    Ok(BlendResult {
        latent: out,
        alphas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::masked_attention_oracle;
    use crate::layout::box_to_indices;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn image_proj(rng: &mut ChaCha8Rng, tag: StreamTag, n: usize, d: usize) -> Projection {
        Projection::image(
            tag,
            rand_mat(rng, n, d),
            rand_mat(rng, n, d),
            rand_mat(rng, n, d),
            RotaryPhases::none(n),
        )
        .unwrap()
    }

    fn text_proj(rng: &mut ChaCha8Rng, tag: StreamTag, n: usize, d: usize) -> Projection {
        Projection::text(
            tag,
            rand_mat(rng, n, d),
            rand_mat(rng, n, d),
            rand_mat(rng, n, d),
        )
        .unwrap()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn branches_copy_latent_rows_bitwise() {
        let latent = LatentState::noise(4, 4, 8, 3);
        let phases = RotaryPhases::for_grid(4, 4, 8);
        let r1 = box_to_indices(&[0.0, 0.0, 512.0, 512.0], 4, 4, 1).unwrap();
        let r2 = box_to_indices(&[256.0, 256.0, 768.0, 768.0], 4, 4, 2).unwrap();
        let texts = vec![Array2::zeros((2, 8)), Array2::zeros((2, 8))];
        let branches =
            construct_branches(&latent, &[r1.clone(), r2.clone()], &phases, &texts).unwrap();
        for (branch, region) in branches.iter().zip([&r1, &r2]) {
            for (row, &tok) in region.indices.iter().enumerate() {
                assert_eq!(branch.tokens.row(row), latent.tokens.row(tok));
                assert_eq!(branch.phases.angles.row(row), phases.angles.row(tok));
            }
        }
        // overlapping rows were copied identically into both branches
        let shared: Vec<usize> = r1
            .indices
            .iter()
            .cloned()
            .filter(|i| r2.contains(*i))
            .collect();
        assert!(!shared.is_empty());
        for tok in shared {
            let row1 = r1.indices.iter().position(|i| *i == tok).unwrap();
            let row2 = r2.indices.iter().position(|i| *i == tok).unwrap();
            assert_eq!(branches[0].tokens.row(row1), branches[1].tokens.row(row2));
        }
    }

    #[test]
    fn vital_branch_update_ignores_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let branch = image_proj(&mut rng, StreamTag::ImageBranch(0), 4, 8);
        let text = text_proj(&mut rng, StreamTag::TextRegional(0), 3, 8);
        let bg = image_proj(&mut rng, StreamTag::ImageGlobal, 6, 8);
        let (out1, hard) = branch_update(&branch, &text, &bg, true, 2).unwrap();
        assert!(hard);
        let bg2 = image_proj(&mut rng, StreamTag::ImageGlobal, 6, 8);
        let (out2, _) = branch_update(&branch, &text, &bg2, true, 2).unwrap();
        assert_eq!(out1, out2, "perturbing the background must not matter");
        let (out3, hard3) = branch_update(&branch, &text, &bg, false, 2).unwrap();
        assert!(!hard3);
        assert!(
            max_abs_diff(&out1, &out3) > 1e-9,
            "grounded path must differ"
        );
    }

    #[test]
    fn grounded_update_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let branch = image_proj(&mut rng, StreamTag::ImageBranch(2), 5, 8);
            let bg = image_proj(&mut rng, StreamTag::ImageGlobal, 7, 8);
            let text = text_proj(&mut rng, StreamTag::TextRegional(2), 2, 8);
            let (direct, _) = branch_update(&branch, &text, &bg, false, 2).unwrap();
            let policy = branch_update_policy(2, false);
            let streams = [&branch, &bg, &text];
            let (mask, rows) = policy.mask_for(&streams).unwrap();
            let dense = masked_attention_oracle(&streams, &mask, 2).unwrap();
            let dense_rows = dense
                .slice(ndarray::s![rows.start..rows.end, ..])
                .to_owned();
            assert!(max_abs_diff(&direct, &dense_rows) <= 1e-6);
        }
    }

    #[test]
    fn full_image_region_falls_back_to_hard_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let branch = image_proj(&mut rng, StreamTag::ImageBranch(0), 6, 8);
        let text = text_proj(&mut rng, StreamTag::TextRegional(0), 2, 8);
        let empty_bg = Projection::image(
            StreamTag::ImageGlobal,
            Array2::zeros((0, 8)),
            Array2::zeros((0, 8)),
            Array2::zeros((0, 8)),
            RotaryPhases::none(0),
        )
        .unwrap();
        let (fallback, hard) = branch_update(&branch, &text, &empty_bg, false, 2).unwrap();
        assert!(hard);
        let (vital_path, _) = branch_update(&branch, &text, &empty_bg, true, 2).unwrap();
        assert!(max_abs_diff(&fallback, &vital_path) <= 1e-12);
    }

    #[test]
    fn regional_text_update_matches_oracle_and_is_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let text = text_proj(&mut rng, StreamTag::TextRegional(1), 3, 8);
        let branch = image_proj(&mut rng, StreamTag::ImageBranch(1), 4, 8);
        let bg = image_proj(&mut rng, StreamTag::ImageGlobal, 5, 8);
        let direct = regional_text_update(&text, &branch, &bg, 2).unwrap();
        let policy = regional_text_init_policy(1);
        let streams = [&text, &branch, &bg];
        let (mask, rows) = policy.mask_for(&streams).unwrap();
        let dense = masked_attention_oracle(&streams, &mask, 2).unwrap();
        let dense_rows = dense
            .slice(ndarray::s![rows.start..rows.end, ..])
            .to_owned();
        assert!(max_abs_diff(&direct, &dense_rows) <= 1e-6);
    }

    #[test]
    fn reverse_adaptation_is_a_passthrough_when_not_vital() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bg = image_proj(&mut rng, StreamTag::ImageGlobal, 5, 8);
        let tbg = text_proj(&mut rng, StreamTag::TextBackground, 3, 8);
        let branch = image_proj(&mut rng, StreamTag::ImageBranch(0), 4, 8);
        assert!(reverse_adapt_background(&bg, &tbg, &branch, false, 2)
            .unwrap()
            .is_none());
        let updated = reverse_adapt_background(&bg, &tbg, &branch, true, 2)
            .unwrap()
            .unwrap();

        // matches the masked oracle
        let policy = background_adapt_policy(0);
        let streams = [&bg, &tbg, &branch];
        let (mask, rows) = policy.mask_for(&streams).unwrap();
        let dense = masked_attention_oracle(&streams, &mask, 2).unwrap();
        let dense_rows = dense
            .slice(ndarray::s![rows.start..rows.end, ..])
            .to_owned();
        assert!(max_abs_diff(&updated, &dense_rows) <= 1e-6);
    }

    fn branch_from(
        latent: &LatentState,
        box_px: [f64; 4],
        order: i64,
        value: f64,
    ) -> InstanceBranch {
        let region = box_to_indices(&box_px, latent.grid_height, latent.grid_width, order).unwrap();
        InstanceBranch {
            order,
            tokens: Array2::from_elem((region.len(), latent.channels), value),
            phases: RotaryPhases::none(region.len()),
            regional_text: Array2::zeros((1, latent.channels)),
            region,
        }
    }

    #[test]
    fn unoccupied_layer_merges_directly() {
        let latent = LatentState::noise(8, 8, 4, 1);
        let branch = branch_from(&latent, [0.0, 0.0, 512.0, 512.0], 1, 7.0);
        let result = blend_branches(
            &latent,
            std::slice::from_ref(&branch),
            &[AlphaMode::Soft],
            &AlphaParams::default(),
        )
        .unwrap();
        for &tok in &branch.region.indices {
            assert!(result.latent.tokens.row(tok).iter().all(|v| *v == 7.0));
        }
        assert!(
            result.alphas.is_empty(),
            "no alpha needed for an unoccupied layer"
        );
    }

    #[test]
    fn tokens_outside_regions_are_never_touched() {
        let latent = LatentState::noise(8, 8, 4, 2);
        let b1 = branch_from(&latent, [0.0, 0.0, 512.0, 512.0], 1, 1.0);
        let b2 = branch_from(&latent, [256.0, 256.0, 768.0, 768.0], 2, 2.0);
        let result = blend_branches(
            &latent,
            &[b1.clone(), b2.clone()],
            &[AlphaMode::Soft, AlphaMode::Soft],
            &AlphaParams::default(),
        )
        .unwrap();
        for tok in 0..64 {
            if !b1.region.contains(tok) && !b2.region.contains(tok) {
                assert_eq!(result.latent.tokens.row(tok), latent.tokens.row(tok));
            }
        }
        // layer 2 occludes layer 1, so an alpha was estimated for it
        assert_eq!(result.alphas.len(), 1);
        assert_eq!(result.alphas[0].0, 2);
    }

    #[test]
    fn direct_mode_overwrites_overlaps_with_the_top_layer() {
        let latent = LatentState::noise(8, 8, 4, 3);
        let b1 = branch_from(&latent, [0.0, 0.0, 512.0, 512.0], 1, 1.0);
        let b2 = branch_from(&latent, [256.0, 256.0, 768.0, 768.0], 2, 2.0);
        let result = blend_branches(
            &latent,
            &[b1.clone(), b2.clone()],
            &[AlphaMode::Direct, AlphaMode::Direct],
            &AlphaParams::default(),
        )
        .unwrap();
        for tok in 0..64 {
            let row = result.latent.tokens.row(tok);
            if b2.region.contains(tok) {
                assert!(row.iter().all(|v| *v == 2.0));
            } else if b1.region.contains(tok) {
                assert!(row.iter().all(|v| *v == 1.0));
            }
        }
    }

    #[test]
    fn unsorted_branches_are_rejected() {
        let latent = LatentState::noise(8, 8, 4, 4);
        let b1 = branch_from(&latent, [0.0, 0.0, 512.0, 512.0], 2, 1.0);
        let b2 = branch_from(&latent, [256.0, 256.0, 768.0, 768.0], 1, 2.0);
        let err = blend_branches(
            &latent,
            &[b1, b2],
            &[AlphaMode::Direct, AlphaMode::Direct],
            &AlphaParams::default(),
        )
        .unwrap_err();
        assert_eq!(err.code(), "OrderError");
    }

    #[test]
    fn scalar_alpha_blend_arithmetic() {
        // alpha 0.25, branch 4, latent 0 -> 1.0
        let a = 0.25;
        let blended = a * 4.0 + (1.0 - a) * 0.0;
        assert_eq!(blended, 1.0);
    }

    #[test]
    fn alpha_extremes_reproduce_the_trivial_blends() {
        let mut latent = LatentState::noise(8, 8, 4, 5);
        latent.tokens.fill(0.0);
        let b1 = branch_from(&latent, [0.0, 0.0, 512.0, 512.0], 1, 3.0);
        // identical tokens in the overlap region mean Z = 0 -> alpha = 0
        let mut b2 = branch_from(&latent, [256.0, 256.0, 768.0, 768.0], 2, 0.0);
        for (row, &tok) in b2.region.indices.clone().iter().enumerate() {
            let src = if b1.region.contains(tok) { 3.0 } else { 0.0 };
            b2.tokens.row_mut(row).fill(src);
        }
        // after blending layer 1 directly, layer 2's tokens equal the latent
        // in its region, so its estimated alpha is all zeros: no-op blend
        let result = blend_branches(
            &latent,
            &[b1.clone(), b2],
            &[AlphaMode::Soft, AlphaMode::Soft],
            &AlphaParams::default(),
        )
        .unwrap();
        let (_, mask) = &result.alphas[0];
        assert!(mask.values.iter().all(|v| *v == 0.0));
        for &tok in &b1.region.indices {
            assert!(result.latent.tokens.row(tok).iter().all(|v| *v == 3.0));
        }
    }

    #[test]
    fn ring_skips_the_region_rect() {
        let latent = LatentState::noise(8, 8, 2, 6);
        let region = box_to_indices(&[256.0, 256.0, 512.0, 512.0], 8, 8, 1).unwrap();
        let (r0, r1, c0, c1) = region.rect();
        let ring = background_ring(&latent, &region);
        let expected: usize = (r0.saturating_sub(2)..(r1 + 2).min(8))
            .flat_map(|r| (c0.saturating_sub(2)..(c1 + 2).min(8)).map(move |c| (r, c)))
            .filter(|(r, c)| !(*r >= r0 && *r < r1 && *c >= c0 && *c < c1))
            .count();
        assert_eq!(ring.nrows(), expected);
    }
}
