//! Layer-wise semantic nursing.
//!
//! After the blend, each block runs the standard global attention and, in
//! parallel from the same block-entry projections, one local enhancement
//! per layer:
//!
//! ```text
//! local_i        <- CA(e_I_reg_i, [e_T_reg_i, e_I_rest])
//! regional txt_i <- CA(e_T_reg_i, [e_I_reg_i, e_T_scene])
//! ```
//!
//! The local results stack onto the global output through the
//! transparency scheduler, ascending occlusion order:
//!
//! ```text
//! comp_0 = global
//! comp_i = (1 - beta * M_i) (.) comp_{i-1} + (beta * M_i) (.) local_i
//! ```
//!
//! so the nearest layer always keeps coefficient `beta` on its own tokens
//! no matter how many layers sit below it.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attention::{contextual_attention, AttentionPolicy, Projection, StreamTag};
use crate::error::{Error, Result};
use crate::layout::RegionIndexSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NursingConfig {
    pub enabled: bool,
    /// Opacity of each layer's enhancement over the running composite.
    pub beta: f64,
    /// Ablation: write the local updates straight into their regions,
    /// skipping the transparency scheduler.
    pub regional_prompting_only: bool,
}

impl Default for NursingConfig {
    fn default() -> Self {
        NursingConfig {
            enabled: true,
            beta: 0.7,
            regional_prompting_only: false,
        }
    }
}

impl NursingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Range(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Local enhancement of one region's image tokens.
pub fn nurse_local_policy(layer: usize) -> AttentionPolicy {
    AttentionPolicy::new(
        StreamTag::ImageRegion(layer),
        vec![StreamTag::TextRegional(layer), StreamTag::ImageGlobal],
        true,
    )
    .expect("static policy tags are distinct")
}

/// Regional-text refresh during nursing.
pub fn nurse_text_policy(layer: usize) -> AttentionPolicy {
    AttentionPolicy::new(
        StreamTag::TextRegional(layer),
        vec![StreamTag::ImageRegion(layer), StreamTag::TextScene],
        true,
    )
    .expect("static policy tags are distinct")
}

/// Computes one layer's local enhancement and scatters it into a
/// full-image-shaped field (zero outside the region).
///
/// `region_tokens` holds the region rows of the image projection;
/// `image_rest` holds every other image row, so together with self the
/// keys cover regional text plus the whole image, each token once.
pub fn nurse_local(
    region_tokens: &Projection,
    regional_text: &Projection,
    image_rest: &Projection,
    region: &RegionIndexSet,
    heads: usize,
) -> Result<Array2<f64>> {
    let layer = match region_tokens.tag {
        StreamTag::ImageRegion(i) => i,
        other => return Err(Error::Shape(format!("{other:?} is not a region stream"))),
    };
    if region_tokens.tokens() != region.len() {
        return Err(Error::Shape(format!(
            "{} projection rows for a {}-token region",
            region_tokens.tokens(),
            region.len()
        )));
    }
    let policy = nurse_local_policy(layer);
    let updated =
        contextual_attention(region_tokens, &[regional_text, image_rest], &policy, heads)?;
    let n = region.grid_height * region.grid_width;
    let mut full = Array2::zeros((n, updated.ncols()));
    for (row, &tok) in region.indices.iter().enumerate() {
        full.row_mut(tok).assign(&updated.row(row));
    }
    Ok(full)
}

/// Refreshes one regional text stream against its region and the scene
/// prompt.
pub fn nurse_text(
    regional_text: &Projection,
    region_tokens: &Projection,
    scene_text: &Projection,
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
    let policy = nurse_text_policy(layer);
    contextual_attention(regional_text, &[region_tokens, scene_text], &policy, heads)
}

/// Layer stack for the transparency scheduler: the global base plus
/// per-layer locals and masks, all the same shape as the global image
/// embedding, pushed in ascending occlusion order.
#[derive(Debug, Clone)]
pub struct CompositeState {
    base: Array2<f64>,
    locals: Vec<Array2<f64>>,
    masks: Vec<Array1<f64>>,
    orders: Vec<i64>,
}

impl CompositeState {
    pub fn new(global: Array2<f64>) -> Self {
        CompositeState { base: global, locals: Vec::new(), masks: Vec::new(), orders: Vec::new() }
    }

    pub fn layer_count(&self) -> usize {
        self.locals.len()
    }

    /// Stacks one layer. Orders must arrive strictly ascending; the local
    /// field must match the base shape and the mask must be a 0/1 field
    /// over the tokens.
    pub fn push_layer(
        &mut self,
        order: i64,
        local: Array2<f64>,
        mask: Array1<f64>,
    ) -> Result<()> {
        if let Some(last) = self.orders.last() {
            if *last >= order {
                return Err(Error::Order(format!(
                    "layers not in ascending order: {last} then {order}"
                )));
            }
        }
        if local.dim() != self.base.dim() {
            return Err(Error::Shape(format!(
                "local {:?} vs global {:?}",
                local.dim(),
                self.base.dim()
            )));
        }
        if mask.len() != self.base.nrows() {
            return Err(Error::Shape(format!(
                "mask length {} vs {} tokens",
                mask.len(),
                self.base.nrows()
            )));
        }
        if mask.iter().any(|m| *m != 0.0 && *m != 1.0) {
            return Err(Error::Range("composite masks must be binary".into()));
        }
        self.locals.push(local);
        self.masks.push(mask);
        self.orders.push(order);
        Ok(())
    }

    /// Runs the scheduler bottom to top. Tokens outside every mask come
    /// back bit-identical to the base, as does everything when the stack
    /// is empty or `beta` is zero.
    pub fn composite(&self, beta: f64) -> Result<Array2<f64>> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Range(format!("beta must lie in [0, 1], got {beta}")));
        }
        if self.locals.is_empty() || beta == 0.0 {
            return Ok(self.base.clone());
        }
        let n = self.base.nrows();
        let mut comp = self.base.clone();
        for (local, mask) in self.locals.iter().zip(&self.masks) {
            for tok in 0..n {
                if mask[tok] == 0.0 {
                    continue;
                }
                let mut target = comp.row_mut(tok);
                let source = local.row(tok);
                for (t, s) in target.iter_mut().zip(source.iter()) {
                    *t = (1.0 - beta) * *t + beta * *s;
                }
            }
        }
        Ok(comp)
    }
}

/// Iterative transparency-scheduler compositing over parallel slices (the
/// stack form of [`CompositeState`]).
pub fn composite_layers(
    global: &Array2<f64>,
    locals: &[Array2<f64>],
    masks: &[Array1<f64>],
    orders: &[i64],
    beta: f64,
) -> Result<Array2<f64>> {
    if locals.len() != masks.len() || locals.len() != orders.len() {
        return Err(Error::Shape(format!(
            "{} locals, {} masks, {} orders",
            locals.len(),
            masks.len(),
            orders.len()
        )));
    }
    let mut state = CompositeState::new(global.clone());
    for ((local, mask), order) in locals.iter().zip(masks).zip(orders) {
        state.push_layer(*order, local.clone(), mask.clone())?;
    }
    state.composite(beta)
}
