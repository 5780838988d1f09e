//! Region-instructed layout documents.
//!
//! The input is a JSON object with a fixed shape:
//!
//! ```json
//! {
//!   "planning": "optional free text",
//!   "rewritten_prompt": "full scene prompt",
//!   "background_prompt": "background prompt",
//!   "elements": [
//!     { "region_prompt": "a cat", "layout": [x0, y0, x1, y1], "order": 1 }
//!   ]
//! }
//! ```
//!
//! Boxes live on a fixed 1024x1024 canvas; `order` is the occlusion index,
//! farthest layer first. Unknown fields are ignored. Parsing is purely
//! structural (presence and types, with errors naming the offending
//! field); value-level constraints are the job of [`validate`].
//!
//! [`box_to_indices`] maps a box to the token indices of a patch grid: a
//! token belongs to the region iff its patch center lies in the half-open
//! box `[x0, x1) x [y0, y1)`, so neighbouring boxes never double-claim a
//! boundary patch.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Canvas side length the layout boxes are expressed in, in pixels.
pub const CANVAS: f64 = 1024.0;

/// One regional layer: prompt, canvas box, occlusion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub region_prompt: String,
    /// `[x_top, y_top, x_bottom, y_bottom]` on the 1024x1024 canvas.
    pub layout: [f64; 4],
    /// Occlusion order, `1` = farthest.
    pub order: i64,
}

impl LayerSpec {
    pub fn box_is_degenerate(&self) -> bool {
        let [x0, y0, x1, y1] = self.layout;
        !(x0 < x1 && y0 < y1)
    }

    pub fn box_in_canvas(&self) -> bool {
        let [x0, y0, x1, y1] = self.layout;
        (0.0..=CANVAS).contains(&x0)
            && (0.0..=CANVAS).contains(&y0)
            && (0.0..=CANVAS).contains(&x1)
            && (0.0..=CANVAS).contains(&y1)
    }

    /// Canvas-box intersection test against another layer.
    pub fn box_intersects(&self, other: &LayerSpec) -> bool {
        let [ax0, ay0, ax1, ay1] = self.layout;
        let [bx0, by0, bx1, by1] = other.layout;
        ax0 < bx1 && bx0 < ax1 && ay0 < by1 && by0 < ay1
    }
}

/// The whole scene document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planning: Option<String>,
    pub rewritten_prompt: String,
    pub background_prompt: String,
    pub elements: Vec<LayerSpec>,
}

impl SceneSpec {
    /// Scene prompt used once nursing takes over.
    pub fn scene_prompt(&self) -> &str {
        &self.rewritten_prompt
    }

    /// Layers in ascending occlusion order (processing order).
    pub fn layers_sorted(&self) -> Vec<&LayerSpec> {
        let mut layers: Vec<&LayerSpec> = self.elements.iter().collect();
        layers.sort_by_key(|l| l.order);
        layers
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene spec serializes")
    }
}

fn field_str(obj: &serde_json::Map<String, Value>, name: &str, path: &str) -> Result<String> {
    match obj.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Schema(format!("{path}{name}: expected a string"))),
        None => Err(Error::Schema(format!("{path}{name}"))),
    }
}

/// Parses a layout document. Errors name the missing or ill-typed field.
pub fn parse_layout(document: &str) -> Result<SceneSpec> {
    let root: Value = serde_json::from_str(document)
        .map_err(|e| Error::Schema(format!("document is not valid JSON: {e}")))?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Schema("top level: expected a JSON object".into()))?;

    let planning = match obj.get("planning") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::Schema("planning: expected a string".into())),
    };
    let rewritten_prompt = field_str(obj, "rewritten_prompt", "")?;
    let background_prompt = field_str(obj, "background_prompt", "")?;

    let elements_val = obj
        .get("elements")
        .ok_or_else(|| Error::Schema("elements".into()))?;
    let elements_arr = elements_val
        .as_array()
        .ok_or_else(|| Error::Schema("elements: expected an array".into()))?;

    let mut elements = Vec::with_capacity(elements_arr.len());
    for (i, el) in elements_arr.iter().enumerate() {
        let path = format!("elements[{i}].");
        let el_obj = el
            .as_object()
            .ok_or_else(|| Error::Schema(format!("elements[{i}]: expected an object")))?;
        let region_prompt = field_str(el_obj, "region_prompt", &path)?;
        let layout_val = el_obj
            .get("layout")
            .ok_or_else(|| Error::Schema(format!("{path}layout")))?;
        let layout_arr = layout_val
            .as_array()
            .ok_or_else(|| Error::Schema(format!("{path}layout: expected an array")))?;
        if layout_arr.len() != 4 {
            return Err(Error::Schema(format!(
                "{path}layout: expected 4 coordinates, got {}",
                layout_arr.len()
            )));
        }
        let mut layout = [0.0; 4];
        for (j, coord) in layout_arr.iter().enumerate() {
            layout[j] = coord
                .as_f64()
                .ok_or_else(|| Error::Schema(format!("{path}layout[{j}]: expected a number")))?;
        }
        let order = match el_obj.get("order") {
            Some(v) => v
                .as_i64()
                .ok_or_else(|| Error::Schema(format!("{path}order: expected an integer")))?,
            None => return Err(Error::Schema(format!("{path}order"))),
        };
        elements.push(LayerSpec {
            region_prompt,
            layout,
            order,
        });
    }

    Ok(SceneSpec {
        planning,
        rewritten_prompt,
        background_prompt,
        elements,
    })
}

/// Kinds of layout problems [`validate`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    OutOfCanvas,
    DegenerateBox,
    DuplicateOrder,
    FullyOccluded,
    EmptyPrompt,
    NonPositiveOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Order of the offending layer, when layer-specific.
    pub order: Option<i64>,
    pub detail: String,
    /// True when this entry fails the run (depends on strict mode for
    /// fully-occluded layers).
    pub is_error: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.is_error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| !v.is_error)
    }

    pub fn is_ok(&self) -> bool {
        self.errors().next().is_none()
    }

    /// Turns the report into a `ValidationError` aggregating every
    /// error-severity violation.
    pub fn ensure_valid(&self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let lines: Vec<String> = self.errors().map(|v| v.detail.clone()).collect();
        Err(Error::Validation(lines.join("; ")))
    }
}

/// Checks value-level constraints of a parsed scene.
///
/// A layer is fully occluded when its box is entirely covered by the union
/// of all higher-order boxes; strict mode makes that an error, lenient
/// mode a warning. Everything else (degenerate or out-of-canvas boxes,
/// duplicate or non-positive orders, empty prompts) is always an error.
pub fn validate(spec: &SceneSpec, strict: bool) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |kind, order, detail: String, is_error| {
        violations.push(Violation {
            kind,
            order,
            detail,
            is_error,
        })
    };

    if spec.background_prompt.trim().is_empty() {
        push(
            ViolationKind::EmptyPrompt,
            None,
            "background_prompt is empty".into(),
            true,
        );
    }
    if spec.rewritten_prompt.trim().is_empty() {
        push(
            ViolationKind::EmptyPrompt,
            None,
            "rewritten_prompt is empty".into(),
            true,
        );
    }

    let mut seen_orders: Vec<i64> = Vec::new();
    for layer in &spec.elements {
        let ord = layer.order;
        if layer.region_prompt.trim().is_empty() {
            push(
                ViolationKind::EmptyPrompt,
                Some(ord),
                format!("layer order {ord}: region_prompt is empty"),
                true,
            );
        }
        if ord <= 0 {
            push(
                ViolationKind::NonPositiveOrder,
                Some(ord),
                format!("layer order {ord}: order must be a positive integer"),
                true,
            );
        }
        if seen_orders.contains(&ord) {
            push(
                ViolationKind::DuplicateOrder,
                Some(ord),
                format!("layer order {ord} appears more than once"),
                true,
            );
        }
        seen_orders.push(ord);
        if layer.box_is_degenerate() {
            push(
                ViolationKind::DegenerateBox,
                Some(ord),
                format!("layer order {ord}: box {:?} is degenerate", layer.layout),
                true,
            );
        } else if !layer.box_in_canvas() {
            push(
                ViolationKind::OutOfCanvas,
                Some(ord),
                format!(
                    "layer order {ord}: box {:?} leaves the {CANVAS}x{CANVAS} canvas",
                    layer.layout
                ),
                true,
            );
        }
    }

    // Occlusion: a valid box fully covered by the union of valid
    // higher-order boxes will never be visible.
    for layer in &spec.elements {
        if layer.box_is_degenerate() {
            continue;
        }
        let above: Vec<&LayerSpec> = spec
            .elements
            .iter()
            .filter(|l| l.order > layer.order && !l.box_is_degenerate())
            .collect();
        if !above.is_empty() && box_covered_by_union(&layer.layout, &above) {
            push(
                ViolationKind::FullyOccluded,
                Some(layer.order),
                format!(
                    "layer order {} is fully occluded by higher layers",
                    layer.order
                ),
                strict,
            );
        }
    }

    ValidationReport { violations }
}

/// Exact rectangle-union cover test via coordinate compression.
fn box_covered_by_union(target: &[f64; 4], covers: &[&LayerSpec]) -> bool {
    let [tx0, ty0, tx1, ty1] = *target;
    let mut xs = vec![tx0, tx1];
    let mut ys = vec![ty0, ty1];
    for c in covers {
        let [x0, y0, x1, y1] = c.layout;
        for v in [x0, x1] {
            if v > tx0 && v < tx1 {
                xs.push(v);
            }
        }
        for v in [y0, y1] {
            if v > ty0 && v < ty1 {
                ys.push(v);
            }
        }
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.dedup();
    for wx in xs.windows(2) {
        for wy in ys.windows(2) {
            let cx = 0.5 * (wx[0] + wx[1]);
            let cy = 0.5 * (wy[0] + wy[1]);
            let covered = covers.iter().any(|c| {
                let [x0, y0, x1, y1] = c.layout;
                cx >= x0 && cx < x1 && cy >= y0 && cy < y1
            });
            if !covered {
                return false;
            }
        }
    }
    true
}

/// Token-index set of one region: sorted indices plus the grid-shaped 0/1
/// mask, kept consistent by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionIndexSet {
    pub order: i64,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Sorted token indices, row-major over the grid.
    pub indices: Vec<usize>,
    /// `grid_height x grid_width`, 1 on the region.
    pub mask: Array2<u8>,
    /// Originating canvas box.
    pub box_px: [f64; 4],
}

impl RegionIndexSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Sorted indices of every grid token outside the region.
    pub fn complement(&self) -> Vec<usize> {
        let n = self.grid_height * self.grid_width;
        (0..n).filter(|i| !self.contains(*i)).collect()
    }

    /// Patch-row/col extent: `(row0, row1, col0, col1)`, half-open.
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        let mut r0 = usize::MAX;
        let mut r1 = 0;
        let mut c0 = usize::MAX;
        let mut c1 = 0;
        for &i in &self.indices {
            let (r, c) = (i / self.grid_width, i % self.grid_width);
            r0 = r0.min(r);
            r1 = r1.max(r + 1);
            c0 = c0.min(c);
            c1 = c1.max(c + 1);
        }
        (r0, r1, c0, c1)
    }

    /// Flat mask over `grid_height * grid_width` tokens as 0.0/1.0.
    pub fn mask_flat(&self) -> Array1<f64> {
        let n = self.grid_height * self.grid_width;
        let mut m = Array1::zeros(n);
        for &i in &self.indices {
            m[i] = 1.0;
        }
        m
    }
}

/// Maps a canvas box to the grid tokens whose patch centers it contains.
pub fn box_to_indices(
    box_px: &[f64; 4],
    grid_height: usize,
    grid_width: usize,
    order: i64,
) -> Result<RegionIndexSet> {
    let [x0, y0, x1, y1] = *box_px;
    if !(x0 < x1 && y0 < y1) {
        return Err(Error::Range(format!("degenerate box {box_px:?}")));
    }
    if grid_height == 0 || grid_width == 0 {
        return Err(Error::Range("grid dimensions must be positive".into()));
    }
    let canvas = CANVAS as usize;
    if !canvas.is_multiple_of(grid_height) || !canvas.is_multiple_of(grid_width) {
        return Err(Error::Range(format!(
            "grid {grid_height}x{grid_width} does not divide the {canvas} canvas"
        )));
    }
    let patch_h = CANVAS / grid_height as f64;
    let patch_w = CANVAS / grid_width as f64;
    let mut indices = Vec::new();
    let mut mask = Array2::zeros((grid_height, grid_width));
    for r in 0..grid_height {
        let cy = (r as f64 + 0.5) * patch_h;
        if !(cy >= y0 && cy < y1) {
            continue;
        }
        for c in 0..grid_width {
            let cx = (c as f64 + 0.5) * patch_w;
            if cx >= x0 && cx < x1 {
                indices.push(r * grid_width + c);
                mask[[r, c]] = 1;
            }
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptyRegion(format!(
            "box {box_px:?} contains no patch centers on a {grid_height}x{grid_width} grid"
        )));
    }
    Ok(RegionIndexSet {
        order,
        grid_height,
        grid_width,
        indices,
        mask,
        box_px: *box_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{
        "rewritten_prompt": "a cat on a desk",
        "background_prompt": "a wooden desk",
        "elements": [
            { "region_prompt": "a cat", "layout": [0, 0, 512, 512], "order": 1 }
        ]
    }"#;

    #[test]
    fn parses_minimal_document() {
        let spec = parse_layout(MINIMAL).unwrap();
        assert_eq!(spec.elements.len(), 1);
        assert_eq!(spec.elements[0].layout, [0.0, 0.0, 512.0, 512.0]);
        assert!(spec.planning.is_none());
    }

    #[test]
    fn missing_background_prompt_is_named() {
        let doc = r#"{ "rewritten_prompt": "x", "elements": [] }"#;
        let err = parse_layout(doc).unwrap_err();
        assert_eq!(err.code(), "SchemaError");
        assert!(err.to_string().contains("background_prompt"), "{err}");
    }

    #[test]
    fn ill_typed_field_is_named() {
        let doc = r#"{
            "rewritten_prompt": "x", "background_prompt": "y",
            "elements": [ { "region_prompt": "z", "layout": [0, 0, "a", 1], "order": 1 } ]
        }"#;
        let err = parse_layout(doc).unwrap_err();
        assert!(err.to_string().contains("elements[0].layout[2]"), "{err}");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let doc = r#"{
            "rewritten_prompt": "x", "background_prompt": "y",
            "elements": [], "confidence": 0.9
        }"#;
        assert!(parse_layout(doc).is_ok());
    }

    #[test]
    fn processing_order_sorts_by_order_value() {
        let doc = r#"{
            "rewritten_prompt": "x", "background_prompt": "y",
            "elements": [
                { "region_prompt": "b", "layout": [0,0,100,100], "order": 2 },
                { "region_prompt": "a", "layout": [0,0,100,100], "order": 1 },
                { "region_prompt": "c", "layout": [0,0,100,100], "order": 3 }
            ]
        }"#;
        let spec = parse_layout(doc).unwrap();
        let orders: Vec<i64> = spec.layers_sorted().iter().map(|l| l.order).collect();
        assert_eq!(orders, vec![1, 2, 3]);
    }

    fn scene_with(layers: Vec<LayerSpec>) -> SceneSpec {
        SceneSpec {
            planning: None,
            rewritten_prompt: "scene".into(),
            background_prompt: "bg".into(),
            elements: layers,
        }
    }

    #[test]
    fn degenerate_box_is_flagged() {
        let spec = scene_with(vec![LayerSpec {
            region_prompt: "a".into(),
            layout: [600.0, 600.0, 100.0, 100.0],
            order: 1,
        }]);
        let report = validate(&spec, false);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::DegenerateBox));
        assert!(!report.is_ok());
    }

    #[test]
    fn duplicate_orders_are_flagged() {
        let l = |order| LayerSpec {
            region_prompt: "a".into(),
            layout: [0.0, 0.0, 100.0, 100.0],
            order,
        };
        let report = validate(&scene_with(vec![l(1), l(1)]), false);
        assert!(report
            .violations
            .iter()
            .any(|v| v.kind == ViolationKind::DuplicateOrder));
    }

    #[test]
    fn fully_occluded_layer_strict_vs_lenient() {
        let bottom = LayerSpec {
            region_prompt: "hidden".into(),
            layout: [100.0, 100.0, 200.0, 200.0],
            order: 1,
        };
        let top = LayerSpec {
            region_prompt: "cover".into(),
            layout: [50.0, 50.0, 300.0, 300.0],
            order: 2,
        };
        let spec = scene_with(vec![bottom, top]);
        let lenient = validate(&spec, false);
        assert!(lenient.is_ok());
        assert_eq!(lenient.warnings().count(), 1);
        let strict = validate(&spec, true);
        assert!(!strict.is_ok());
        assert_eq!(strict.ensure_valid().unwrap_err().code(), "ValidationError");
    }

    #[test]
    fn union_cover_needs_the_whole_box() {
        // two half-covers that only jointly occlude
        let bottom = LayerSpec {
            region_prompt: "hidden".into(),
            layout: [0.0, 0.0, 200.0, 200.0],
            order: 1,
        };
        let left = LayerSpec {
            region_prompt: "l".into(),
            layout: [0.0, 0.0, 100.0, 200.0],
            order: 2,
        };
        let right = LayerSpec {
            region_prompt: "r".into(),
            layout: [100.0, 0.0, 200.0, 200.0],
            order: 3,
        };
        let spec = scene_with(vec![bottom.clone(), left.clone()]);
        assert!(validate(&spec, true).is_ok(), "half cover is not occlusion");
        let spec = scene_with(vec![bottom, left, right]);
        assert!(!validate(&spec, true).is_ok(), "joint cover is occlusion");
    }

    #[test]
    fn box_to_indices_quadrant() {
        let region = box_to_indices(&[0.0, 0.0, 512.0, 512.0], 16, 16, 1).unwrap();
        assert_eq!(region.len(), 64);
        assert_eq!(region.rect(), (0, 8, 0, 8));
        assert!(region.contains(0));
        assert!(region.contains(7 * 16 + 7));
        assert!(!region.contains(8));
    }

    #[test]
    fn box_to_indices_full_cover() {
        let region = box_to_indices(&[0.0, 0.0, 1024.0, 1024.0], 16, 16, 1).unwrap();
        assert_eq!(region.len(), 256);
    }

    #[test]
    fn tiny_box_has_no_centers() {
        let err = box_to_indices(&[0.0, 0.0, 10.0, 10.0], 16, 16, 1).unwrap_err();
        assert_eq!(err.code(), "EmptyRegionError");
    }

    #[test]
    fn grid_must_divide_canvas() {
        let err = box_to_indices(&[0.0, 0.0, 512.0, 512.0], 10, 16, 1).unwrap_err();
        assert_eq!(err.code(), "RangeError");
    }

    #[test]
    fn mask_support_equals_index_set() {
        let region = box_to_indices(&[64.0, 128.0, 448.0, 320.0], 16, 16, 1).unwrap();
        let from_mask: Vec<usize> = region
            .mask
            .indexed_iter()
            .filter(|(_, v)| **v == 1)
            .map(|((r, c), _)| r * 16 + c)
            .collect();
        assert_eq!(from_mask, region.indices);
    }

    fn arb_layer(order: i64) -> impl Strategy<Value = LayerSpec> {
        (0u32..15, 0u32..15, 1u32..16, 1u32..16).prop_map(move |(x0, y0, dw, dh)| {
            let x0 = x0 as f64 * 64.0;
            let y0 = y0 as f64 * 64.0;
            let x1 = (x0 + dw as f64 * 64.0).min(CANVAS);
            let y1 = (y0 + dh as f64 * 64.0).min(CANVAS);
            LayerSpec {
                region_prompt: format!("layer {order}"),
                layout: [x0, y0, x1, y1],
                order,
            }
        })
    }

    fn arb_scene() -> impl Strategy<Value = SceneSpec> {
        (1usize..5).prop_flat_map(|n| {
            let layers: Vec<_> = (1..=n as i64).map(arb_layer).collect();
            (
                layers,
                "[a-z ]{1,20}",
                "[a-z ]{1,20}",
                prop::option::of("[a-z ]{0,10}"),
            )
                .prop_map(|(elements, scene, bg, planning)| SceneSpec {
                    planning,
                    rewritten_prompt: scene,
                    background_prompt: bg,
                    elements,
                })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_parse_serialize(spec in arb_scene()) {
            let text = spec.to_json_string();
            let back = parse_layout(&text).unwrap();
            prop_assert_eq!(back, spec);
        }

        #[test]
        fn enlarging_a_box_never_removes_indices(
            x0 in 0.0f64..900.0, y0 in 0.0f64..900.0,
            w in 80.0f64..124.0, h in 80.0f64..124.0,
            grow in 0.0f64..100.0,
        ) {
            let small = [x0, y0, (x0 + w).min(CANVAS), (y0 + h).min(CANVAS)];
            let big = [
                (x0 - grow).max(0.0),
                (y0 - grow).max(0.0),
                (x0 + w + grow).min(CANVAS),
                (y0 + h + grow).min(CANVAS),
            ];
            let a = box_to_indices(&small, 16, 16, 1);
            let b = box_to_indices(&big, 16, 16, 1);
            if let Ok(a) = a {
                let b = b.unwrap();
                for idx in &a.indices {
                    prop_assert!(b.contains(*idx));
                }
            }
        }

        #[test]
        fn validation_is_permutation_insensitive(spec in arb_scene(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = spec.clone();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            shuffled.elements.shuffle(&mut rng);
            let mut a: Vec<_> = validate(&spec, true)
                .violations.into_iter().map(|v| (v.kind, v.order, v.is_error)).collect();
            let mut b: Vec<_> = validate(&shuffled, true)
                .violations.into_iter().map(|v| (v.kind, v.order, v.is_error)).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
