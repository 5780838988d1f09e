//! Attention-cost accounting and wall-clock scaling.
//!
//! The analytic model counts scored (query, key) pairs — summed over
//! heads, blocks, and steps — walking the exact attention calls the
//! forward pass makes per phase. With every region the same size, each
//! added region contributes a constant number of pairs per
//! initialization/nursing step, so the total is affine in the region
//! count rather than quadratic in the extended sequence length.
//!
//! The wall-clock side runs the real pipeline per region count (regions
//! each 25% of the image tokens) and reports overhead against the
//! zero-region baseline.

use std::time::Instant;

use crate::error::Result;
use crate::layout::{LayerSpec, SceneSpec, CANVAS};
use crate::pipeline::{NoHooks, Pipeline, PipelineConfig, ScheduleConfig, VitalBlocksSpec};

/// Reported controller overhead per region count on the FLUX-profile
/// reference stack (percent). Reference metadata, not a target for the
/// toy substrate.
pub const REFERENCE_OVERHEAD_FLUX: [(usize, f64); 6] = [
    (1, 18.0),
    (2, 31.0),
    (3, 45.0),
    (4, 60.0),
    (5, 76.0),
    (6, 89.0),
];
/// Same, for the SD3.5-profile reference stack.
pub const REFERENCE_OVERHEAD_SD35: [(usize, f64); 6] = [
    (1, 24.0),
    (2, 39.0),
    (3, 55.0),
    (4, 73.0),
    (5, 92.0),
    (6, 107.0),
];

/// Everything the pair count depends on.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub heads: usize,
    pub num_blocks: usize,
    pub image_tokens: usize,
    pub background_text_tokens: usize,
    pub scene_text_tokens: usize,
    /// Region sizes in tokens, ascending layer order.
    pub region_sizes: Vec<usize>,
    /// Regional prompt lengths, aligned with `region_sizes`.
    pub regional_text_tokens: Vec<usize>,
    /// Image tokens belonging to no region.
    pub outside_tokens: usize,
    pub vital_blocks: usize,
    pub warmup_steps: usize,
    pub init_steps: usize,
    pub nursing_steps: usize,
    pub tail_steps: usize,
    pub nursing_enabled: bool,
}

impl CostModel {
    pub fn of(pipeline: &Pipeline) -> Self {
        let s = &pipeline.schedule;
        let image_tokens = pipeline.model.spec.image_tokens();
        let outside_tokens = (0..image_tokens)
            .filter(|tok| pipeline.regions.iter().all(|r| !r.contains(*tok)))
            .count();
        CostModel {
            heads: pipeline.model.spec.heads,
            num_blocks: pipeline.model.spec.num_blocks,
            image_tokens,
            background_text_tokens: pipeline.texts.background.nrows(),
            scene_text_tokens: pipeline.texts.scene.nrows(),
            region_sizes: pipeline.regions.iter().map(|r| r.len()).collect(),
            regional_text_tokens: pipeline.texts.regional.iter().map(|t| t.nrows()).collect(),
            outside_tokens,
            vital_blocks: pipeline.vital.len(),
            warmup_steps: s.spawn_step,
            init_steps: s.blend_step - s.spawn_step,
            nursing_steps: s.nursing_end_step - s.blend_step,
            tail_steps: s.total_steps - s.nursing_end_step,
            nursing_enabled: pipeline.nursing.enabled,
        }
    }
}

/// Scored (query, key) pairs over the whole run.
pub fn attention_pair_count(m: &CostModel) -> u128 {
    let ni = m.image_tokens as u128;
    let ntb = m.background_text_tokens as u128;
    let nts = m.scene_text_tokens as u128;
    let heads = m.heads as u128;
    let blocks = m.num_blocks as u128;
    let vital = m.vital_blocks as u128;
    let plain = |nt: u128| (nt + ni) * (nt + ni);

    // per-block pair counts in each phase
    let warmup_block = plain(ntb);
    let tail_block = plain(nts);

    let mut init_regular = plain(ntb); // non-vital block
    let mut init_vital = plain(ntb);
    let outside = m.outside_tokens as u128;
    for (size, treg) in m.region_sizes.iter().zip(&m.regional_text_tokens) {
        let nb = *size as u128;
        let bg = ni - nb;
        let tr = *treg as u128;
        // grounded update + regional text update
        init_regular += nb * (nb + bg + tr) + tr * (tr + nb + bg);
        // hard binding + regional text update + reverse adaptation
        init_vital += nb * (nb + tr) + tr * (tr + nb + bg) + bg * (bg + ntb + nb);
    }
    if !m.region_sizes.is_empty() {
        init_vital += ntb * (ntb + outside); // background-text structured update
    }

    let mut nursing_block = plain(nts);
    if m.nursing_enabled {
        for (size, treg) in m.region_sizes.iter().zip(&m.regional_text_tokens) {
            let nr = *size as u128;
            let tr = *treg as u128;
            nursing_block += nr * (ni + tr) + tr * (tr + nr + nts);
        }
    }

    let init_total = init_vital * vital + init_regular * (blocks - vital.min(blocks));
    let per_step_warmup = warmup_block * blocks;
    let per_step_tail = tail_block * blocks;
    let per_step_nursing = nursing_block * blocks;

    heads
        * (per_step_warmup * m.warmup_steps as u128
            + init_total * m.init_steps as u128
            + per_step_nursing * m.nursing_steps as u128
            + per_step_tail * m.tail_steps as u128)
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, r_squared)`.
pub fn fit_affine(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    (intercept, slope, r2)
}

/// Synthetic scene with `count` overlapping regions, each a quarter of the
/// canvas area (25% of the image tokens on any grid that divides 2).
pub fn bench_scene(count: usize) -> SceneSpec {
    let half = CANVAS / 2.0;
    let anchors = [
        (0.0, 0.0),
        (0.25, 0.25),
        (0.5, 0.0),
        (0.0, 0.5),
        (0.5, 0.5),
        (0.25, 0.0),
    ];
    let elements = (0..count)
        .map(|i| {
            let (fx, fy) = anchors[i % anchors.len()];
            let x0 = fx * CANVAS;
            let y0 = fy * CANVAS;
            LayerSpec {
                region_prompt: format!("instance number {}", i + 1),
                layout: [x0, y0, x0 + half, y0 + half],
                order: (i + 1) as i64,
            }
        })
        .collect();
    SceneSpec {
        planning: None,
        rewritten_prompt: "a busy synthetic benchmark scene".into(),
        background_prompt: "a flat benchmark background".into(),
        elements,
    }
}

/// Defaults tuned so the initialization and nursing phases carry a
/// meaningful share of the work.
pub fn default_bench_config() -> PipelineConfig {
    PipelineConfig {
        schedule: ScheduleConfig {
            steps: 10,
            max_timestep: 1000.0,
            eta1: 0.4,
            eta2: 0.8,
            spawn_step: 0,
        },
        vital_blocks: VitalBlocksSpec::Explicit(vec![0, 6, 10]),
        blend_mode: crate::alpha::AlphaMode::Direct,
        ..PipelineConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub regions: usize,
    pub pair_count: u128,
    pub wall_ms: f64,
    /// Percent over the zero-region baseline.
    pub overhead_pct: f64,
}

/// Times the pipeline per region count (best of `repeats`) and pairs the
/// measurement with the analytic count. Row 0 is always the baseline.
pub fn run_bench(
    config: &PipelineConfig,
    counts: &[usize],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    let mut all_counts = vec![0usize];
    all_counts.extend(counts.iter().filter(|c| **c > 0));
    let mut rows = Vec::with_capacity(all_counts.len());
    let mut baseline_ms = None;
    for &count in &all_counts {
        let scene = bench_scene(count);
        let pipeline = Pipeline::new(config, &scene)?;
        let pair_count = attention_pair_count(&CostModel::of(&pipeline));
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            pipeline.sample(&mut NoHooks)?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
        }
        let overhead = match baseline_ms {
            None => {
                baseline_ms = Some(best);
                0.0
            }
            Some(base) => (best / base - 1.0) * 100.0,
        };
        rows.push(BenchRow {
            regions: count,
            pair_count,
            wall_ms: best,
            overhead_pct: overhead,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost_for(regions: usize) -> u128 {
        let config = default_bench_config();
        let pipeline = Pipeline::new(&config, &bench_scene(regions)).unwrap();
        attention_pair_count(&CostModel::of(&pipeline))
    }

    #[test]
    fn pair_count_deltas_are_exactly_constant_for_disjoint_regions() {
        // four disjoint quadrants: with outside tokens shrinking by
        // exactly one region per layer, the increment is a constant
        let quadrants = [
            [0.0, 0.0, 512.0, 512.0],
            [512.0, 0.0, 1024.0, 512.0],
            [0.0, 512.0, 512.0, 1024.0],
            [512.0, 512.0, 1024.0, 1024.0],
        ];
        let config = default_bench_config();
        let counts: Vec<u128> = (0..=4)
            .map(|n| {
                let elements = quadrants[..n]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| LayerSpec {
                        region_prompt: "same length prompt".into(),
                        layout: *b,
                        order: (i + 1) as i64,
                    })
                    .collect();
                let scene = SceneSpec {
                    planning: None,
                    rewritten_prompt: "scene".into(),
                    background_prompt: "bg".into(),
                    elements,
                };
                let pipeline = Pipeline::new(&config, &scene).unwrap();
                attention_pair_count(&CostModel::of(&pipeline))
            })
            .collect();
        let deltas: Vec<u128> = counts.windows(2).map(|w| w[1] - w[0]).collect();
        for pair in deltas[1..].windows(2) {
            assert_eq!(pair[0], pair[1], "deltas {deltas:?}");
        }
    }

    #[test]
    fn affine_fit_of_pair_counts_is_exact() {
        let xs: Vec<f64> = (1..=6).map(|r| r as f64).collect();
        let ys: Vec<f64> = (1..=6).map(|r| cost_for(r) as f64).collect();
        let (_, slope, r2) = fit_affine(&xs, &ys);
        assert!(slope > 0.0);
        assert!(r2 >= 0.99, "r2 = {r2}");
    }

    #[test]
    fn initialization_phase_cost_is_affine_in_branch_tokens() {
        // isolate the branch-carrying steps: no warmup, nursing, or tail
        let base = CostModel {
            heads: 4,
            num_blocks: 12,
            image_tokens: 256,
            background_text_tokens: 6,
            scene_text_tokens: 8,
            region_sizes: vec![],
            regional_text_tokens: vec![],
            outside_tokens: 256,
            vital_blocks: 3,
            warmup_steps: 0,
            init_steps: 4,
            nursing_steps: 0,
            tail_steps: 0,
            nursing_enabled: false,
        };
        let cost = |regions: usize| {
            let mut m = base.clone();
            m.region_sizes = vec![64; regions];
            m.regional_text_tokens = vec![3; regions];
            m.outside_tokens = 256usize.saturating_sub(64 * regions);
            attention_pair_count(&m)
        };
        let counts: Vec<u128> = (1..=4).map(cost).collect();
        let deltas: Vec<u128> = counts.windows(2).map(|w| w[1] - w[0]).collect();
        for pair in deltas.windows(2) {
            assert_eq!(pair[0], pair[1], "phase-1 deltas {deltas:?}");
        }
    }

    #[test]
    fn fit_affine_recovers_known_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let (a, b, r2) = fit_affine(&xs, &ys);
        assert!((a - 1.0).abs() < 1e-12);
        assert!((b - 2.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bench_scene_regions_are_a_quarter_each() {
        let scene = bench_scene(6);
        assert_eq!(scene.elements.len(), 6);
        for layer in &scene.elements {
            let region = crate::layout::box_to_indices(&layer.layout, 16, 16, layer.order).unwrap();
            assert_eq!(region.len(), 64, "order {}", layer.order);
        }
    }

    #[test]
    fn reference_overhead_tables_are_pinned() {
        assert_eq!(REFERENCE_OVERHEAD_FLUX[0], (1, 18.0));
        assert_eq!(REFERENCE_OVERHEAD_FLUX[5], (6, 89.0));
        assert_eq!(REFERENCE_OVERHEAD_SD35[0], (1, 24.0));
        assert_eq!(REFERENCE_OVERHEAD_SD35[5], (6, 107.0));
    }
}
