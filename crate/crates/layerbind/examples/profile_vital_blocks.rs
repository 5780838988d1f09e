//! Block profiling and vital-block selection on a small seeded model:
//! record early-step attention maps, split each block's foreground
//! response into self / background / text mass, pick the hard-binding
//! set.
//!
//! ```bash
//! cargo run --example profile_vital_blocks
//! ```

use layerbind::layout::{LayerSpec, SceneSpec};
use layerbind::model::{ModelSpec, FLUX_VITAL_BLOCKS, SD35_VITAL_BLOCKS};
use layerbind::pipeline::{Pipeline, PipelineConfig, ScheduleConfig, VitalBlocksSpec};

fn main() {
    let config = PipelineConfig {
        model: ModelSpec {
            num_blocks: 9,
            d_model: 32,
            heads: 2,
            grid_height: 8,
            grid_width: 8,
            max_text_tokens: 8,
            weight_seed: 21,
        },
        schedule: ScheduleConfig {
            steps: 10,
            eta1: 0.3,
            eta2: 0.8,
            ..ScheduleConfig::default()
        },
        vital_blocks: VitalBlocksSpec::Explicit(vec![0]),
        ..PipelineConfig::default()
    };
    let scene = SceneSpec {
        planning: None,
        rewritten_prompt: "a lighthouse over rocks by the sea".into(),
        background_prompt: "a rocky shore".into(),
        elements: vec![LayerSpec {
            region_prompt: "a lighthouse".into(),
            layout: [256.0, 128.0, 768.0, 896.0],
            order: 1,
        }],
    };
    let pipeline = Pipeline::new(&config, &scene).unwrap();

    let (mut profiles, _) = pipeline.profile(0.2).unwrap();
    let n = profiles.len();
    let split = 2 * n / 3;
    let selection = layerbind::model::select_vital_blocks(
        &profiles,
        2.min(split.saturating_sub(1)),
        6.min(n - split),
    )
    .unwrap();
    layerbind::model::mark_vital(&mut profiles, &selection);

    println!("foreground response per block (early steps, plain attention):");
    for p in &profiles {
        let bar = "#".repeat((p.response_text * 60.0) as usize);
        println!(
            "block {:>2}  self {:.3}  background {:.3}  text {:.3} {}{}",
            p.block_index,
            p.response_self,
            p.response_background,
            p.response_text,
            bar,
            if p.vital { "  <- vital" } else { "" }
        );
    }
    println!("\nselected: {selection:?}");
    println!("reference presets: FLUX {FLUX_VITAL_BLOCKS:?}");
    println!("                   SD3.5 {SD35_VITAL_BLOCKS:?}");
}
