//! End-to-end run: a three-layer scene with overlapping boxes through
//! branch construction, hard binding, blending, and nursing, with dumps
//! and a rerunnable manifest.
//!
//! ```bash
//! cargo run --release --example full_pipeline
//! ```

use layerbind::cli::cmd_run;
use layerbind::dump::read_tensor;
use layerbind::layout::{LayerSpec, SceneSpec};
use layerbind::pipeline::{PipelineConfig, VitalBlocksSpec};

fn main() {
    let scene = SceneSpec {
        planning: Some("bowl in back, pear overlapping it, fly closest".into()),
        rewritten_prompt: "a pear leaning on a bowl with a fly on top".into(),
        background_prompt: "a kitchen counter at dusk".into(),
        elements: vec![
            LayerSpec {
                region_prompt: "a ceramic bowl".into(),
                layout: [128.0, 320.0, 704.0, 896.0],
                order: 1,
            },
            LayerSpec {
                region_prompt: "a green pear".into(),
                layout: [448.0, 384.0, 896.0, 832.0],
                order: 2,
            },
            LayerSpec {
                region_prompt: "a small fly".into(),
                layout: [576.0, 256.0, 832.0, 512.0],
                order: 3,
            },
        ],
    };
    let config = PipelineConfig {
        vital_blocks: VitalBlocksSpec::Explicit(vec![0, 8, 10]),
        dump: layerbind::pipeline::DumpOptions {
            trajectory_every: 5,
            alpha_masks: true,
            composites: false,
        },
        output_dir: std::env::temp_dir().join("layerbind-example"),
        ..PipelineConfig::default()
    };

    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).unwrap();
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let layout_path = dir.join("layout.json");
    std::fs::write(&layout_path, scene.to_json_string()).unwrap();

    let started = std::time::Instant::now();
    let artifacts = cmd_run(&config_path, Some(&layout_path), false, None, None).unwrap();
    println!("run finished in {:.2?}", started.elapsed());
    println!("output dir: {}", artifacts.output_dir.display());

    let (dims, data) = read_tensor(&artifacts.final_latent).unwrap();
    let rms =
        (data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / data.len() as f64).sqrt();
    println!("final latent dims {dims:?}, rms {rms:.4}");
    for path in &artifacts.trajectory {
        println!("trajectory dump: {}", path.display());
    }
    for path in &artifacts.alpha_masks {
        let (dims, alpha) = read_tensor(path).unwrap();
        let fg = alpha.iter().filter(|a| **a > 0.5).count();
        println!(
            "alpha dump {} ({dims:?}): {fg}/{} tokens above 0.5",
            path.display(),
            alpha.len()
        );
    }
    println!(
        "rerun with: layerbind run --config {}",
        artifacts.manifest.display()
    );
}
