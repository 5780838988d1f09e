//! Layout parsing, validation, and box-to-token mapping.
//!
//! ```bash
//! cargo run --example validate_layout [path/to/layout.json]
//! ```

use layerbind::layout::{box_to_indices, parse_layout, validate};

const SAMPLE: &str = r#"{
  "planning": "table in front, teapot behind the cup, cup closest",
  "rewritten_prompt": "a teapot and a cup of tea on a rustic table",
  "background_prompt": "a rustic wooden table, soft morning light",
  "elements": [
    { "region_prompt": "a ceramic teapot", "layout": [128, 256, 640, 768], "order": 1 },
    { "region_prompt": "a cup of tea",     "layout": [448, 512, 832, 896], "order": 2 }
  ]
}"#;

fn main() {
    let text = match std::env::args().nth(1) {
        Some(path) => std::fs::read_to_string(path).expect("readable layout file"),
        None => SAMPLE.to_string(),
    };
    let scene = match parse_layout(&text) {
        Ok(scene) => scene,
        Err(e) => {
            eprintln!("parse failed ({}): {e}", e.code());
            std::process::exit(e.exit_code());
        }
    };
    println!("scene prompt:      {}", scene.scene_prompt());
    println!("background prompt: {}", scene.background_prompt);

    let report = validate(&scene, false);
    for v in &report.violations {
        println!(
            "{}: {}",
            if v.is_error { "error" } else { "warning" },
            v.detail
        );
    }
    if report.violations.is_empty() {
        println!("no violations");
    }

    for layer in scene.layers_sorted() {
        match box_to_indices(&layer.layout, 16, 16, layer.order) {
            Ok(region) => {
                let (r0, r1, c0, c1) = region.rect();
                println!(
                    "order {}: {:?} -> {} tokens, patch rows {r0}..{r1}, cols {c0}..{c1}",
                    layer.order,
                    layer.layout,
                    region.len()
                );
            }
            Err(e) => println!("order {}: {e}", layer.order),
        }
    }
}
