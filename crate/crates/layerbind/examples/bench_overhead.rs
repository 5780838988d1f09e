//! Region-count scaling: analytic attention pairs next to measured wall
//! time, on a reduced config so the example stays quick.
//!
//! ```bash
//! cargo run --release --example bench_overhead
//! ```

use layerbind::bench::{default_bench_config, fit_affine, run_bench, REFERENCE_OVERHEAD_FLUX};
use layerbind::model::ModelSpec;

fn main() {
    let mut config = default_bench_config();
    config.model = ModelSpec {
        num_blocks: 6,
        d_model: 32,
        heads: 2,
        ..ModelSpec::default()
    };
    config.vital_blocks = layerbind::pipeline::VitalBlocksSpec::Explicit(vec![0, 3, 5]);

    let rows = run_bench(&config, &[1, 2, 3, 4, 5, 6], 2).unwrap();
    println!(
        "{:>7}  {:>14}  {:>9}  {:>9}",
        "regions", "score_pairs", "wall_ms", "overhead"
    );
    for row in &rows {
        println!(
            "{:>7}  {:>14}  {:>9.1}  {:>+8.1}%",
            row.regions, row.pair_count, row.wall_ms, row.overhead_pct
        );
    }

    let xs: Vec<f64> = rows[1..].iter().map(|r| r.regions as f64).collect();
    let ys: Vec<f64> = rows[1..].iter().map(|r| r.pair_count as f64).collect();
    let (intercept, slope, r2) = fit_affine(&xs, &ys);
    println!("\npairs ~= {intercept:.0} + {slope:.0} * regions   (r^2 = {r2:.6})");

    let reference: Vec<String> = REFERENCE_OVERHEAD_FLUX
        .iter()
        .map(|(n, p)| format!("{n}:+{p:.0}%"))
        .collect();
    println!(
        "full-scale reference overheads (informational): {}",
        reference.join(" ")
    );
}
