//! The transparency scheduler: stacking per-layer enhancements onto a
//! global field in occlusion order, and why that order matters.
//!
//! ```bash
//! cargo run --example layered_compositing
//! ```

use layerbind::nursing::composite_layers;
use ndarray::{Array1, Array2};

fn show(label: &str, field: &Array2<f64>, width: usize) {
    print!("{label:<22}");
    for c in 0..width {
        print!(" {:>5.2}", field[[c, 0]]);
    }
    println!();
}

fn main() {
    let width = 10;
    let global = Array2::zeros((width, 1));

    // layer 1 covers tokens 0..6 with value 1, layer 2 covers 4..10 with
    // value 2; they overlap on 4..6
    let local1 = Array2::from_elem((width, 1), 1.0);
    let local2 = Array2::from_elem((width, 1), 2.0);
    let mask1 = Array1::from_shape_fn(width, |c| if c < 6 { 1.0 } else { 0.0 });
    let mask2 = Array1::from_shape_fn(width, |c| if c >= 4 { 1.0 } else { 0.0 });
    let beta = 0.7;

    println!("beta = {beta}, layer 1 on tokens 0..6 (value 1), layer 2 on 4..10 (value 2)\n");
    show("global", &global, width);

    let composed = composite_layers(
        &global,
        &[local1.clone(), local2.clone()],
        &[mask1.clone(), mask2.clone()],
        &[1, 2],
        beta,
    )
    .unwrap();
    show("composite (1 then 2)", &composed, width);

    let swapped =
        composite_layers(&global, &[local2, local1], &[mask2, mask1], &[1, 2], beta).unwrap();
    show("composite (2 then 1)", &swapped, width);

    let overlap = 4;
    println!(
        "\noverlap token {overlap}: {:.4} vs {:.4} — the nearer layer keeps coefficient beta",
        composed[[overlap, 0]],
        swapped[[overlap, 0]]
    );
    // the spelled-out recursion for the overlap, layers 1 then 2:
    let by_hand = (1.0 - beta) * ((1.0 - beta) * 0.0 + beta * 1.0) + beta * 2.0;
    println!("recursion by hand:  (1-b)((1-b)*0 + b*1) + b*2 = {by_hand:.4}");
}
