//! The alpha-matting chain on synthetic data: a branch that differs from
//! the global latent inside a disk, MAD-scaled saliency, screened-Poisson
//! refinement, Otsu thresholding, and hole filling.
//!
//! ```bash
//! cargo run --example alpha_matte
//! ```

use layerbind::alpha::{estimate_alpha, morph_fill, otsu_threshold, AlphaParams};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ascii(field: &Array2<f64>) -> String {
    let ramp = [' ', '.', ':', '+', '#'];
    field
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|v| ramp[((v * 4.0).round() as usize).min(4)])
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w, d) = (12usize, 12usize, 8usize);

    // global latent region and a branch that deviates inside a disk,
    // with a deliberate hole in the middle
    let global = Array2::from_shape_fn((h * w, d), |_| rng.gen_range(-1.0f64..1.0));
    let mut branch = global.clone();
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = (r as f64 - 5.5, c as f64 - 5.5);
            let radius = (dr * dr + dc * dc).sqrt();
            if radius < 4.0 && radius > 1.5 {
                for v in branch.row_mut(r * w + c).iter_mut() {
                    *v += rng.gen_range(1.0..2.0);
                }
            }
        }
    }
    let ring = Array2::from_shape_fn((40, d), |_| rng.gen_range(-1.0f64..1.0));

    let mask = estimate_alpha(&branch, &global, &ring, h, w, &AlphaParams::default()).unwrap();
    println!(
        "soft alpha ({} iterations, converged = {}):\n{}\n",
        mask.iterations,
        mask.converged,
        ascii(&mask.values)
    );

    let binary = otsu_threshold(&mask.values);
    println!("after Otsu threshold:\n{}\n", ascii(&binary));

    let filled = morph_fill(&binary);
    println!("after hole filling:\n{}", ascii(&filled));
}
