//! Euler sampling over a phase schedule, without the transformer: the
//! velocity field here just pulls every token toward a target pattern,
//! which makes the trajectory easy to eyeball.
//!
//! ```bash
//! cargo run --example sample_trajectory
//! ```

use layerbind::flow::{euler_step, make_schedule, LatentState, Phase};
use ndarray::Array2;

fn main() {
    let schedule = make_schedule(20, 1000.0, 0.2, 0.7, 0).unwrap();
    println!(
        "schedule: {} steps, blend at {}, nursing ends at {}",
        schedule.total_steps, schedule.blend_step, schedule.nursing_end_step
    );

    let target = Array2::from_shape_fn((16, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37).sin());
    let mut state = LatentState::noise(4, 4, 4, 7);

    for k in 0..schedule.total_steps {
        let (t_now, t_next) = (schedule.t(k), schedule.t(k + 1));
        // rectified-flow convention: v points from data toward noise, so
        // integrating down in t contracts the state onto the target
        let velocity = (&state.tokens - &target) / t_now.max(1.0);
        state = euler_step(&state, &velocity, t_now, t_next).unwrap();

        let dist: f64 = (&target - &state.tokens)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let phase = match schedule.phase_of(k) {
            Phase::Warmup => "warmup",
            Phase::InstanceInit => "init",
            Phase::Nursing => "nursing",
            Phase::Tail => "tail",
        };
        println!(
            "step {k:>2} ({phase:<7})  t {t_now:>6.1} -> {t_next:>6.1}   |x - target| = {dist:.4}"
        );
    }
}
