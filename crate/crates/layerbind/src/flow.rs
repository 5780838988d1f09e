//! Rectified-flow sampling grid and the explicit Euler update.
//!
//! States move from `max_timestep` down to 0 on a linearly spaced grid of
//! `S + 1` timesteps. Step `k` (0-indexed) advances the latent from `t_k`
//! to `t_{k+1}`:
//!
//! ```text
//! x_{k+1} = x_k + (t_{k+1} - t_k) * v(x_k, t_k)
//! ```
//!
//! The control phases hang off step indices derived from the two ratios
//! `eta1` and `eta2`:
//!
//! ```text
//! blend_step       = floor(eta1 * S)   // branches fused once x_{blend_step} exists
//! nursing_end_step = floor(eta2 * S)   // layered enhancement stops here
//! ```
//!
//! Step `k` runs under [`Phase::InstanceInit`] for
//! `spawn_step <= k < blend_step`, under [`Phase::Nursing`] for
//! `blend_step <= k < nursing_end_step`, and plain joint attention
//! elsewhere. The blend itself fires right after the velocity update that
//! produces `x_{blend_step}`, before any evaluation at that state.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Initialization-ratio default matching the FLUX profile.
pub const FLUX_ETA1: f64 = 0.2;
/// Initialization-ratio default matching the SD3.5 profile.
pub const SD35_ETA1: f64 = 0.25;
/// Default nursing ratio shared by both profiles.
pub const DEFAULT_ETA2: f64 = 0.7;
/// Default maximum diffusion timestep.
pub const DEFAULT_MAX_TIMESTEP: f64 = 1000.0;

/// Which control machinery is active during a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Before branch spawn: plain denoising under the background prompt.
    Warmup,
    /// Branches alive and denoising alongside the global latent.
    InstanceInit,
    /// Post-blend layered attention enhancement.
    Nursing,
    /// Plain denoising under the scene prompt until t = 0.
    Tail,
}

/// Step grid plus the phase boundaries derived from (eta1, eta2).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    pub total_steps: usize,
    pub max_timestep: f64,
    /// `total_steps + 1` strictly decreasing timesteps, `t_0 = T`, `t_S = 0`.
    pub timesteps: Vec<f64>,
    pub eta1: f64,
    pub eta2: f64,
    pub spawn_step: usize,
    pub blend_step: usize,
    pub nursing_end_step: usize,
}

impl PhaseSchedule {
    /// Timestep value at grid index `k` (0..=S).
    pub fn t(&self, k: usize) -> f64 {
        self.timesteps[k]
    }

    /// Phase governing the velocity evaluation of step `k`.
    pub fn phase_of(&self, k: usize) -> Phase {
        if k < self.spawn_step {
            Phase::Warmup
        } else if k < self.blend_step {
            Phase::InstanceInit
        } else if k < self.nursing_end_step {
            Phase::Nursing
        } else {
            Phase::Tail
        }
    }
}

/// Builds the linearly spaced schedule and validates all phase orderings.
pub fn make_schedule(
    total_steps: usize,
    max_timestep: f64,
    eta1: f64,
    eta2: f64,
    spawn_step: usize,
) -> Result<PhaseSchedule> {
    if total_steps < 2 {
        return Err(Error::Range(format!(
            "total_steps must be >= 2, got {total_steps}"
        )));
    }
    if !(max_timestep.is_finite() && max_timestep > 0.0) {
        return Err(Error::Range(format!(
            "max_timestep must be positive, got {max_timestep}"
        )));
    }
    if !(eta1 > 0.0 && eta1 < 1.0) {
        return Err(Error::Range(format!("eta1 must lie in (0, 1), got {eta1}")));
    }
    if !(eta2 > 0.0 && eta2 <= 1.0) {
        return Err(Error::Range(format!("eta2 must lie in (0, 1], got {eta2}")));
    }
    if eta1 >= eta2 {
        return Err(Error::Ordering(format!(
            "eta1 ({eta1}) must be < eta2 ({eta2})"
        )));
    }
    let blend_step = (eta1 * total_steps as f64).floor() as usize;
    let nursing_end_step = (eta2 * total_steps as f64).floor() as usize;
    if spawn_step >= blend_step {
        return Err(Error::Ordering(format!(
            "spawn_step ({spawn_step}) must be < blend_step ({blend_step})"
        )));
    }
    if blend_step >= nursing_end_step {
        return Err(Error::Ordering(format!(
            "blend_step ({blend_step}) must be < nursing_end_step ({nursing_end_step})"
        )));
    }
    let s = total_steps as f64;
    let timesteps: Vec<f64> = (0..=total_steps)
        .map(|k| max_timestep * (1.0 - k as f64 / s))
        .collect();
    Ok(PhaseSchedule {
        total_steps,
        max_timestep,
        timesteps,
        eta1,
        eta2,
        spawn_step,
        blend_step,
        nursing_end_step,
    })
}

/// Grid of image latent tokens: one feature row per patch, row-major by
/// grid row, plus step bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub grid_height: usize,
    pub grid_width: usize,
    pub channels: usize,
    /// `(grid_height * grid_width) x channels`.
    pub tokens: Array2<f64>,
    pub step_index: usize,
}

impl LatentState {
    pub fn token_count(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Standard-normal noise latent drawn from a seeded generator.
    pub fn noise(grid_height: usize, grid_width: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid_height * grid_width;
        let tokens = Array2::from_shape_fn((n, channels), |_| StandardNormal.sample(&mut rng));
        LatentState {
            grid_height,
            grid_width,
            channels,
            tokens,
            step_index: 0,
        }
    }

    pub fn from_tokens(grid_height: usize, grid_width: usize, tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() != grid_height * grid_width {
            return Err(Error::Shape(format!(
                "token count {} != grid {}x{}",
                tokens.nrows(),
                grid_height,
                grid_width
            )));
        }
        let channels = tokens.ncols();
        Ok(LatentState {
            grid_height,
            grid_width,
            channels,
            tokens,
            step_index: 0,
        })
    }
}

/// One explicit Euler update. `t_next <= t_current`; the velocity must be
/// finite and match the latent's token matrix shape.
pub fn euler_step(
    x: &LatentState,
    velocity: &Array2<f64>,
    t_current: f64,
    t_next: f64,
) -> Result<LatentState> {
    if velocity.dim() != x.tokens.dim() {
        return Err(Error::Shape(format!(
            "velocity {:?} vs latent {:?}",
            velocity.dim(),
            x.tokens.dim()
        )));
    }
    if t_next > t_current {
        return Err(Error::Ordering(format!(
            "t_next ({t_next}) must be <= t_current ({t_current})"
        )));
    }
    if velocity.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("velocity contains NaN or infinity".into()));
    }
    let dt = t_next - t_current;
    let tokens = &x.tokens + &(velocity * dt);
    Ok(LatentState {
        grid_height: x.grid_height,
        grid_width: x.grid_width,
        channels: x.channels,
        tokens,
        step_index: x.step_index + 1,
    })
}
