//! Training-free regional and occlusion control on a seeded toy
//! multimodal diffusion transformer.
//!
//! The crate builds a deterministic, desk-scale substrate — a rectified
//! flow Euler sampler over a joint-attention transformer — and layers the
//! control machinery on top of it:
//!
//! * [`flow`] — timestep grid, phase boundaries, and the Euler update.
//! * [`attention`] — joint attention, contextual updates, and the dense
//!   masked reference route.
//! * [`rope`] — 2D axial rotary phases image tokens carry around.
//! * [`layout`] — the region-instructed scene document: parsing,
//!   validation, and box-to-token-index mapping.
//! * [`model`] — the seeded toy MM-DiT, block profiling, and vital-block
//!   selection.
//! * [`init`] — instance-branch construction, the hard-binding and
//!   reverse-adaptation updates, and layer-ordered branch blending.
//! * [`alpha`] — MAD-normalized saliency, screened-Poisson refinement,
//!   Otsu thresholding, and hole filling for foreground mattes.
//! * [`nursing`] — layered local attention enhancement and the
//!   transparency-scheduler compositing.
//! * [`pipeline`] — end-to-end runs, snapshots, and manifests.
//! * [`dump`] — the bit-exact binary tensor file format.
//! * [`bench`] — analytic attention-cost model and wall-clock scaling.
//! * [`cli`] — the operator surface behind the `layerbind` binary.
//!
//! Everything is seeded and single-threaded in its reductions: identical
//! inputs give bitwise-identical outputs, and any saved intermediate state
//! resumes to the identical trajectory.

pub mod alpha;
pub mod attention;
pub mod bench;
pub mod cli;
pub mod dump;
pub mod error;
pub mod flow;
pub mod init;
pub mod layout;
pub mod model;
pub mod nursing;
pub mod pipeline;
pub mod rope;

pub use error::{Error, Result};
