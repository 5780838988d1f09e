//! End-to-end runs: configuration, the step loop, snapshots, manifests.
//!
//! A run owns a seeded model, a phase schedule, and the parsed scene. The
//! loop is plain Euler stepping with the control machinery attached at
//! the schedule's step indices:
//!
//! * step `spawn_step` starts by copying branches out of the latent,
//! * steps in `[spawn_step, blend_step)` run the initialization policy,
//! * right after `x_{blend_step}` exists the branches blend back in,
//! * steps in `[blend_step, nursing_end_step)` run the nursing policy,
//! * everything else is plain denoising.
//!
//! State is `(step, latent, branches)`; saving it at any step and
//! resuming reproduces the remaining trajectory bitwise, which is what
//! the restart tests check. The manifest embeds the resolved config plus
//! the scene, so a rerun from the manifest is the identical run.

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alpha::{AlphaMask, AlphaMode, AlphaParams};
use crate::error::{Error, Result};
use crate::flow::{euler_step, make_schedule, LatentState, Phase, PhaseSchedule};
use crate::init::{blend_branches, construct_branches, InstanceBranch};
use crate::layout::{box_to_indices, RegionIndexSet, SceneSpec};
use crate::model::{
    mark_vital, profile_blocks, select_vital_blocks, AttentionRecorder, BlockProfile, ForwardStats,
    MainText, ModelSpec, PhasePolicy, TextStreams, ToyMmdit, FLUX_VITAL_BLOCKS, SD35_VITAL_BLOCKS,
};
use crate::nursing::NursingConfig;

/// Fraction of the schedule profiled when vital blocks resolve to "auto".
pub const DEFAULT_PROFILE_FRAC: f64 = 0.2;

/// Environment variable overriding the config seed.
pub const SEED_ENV_VAR: &str = "LAYERBIND_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub max_timestep: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub spawn_step: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 20,
            max_timestep: 1000.0,
            eta1: 0.2,
            eta2: 0.7,
            spawn_step: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<PhaseSchedule> {
        make_schedule(
            self.steps,
            self.max_timestep,
            self.eta1,
            self.eta2,
            self.spawn_step,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    Flux,
    Sd35,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VitalMode {
    Auto,
}

/// How the hard-binding block set is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VitalBlocksSpec {
    /// `"auto"`: profile the first steps and select.
    Mode(VitalMode),
    /// `{"preset": "flux" | "sd35"}`: a pinned reference list, filtered to
    /// the blocks this model actually has.
    Preset { preset: ModelPreset },
    /// Explicit block indices.
    Explicit(Vec<usize>),
}

impl Default for VitalBlocksSpec {
    fn default() -> Self {
        VitalBlocksSpec::Mode(VitalMode::Auto)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DumpOptions {
    /// Dump the latent every N steps (0 disables trajectory dumps).
    pub trajectory_every: usize,
    pub alpha_masks: bool,
    pub composites: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub schedule: ScheduleConfig,
    /// Noise seed (overridden by `LAYERBIND_SEED` when set).
    pub seed: u64,
    pub vital_blocks: VitalBlocksSpec,
    /// Blend mode applied to every layer unless `per_layer_blend` is set.
    pub blend_mode: AlphaMode,
    /// Per-layer blend modes in ascending occlusion order.
    pub per_layer_blend: Option<Vec<AlphaMode>>,
    pub nursing: NursingConfig,
    pub alpha: AlphaParams,
    pub dump: DumpOptions,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelSpec::default(),
            schedule: ScheduleConfig::default(),
            seed: 42,
            vital_blocks: VitalBlocksSpec::default(),
            blend_mode: AlphaMode::Soft,
            per_layer_blend: None,
            nursing: NursingConfig::default(),
            alpha: AlphaParams::default(),
            dump: DumpOptions::default(),
            output_dir: PathBuf::from("layerbind-out"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.nursing.validate()?;
        let a = &self.alpha;
        if !(a.gamma > 0.0) {
            return Err(Error::Range(format!(
                "alpha.gamma must be positive, got {}",
                a.gamma
            )));
        }
        if !(a.epsilon > 0.0) {
            return Err(Error::Range(format!(
                "alpha.epsilon must be positive, got {}",
                a.epsilon
            )));
        }
        if !(a.lambda > 0.0) {
            return Err(Error::Range(format!(
                "alpha.lambda must be positive, got {}",
                a.lambda
            )));
        }
        if !(a.tol > 0.0) {
            return Err(Error::Range(format!(
                "alpha.tol must be positive, got {}",
                a.tol
            )));
        }
        if a.max_iters == 0 {
            return Err(Error::Range("alpha.max_iters must be positive".into()));
        }
        self.schedule.build()?;
        Ok(())
    }

    /// Applies the `LAYERBIND_SEED` override, when present.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(text) = std::env::var(SEED_ENV_VAR) {
            let seed = text
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR}={text:?} is not a u64 seed")))?;
            self.seed = seed;
        }
        Ok(self)
    }
}

/// Everything a rerun needs: resolved config plus the scene itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PipelineConfig,
    pub scene: SceneSpec,
    /// Vital blocks the run actually used (informational; a rerun
    /// re-resolves them identically).
    pub resolved_vital_blocks: Vec<usize>,
}

/// A config file is either a bare config (scene comes from `--layout`) or
/// a manifest with the scene embedded.
#[derive(Debug, Clone)]
pub enum RunInput {
    Config(PipelineConfig),
    Manifest(Manifest),
}

pub fn parse_run_input(text: &str) -> Result<RunInput> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    if value.get("scene").is_some() {
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        Ok(RunInput::Manifest(manifest))
    } else {
        let config: PipelineConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("config: {e}")))?;
        Ok(RunInput::Config(config))
    }
}

/// Mutable per-run state: enough to resume a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    /// Steps already taken; the latent sits at `timesteps[step]`.
    pub step: usize,
    pub latent: LatentState,
    /// Alive between spawn and blend, empty otherwise.
    pub branches: Vec<InstanceBranch>,
}

/// Step callbacks. `after_state` runs once the state for `step` exists
/// (post-Euler, post-blend) and may mutate it; dumps and the
/// rearrangement tests hang off this.
pub trait SampleHooks {
    fn after_state(&mut self, step: usize, state: &mut PipelineState) -> Result<()> {
        let _ = (step, state);
        Ok(())
    }
}

pub struct NoHooks;

impl SampleHooks for NoHooks {}

/// Hook from a closure.
pub struct FnHook<F: FnMut(usize, &mut PipelineState) -> Result<()>>(pub F);

impl<F: FnMut(usize, &mut PipelineState) -> Result<()>> SampleHooks for FnHook<F> {
    fn after_state(&mut self, step: usize, state: &mut PipelineState) -> Result<()> {
        (self.0)(step, state)
    }
}

/// Captures a deep copy of the state at one step.
#[derive(Default)]
pub struct SnapshotHook {
    pub at_step: usize,
    pub snapshot: Option<PipelineState>,
}

impl SnapshotHook {
    pub fn at(step: usize) -> Self {
        SnapshotHook {
            at_step: step,
            snapshot: None,
        }
    }
}

impl SampleHooks for SnapshotHook {
    fn after_state(&mut self, step: usize, state: &mut PipelineState) -> Result<()> {
        if step == self.at_step {
            self.snapshot = Some(state.clone());
        }
        Ok(())
    }
}

/// Output of a run (or of a resumed tail of one).
#[derive(Debug, Clone)]
pub struct SampleRun {
    /// Saved latents: the starting state plus one per executed step.
    pub trajectory: Vec<LatentState>,
    /// Alpha masks estimated at the blend, by layer order.
    pub alphas: Vec<(i64, AlphaMask)>,
    /// Final-block nursing composites per step, when collected.
    pub composites: Vec<(usize, Array2<f64>)>,
    pub stats: ForwardStats,
    pub final_state: PipelineState,
}

impl SampleRun {
    pub fn final_latent(&self) -> &LatentState {
        &self.final_state.latent
    }
}

/// A fully resolved run: model, schedule, scene, vital blocks, modes.
#[derive(Debug)]
pub struct Pipeline {
    pub model: ToyMmdit,
    pub schedule: PhaseSchedule,
    pub scene: SceneSpec,
    /// Regions in ascending occlusion order.
    pub regions: Vec<RegionIndexSet>,
    pub texts: TextStreams,
    pub vital: BTreeSet<usize>,
    /// Blend mode per region, ascending order.
    pub blend_modes: Vec<AlphaMode>,
    pub nursing: NursingConfig,
    pub alpha_params: AlphaParams,
    pub seed: u64,
    /// Kept when vital blocks were auto-selected.
    pub profiles: Option<Vec<BlockProfile>>,
    collect_composites: bool,
}

impl Pipeline {
    /// Resolves a validated scene against the config. The scene should
    /// already have passed [`crate::layout::validate`]; this only enforces
    /// what it needs structurally (buildable regions, ascending orders).
    pub fn new(config: &PipelineConfig, scene: &SceneSpec) -> Result<Self> {
        config.validate()?;
        let model = ToyMmdit::new(config.model)?;
        let schedule = config.schedule.build()?;
        let spec = &config.model;

        let mut regions = Vec::new();
        for layer in scene.layers_sorted() {
            regions.push(box_to_indices(
                &layer.layout,
                spec.grid_height,
                spec.grid_width,
                layer.order,
            )?);
        }
        for pair in regions.windows(2) {
            if pair[0].order >= pair[1].order {
                return Err(Error::Order(format!(
                    "duplicate layer order {}",
                    pair[1].order
                )));
            }
        }

        let texts = TextStreams {
            background: model.encode_prompt(&scene.background_prompt),
            scene: model.encode_prompt(scene.scene_prompt()),
            regional: scene
                .layers_sorted()
                .iter()
                .map(|l| model.encode_prompt(&l.region_prompt))
                .collect(),
        };

        let blend_modes = match &config.per_layer_blend {
            Some(modes) => {
                if modes.len() != regions.len() {
                    return Err(Error::Config(format!(
                        "per_layer_blend has {} entries for {} layers",
                        modes.len(),
                        regions.len()
                    )));
                }
                modes.clone()
            }
            None => vec![config.blend_mode; regions.len()],
        };

        let mut pipeline = Pipeline {
            model,
            schedule,
            scene: scene.clone(),
            regions,
            texts,
            vital: BTreeSet::new(),
            blend_modes,
            nursing: config.nursing,
            alpha_params: config.alpha,
            seed: config.seed,
            profiles: None,
            collect_composites: config.dump.composites,
        };
        pipeline.vital = pipeline.resolve_vital(&config.vital_blocks)?;
        Ok(pipeline)
    }

    fn resolve_vital(&mut self, spec: &VitalBlocksSpec) -> Result<BTreeSet<usize>> {
        let num_blocks = self.model.spec.num_blocks;
        match spec {
            VitalBlocksSpec::Explicit(list) => {
                for &b in list {
                    if b >= num_blocks {
                        return Err(Error::Config(format!(
                            "vital block {b} outside the {num_blocks}-block model"
                        )));
                    }
                }
                Ok(list.iter().cloned().collect())
            }
            VitalBlocksSpec::Preset { preset } => {
                let reference: &[usize] = match preset {
                    ModelPreset::Flux => &FLUX_VITAL_BLOCKS,
                    ModelPreset::Sd35 => &SD35_VITAL_BLOCKS,
                };
                // presets target the reference stacks; on a smaller model
                // only the in-range entries apply
                Ok(reference
                    .iter()
                    .cloned()
                    .filter(|b| *b < num_blocks)
                    .collect())
            }
            VitalBlocksSpec::Mode(VitalMode::Auto) => {
                if self.regions.is_empty() {
                    return Ok(BTreeSet::from([0]));
                }
                let (mut profiles, _) = self.profile(DEFAULT_PROFILE_FRAC)?;
                let n = profiles.len();
                let split = 2 * n / 3;
                let early_available = split.saturating_sub(1);
                let late_available = n - split;
                let selection =
                    select_vital_blocks(&profiles, 2.min(early_available), 6.min(late_available))?;
                mark_vital(&mut profiles, &selection);
                self.profiles = Some(profiles);
                Ok(selection.into_iter().collect())
            }
        }
    }

    /// Plain-policy pre-pass over the first `frac` of the schedule with
    /// attention recording, then foreground-response profiling against the
    /// union of the scene's regions.
    pub fn profile(&self, frac: f64) -> Result<(Vec<BlockProfile>, AttentionRecorder)> {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::Range(format!(
                "steps fraction must lie in [0, 1], got {frac}"
            )));
        }
        let mut foreground: BTreeSet<usize> = BTreeSet::new();
        for region in &self.regions {
            foreground.extend(region.indices.iter().cloned());
        }
        if foreground.is_empty() {
            return Err(Error::EmptyForeground);
        }
        let steps = ((frac * self.schedule.total_steps as f64).floor() as usize)
            .clamp(1, self.schedule.total_steps);
        let mut recorder = AttentionRecorder::default();
        let mut latent = self.initial_latent();
        for k in 0..steps {
            recorder.begin_step(k);
            let out = self.model.forward_step(
                &latent,
                &[],
                &[],
                &self.texts,
                self.schedule.t(k),
                &PhasePolicy::Plain {
                    text: MainText::Scene,
                },
                Some(&mut recorder),
                false,
            )?;
            latent = euler_step(
                &latent,
                &out.velocity,
                self.schedule.t(k),
                self.schedule.t(k + 1),
            )?;
        }
        let fg: Vec<usize> = foreground.into_iter().collect();
        let profiles = profile_blocks(&recorder, &fg)?;
        Ok((profiles, recorder))
    }

    fn initial_latent(&self) -> LatentState {
        let spec = &self.model.spec;
        LatentState::noise(spec.grid_height, spec.grid_width, spec.d_model, self.seed)
    }

    pub fn initial_state(&self) -> PipelineState {
        PipelineState {
            step: 0,
            latent: self.initial_latent(),
            branches: Vec::new(),
        }
    }

    /// Runs the full schedule from the seeded noise state.
    pub fn sample(&self, hooks: &mut dyn SampleHooks) -> Result<SampleRun> {
        self.run_from(self.initial_state(), hooks)
    }

    /// Continues a saved state to the end of the schedule.
    pub fn resume(&self, state: PipelineState, hooks: &mut dyn SampleHooks) -> Result<SampleRun> {
        self.run_from(state, hooks)
    }

    fn run_from(&self, mut state: PipelineState, hooks: &mut dyn SampleHooks) -> Result<SampleRun> {
        let schedule = &self.schedule;
        if state.step > schedule.total_steps {
            return Err(Error::Range(format!(
                "state step {} beyond the {}-step schedule",
                state.step, schedule.total_steps
            )));
        }
        let mut trajectory = vec![state.latent.clone()];
        let mut alphas = Vec::new();
        let mut composites = Vec::new();
        let mut stats = ForwardStats::default();

        for k in state.step..schedule.total_steps {
            if k == schedule.spawn_step && !self.regions.is_empty() && state.branches.is_empty() {
                state.branches = construct_branches(
                    &state.latent,
                    &self.regions,
                    self.model.image_phases(),
                    &self.texts.regional,
                )?;
            }
            let policy = match schedule.phase_of(k) {
                Phase::Warmup => PhasePolicy::Plain {
                    text: MainText::Background,
                },
                Phase::InstanceInit => PhasePolicy::InstanceInit { vital: &self.vital },
                Phase::Nursing if self.nursing.enabled && !self.regions.is_empty() => {
                    PhasePolicy::Nursing {
                        beta: self.nursing.beta,
                        regional_prompting_only: self.nursing.regional_prompting_only,
                    }
                }
                Phase::Nursing | Phase::Tail => PhasePolicy::Plain {
                    text: MainText::Scene,
                },
            };
            let out = self.model.forward_step(
                &state.latent,
                &state.branches,
                &self.regions,
                &self.texts,
                schedule.t(k),
                &policy,
                None,
                self.collect_composites,
            )?;
            stats.hard_binding_updates += out.stats.hard_binding_updates;
            stats.reverse_adapt_updates += out.stats.reverse_adapt_updates;
            stats.degenerate_fallbacks += out.stats.degenerate_fallbacks;

            let (t_now, t_next) = (schedule.t(k), schedule.t(k + 1));
            state.latent = euler_step(&state.latent, &out.velocity, t_now, t_next)?;
            if !state.branches.is_empty() {
                if out.branch_velocities.len() != state.branches.len() {
                    return Err(Error::Shape("one velocity per branch expected".into()));
                }
                let dt = t_next - t_now;
                for (branch, velocity) in state.branches.iter_mut().zip(&out.branch_velocities) {
                    if velocity.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("branch velocity".into()));
                    }
                    branch.tokens = &branch.tokens + &(velocity * dt);
                }
            }
            if let Some(c) = out.composite {
                composites.push((k, c));
            }
            state.step = k + 1;
            if state.step == schedule.blend_step && !state.branches.is_empty() {
                let blended = blend_branches(
                    &state.latent,
                    &state.branches,
                    &self.blend_modes,
                    &self.alpha_params,
                )?;
                state.latent = blended.latent;
                alphas = blended.alphas;
                state.branches.clear();
            }
            hooks.after_state(state.step, &mut state)?;
            trajectory.push(state.latent.clone());
        }

        Ok(SampleRun {
            trajectory,
            alphas,
            composites,
            stats,
            final_state: state,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{parse_layout, LayerSpec};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            model: ModelSpec {
                num_blocks: 3,
                d_model: 16,
                heads: 2,
                grid_height: 4,
                grid_width: 4,
                max_text_tokens: 4,
                weight_seed: 5,
            },
            schedule: ScheduleConfig {
                steps: 8,
                max_timestep: 1000.0,
                eta1: 0.3,
                eta2: 0.8,
                spawn_step: 0,
            },
            seed: 17,
            vital_blocks: VitalBlocksSpec::Explicit(vec![0, 2]),
            blend_mode: AlphaMode::Direct,
            ..PipelineConfig::default()
        }
    }

    fn two_layer_scene() -> SceneSpec {
        SceneSpec {
            planning: None,
            rewritten_prompt: "a cat and a ball on a desk".into(),
            background_prompt: "a wooden desk".into(),
            elements: vec![
                LayerSpec {
                    region_prompt: "a cat".into(),
                    layout: [0.0, 0.0, 512.0, 512.0],
                    order: 1,
                },
                LayerSpec {
                    region_prompt: "a ball".into(),
                    layout: [256.0, 256.0, 768.0, 768.0],
                    order: 2,
                },
            ],
        }
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let config = small_config();
        let scene = two_layer_scene();
        let run1 = Pipeline::new(&config, &scene)
            .unwrap()
            .sample(&mut NoHooks)
            .unwrap();
        let run2 = Pipeline::new(&config, &scene)
            .unwrap()
            .sample(&mut NoHooks)
            .unwrap();
        assert_eq!(run1.final_latent().tokens, run2.final_latent().tokens);
        assert_eq!(run1.trajectory.len(), 9);
    }

    #[test]
    fn resume_reproduces_the_tail_for_every_step() {
        let config = small_config();
        let scene = two_layer_scene();
        let pipeline = Pipeline::new(&config, &scene).unwrap();
        let full = pipeline.sample(&mut NoHooks).unwrap();
        for k in 1..=7 {
            let mut hook = SnapshotHook::at(k);
            pipeline.sample(&mut hook).unwrap();
            let resumed = pipeline
                .resume(hook.snapshot.unwrap(), &mut NoHooks)
                .unwrap();
            assert_eq!(
                resumed.final_latent().tokens,
                full.final_latent().tokens,
                "resume from step {k}"
            );
            // the resumed trajectory is the tail of the full one
            for (i, latent) in resumed.trajectory.iter().enumerate() {
                assert_eq!(latent.tokens, full.trajectory[k + i].tokens);
            }
        }
    }

    #[test]
    fn rearranged_continuation_equals_resume_of_rearranged_state() {
        let config = small_config();
        let scene = two_layer_scene();
        let pipeline = Pipeline::new(&config, &scene).unwrap();
        let blend = pipeline.schedule.blend_step;

        let swap_blocks = |state: &mut PipelineState| {
            // swap two disjoint token blocks
            for offset in 0..2 {
                let (a, b) = (offset, 8 + offset);
                let row_a = state.latent.tokens.row(a).to_owned();
                let row_b = state.latent.tokens.row(b).to_owned();
                state.latent.tokens.row_mut(a).assign(&row_b);
                state.latent.tokens.row_mut(b).assign(&row_a);
            }
        };

        // run with an in-flight rearrangement at the blend step
        let mut mutate = FnHook(|step: usize, state: &mut PipelineState| {
            if step == blend {
                swap_blocks(state);
            }
            Ok(())
        });
        let mutated_run = pipeline.sample(&mut mutate).unwrap();

        // snapshot at the blend step, rearrange, resume
        let mut hook = SnapshotHook::at(blend);
        pipeline.sample(&mut hook).unwrap();
        let mut snapshot = hook.snapshot.unwrap();
        swap_blocks(&mut snapshot);
        let resumed = pipeline.resume(snapshot, &mut NoHooks).unwrap();

        assert_eq!(
            mutated_run.final_latent().tokens,
            resumed.final_latent().tokens
        );
    }

    #[test]
    fn blend_drops_branches_and_nursing_follows() {
        let config = small_config();
        let scene = two_layer_scene();
        let pipeline = Pipeline::new(&config, &scene).unwrap();
        let mut seen_branches = Vec::new();
        let mut watch = FnHook(|step: usize, state: &mut PipelineState| {
            seen_branches.push((step, state.branches.len()));
            Ok(())
        });
        let run = pipeline.sample(&mut watch).unwrap();
        // blend_step = floor(0.3 * 8) = 2
        assert_eq!(pipeline.schedule.blend_step, 2);
        for (step, n) in seen_branches {
            if step < 2 {
                assert_eq!(n, 2, "branches alive before the blend");
            } else {
                assert_eq!(n, 0, "branches gone after the blend");
            }
        }
        assert!(run.stats.hard_binding_updates > 0);
        assert!(run.stats.reverse_adapt_updates > 0);
    }

    #[test]
    fn empty_vital_set_never_runs_hard_paths() {
        let mut config = small_config();
        config.vital_blocks = VitalBlocksSpec::Explicit(vec![]);
        let scene = two_layer_scene();
        let run = Pipeline::new(&config, &scene)
            .unwrap()
            .sample(&mut NoHooks)
            .unwrap();
        assert_eq!(run.stats.hard_binding_updates, 0);
        assert_eq!(run.stats.reverse_adapt_updates, 0);
    }

    #[test]
    fn auto_vital_selection_is_deterministic_and_contains_zero() {
        let mut config = small_config();
        config.vital_blocks = VitalBlocksSpec::Mode(VitalMode::Auto);
        let scene = two_layer_scene();
        let p1 = Pipeline::new(&config, &scene).unwrap();
        let p2 = Pipeline::new(&config, &scene).unwrap();
        assert_eq!(p1.vital, p2.vital);
        assert!(p1.vital.contains(&0));
        assert!(p1.profiles.is_some());
    }

    #[test]
    fn preset_filters_to_model_range() {
        let mut config = small_config();
        config.vital_blocks = VitalBlocksSpec::Preset {
            preset: ModelPreset::Flux,
        };
        let pipeline = Pipeline::new(&config, &two_layer_scene()).unwrap();
        // only block 0 of the FLUX list fits a 3-block model
        assert_eq!(pipeline.vital.iter().cloned().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn explicit_out_of_range_vital_is_a_config_error() {
        let mut config = small_config();
        config.vital_blocks = VitalBlocksSpec::Explicit(vec![0, 99]);
        let err = Pipeline::new(&config, &two_layer_scene()).unwrap_err();
        assert_eq!(err.code(), "ConfigError");
    }

    #[test]
    fn vital_blocks_spec_json_forms() {
        let auto: VitalBlocksSpec = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(auto, VitalBlocksSpec::Mode(VitalMode::Auto));
        let preset: VitalBlocksSpec = serde_json::from_str(r#"{"preset":"flux"}"#).unwrap();
        assert_eq!(
            preset,
            VitalBlocksSpec::Preset {
                preset: ModelPreset::Flux
            }
        );
        let explicit: VitalBlocksSpec = serde_json::from_str("[0,3,7]").unwrap();
        assert_eq!(explicit, VitalBlocksSpec::Explicit(vec![0, 3, 7]));
    }

    #[test]
    fn manifest_roundtrips_and_detects() {
        let config = small_config();
        let manifest = Manifest {
            config: config.clone(),
            scene: two_layer_scene(),
            resolved_vital_blocks: vec![0, 2],
        };
        let text = serde_json::to_string_pretty(&manifest).unwrap();
        match parse_run_input(&text).unwrap() {
            RunInput::Manifest(m) => assert_eq!(m, manifest),
            RunInput::Config(_) => panic!("manifest detected as config"),
        }
        let bare = serde_json::to_string(&config).unwrap();
        match parse_run_input(&bare).unwrap() {
            RunInput::Config(c) => assert_eq!(c, config),
            RunInput::Manifest(_) => panic!("config detected as manifest"),
        }
    }

    #[test]
    fn layout_document_to_pipeline() {
        let doc = r#"{
            "rewritten_prompt": "scene",
            "background_prompt": "bg",
            "elements": [
                {"region_prompt": "thing", "layout": [0, 0, 512, 512], "order": 1}
            ]
        }"#;
        let scene = parse_layout(doc).unwrap();
        let pipeline = Pipeline::new(&small_config(), &scene).unwrap();
        assert_eq!(pipeline.regions.len(), 1);
        assert_eq!(pipeline.regions[0].len(), 4);
    }

    #[test]
    fn late_spawn_defers_branch_construction() {
        let mut config = small_config();
        config.schedule.spawn_step = 1;
        let pipeline = Pipeline::new(&config, &two_layer_scene()).unwrap();
        let mut counts = Vec::new();
        let mut watch = FnHook(|step: usize, state: &mut PipelineState| {
            counts.push((step, state.branches.len()));
            Ok(())
        });
        pipeline.sample(&mut watch).unwrap();
        // step 1's state predates construction; branches appear once the
        // spawn-step iteration has run, and vanish at the blend
        assert_eq!(counts[0], (1, 0));
        assert_eq!(counts[1], (2, 2));
        assert_eq!(pipeline.schedule.blend_step, 2);
        assert!(counts[2..].iter().all(|(_, n)| *n == 0));
    }

    #[test]
    fn regional_prompting_ablation_matches_full_opacity_on_disjoint_layers() {
        // disjoint quadrant regions: writing the locals directly equals
        // compositing them at beta = 1
        let scene = SceneSpec {
            planning: None,
            rewritten_prompt: "two things apart".into(),
            background_prompt: "bg".into(),
            elements: vec![
                LayerSpec {
                    region_prompt: "left".into(),
                    layout: [0.0, 0.0, 512.0, 512.0],
                    order: 1,
                },
                LayerSpec {
                    region_prompt: "right".into(),
                    layout: [512.0, 512.0, 1024.0, 1024.0],
                    order: 2,
                },
            ],
        };
        let mut ablation = small_config();
        ablation.nursing =
            NursingConfig { enabled: true, beta: 1.0, regional_prompting_only: true };
        let mut full = small_config();
        full.nursing = NursingConfig { enabled: true, beta: 1.0, regional_prompting_only: false };
        let run_a = Pipeline::new(&ablation, &scene).unwrap().sample(&mut NoHooks).unwrap();
        let run_b = Pipeline::new(&full, &scene).unwrap().sample(&mut NoHooks).unwrap();
        assert_eq!(run_a.final_latent().tokens, run_b.final_latent().tokens);
    }

    #[test]
    fn all_vital_and_no_vital_diverge_during_initialization() {
        let mut all = small_config();
        all.vital_blocks = VitalBlocksSpec::Explicit(vec![0, 1, 2]);
        let mut none = small_config();
        none.vital_blocks = VitalBlocksSpec::Explicit(vec![]);
        let scene = two_layer_scene();
        let grab = |config: &PipelineConfig| {
            let pipeline = Pipeline::new(config, &scene).unwrap();
            let mut hook = SnapshotHook::at(1);
            pipeline.sample(&mut hook).unwrap();
            hook.snapshot.unwrap()
        };
        let a = grab(&all);
        let b = grab(&none);
        assert_ne!(a.latent.tokens, b.latent.tokens, "reverse adaptation must engage");
        assert_ne!(
            a.branches[0].tokens, b.branches[0].tokens,
            "hard binding must change the branch path"
        );
    }
}
