//! Seeded toy multimodal DiT substrate.
//!
//! The model is a stack of joint-attention blocks over text and image
//! token streams. Each block, per stream:
//!
//! ```text
//! h  = rmsnorm(x) * (1 + scale_a(t)) + shift_a(t)
//! x += Wo * attention(Wq h, Wk h, Wv h)          // per phase policy
//! h  = rmsnorm(x) * (1 + scale_m(t)) + shift_m(t)
//! x += W2 * gelu(W1 h)
//! ```
//!
//! Text and image carry separate weights; every image-derived stream
//! (global latent, branches, region views) routes through the image
//! weights, every text stream through the text weights. All parameters
//! are drawn from named ChaCha streams keyed by `(weight_seed, name)`, so
//! a seed pins the model bitwise. The text encoder is a seeded embedding
//! lookup over whitespace-split words — no pretrained weights anywhere.
//!
//! Velocity comes from a final projection of the normalized image stream;
//! during instance initialization each branch gets its own velocity from
//! the same head.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{joint_attention, joint_attention_recorded, Projection, StreamTag};
use crate::error::{Error, Result};
use crate::flow::LatentState;
use crate::init::{branch_update, regional_text_update, reverse_adapt_background, InstanceBranch};
use crate::layout::RegionIndexSet;
use crate::nursing::{composite_layers, nurse_local, nurse_text};
use crate::rope::RotaryPhases;

/// Vital-block preset measured on the FLUX-profile reference stack.
pub const FLUX_VITAL_BLOCKS: [usize; 9] = [0, 15, 18, 42, 45, 48, 50, 53, 54];
/// Vital-block preset measured on the SD3.5-profile reference stack.
pub const SD35_VITAL_BLOCKS: [usize; 9] = [0, 11, 14, 19, 21, 24, 29, 32, 34];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub num_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub max_text_tokens: usize,
    pub weight_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            num_blocks: 12,
            d_model: 64,
            heads: 4,
            grid_height: 16,
            grid_width: 16,
            max_text_tokens: 16,
            weight_seed: 7077,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Spec("num_blocks must be positive".into()));
        }
        if self.heads == 0 {
            return Err(Error::Spec("heads must be positive".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(2 * self.heads) {
            return Err(Error::Spec(format!(
                "d_model ({}) must be a positive multiple of 2*heads ({})",
                self.d_model,
                2 * self.heads
            )));
        }
        if self.grid_height == 0 || self.grid_width == 0 {
            return Err(Error::Spec("grid dimensions must be positive".into()));
        }
        if self.max_text_tokens == 0 {
            return Err(Error::Spec("max_text_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn image_tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for the parameter stream named `name` under `seed`.
fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a64(name.as_bytes())))
}

#[derive(Debug, Clone)]
struct Linear {
    /// `d_in x d_out`; applied as `x · weight + bias` on row-major tokens.
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Linear {
    fn seeded(seed: u64, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut rng = named_rng(seed, name);
        let std = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_fn((d_in, d_out), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        });
        Linear {
            weight,
            bias: Array1::zeros(d_out),
        }
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    fn apply_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn hash_into(&self, acc: &mut u64) {
        for v in self.weight.iter().chain(self.bias.iter()) {
            *acc = splitmix64(*acc ^ v.to_bits());
        }
    }

    fn is_finite(&self) -> bool {
        self.weight
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }
}

fn rmsnorm(x: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.mapv_inplace(|v| v * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}

fn row_affine(x: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = *v * (1.0 + scale[j]) + shift[j];
        }
    }
    out
}

/// Sinusoidal embedding of the timestep, half sines half cosines.
pub fn timestep_embedding(t: f64, d: usize) -> Array1<f64> {
    let half = d / 2;
    Array1::from_shape_fn(d, |i| {
        let j = i % half;
        let freq = 10000f64.powf(-(j as f64) / half as f64);
        if i < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

/// Per-modality weights of one block.
#[derive(Debug, Clone)]
struct StreamWeights {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
    mod_attn: Linear,
    mod_mlp: Linear,
}

/// Timestep-derived scale/shift pairs for one block and modality.
struct StreamMods {
    attn_scale: Array1<f64>,
    attn_shift: Array1<f64>,
    mlp_scale: Array1<f64>,
    mlp_shift: Array1<f64>,
}

impl StreamWeights {
    fn seeded(seed: u64, prefix: &str, d: usize) -> Self {
        let hidden = 2 * d;
        StreamWeights {
            wq: Linear::seeded(seed, &format!("{prefix}.wq"), d, d),
            wk: Linear::seeded(seed, &format!("{prefix}.wk"), d, d),
            wv: Linear::seeded(seed, &format!("{prefix}.wv"), d, d),
            wo: Linear::seeded(seed, &format!("{prefix}.wo"), d, d),
            mlp_in: Linear::seeded(seed, &format!("{prefix}.mlp_in"), d, hidden),
            mlp_out: Linear::seeded(seed, &format!("{prefix}.mlp_out"), hidden, d),
            mod_attn: Linear::seeded(seed, &format!("{prefix}.mod_attn"), d, 2 * d),
            mod_mlp: Linear::seeded(seed, &format!("{prefix}.mod_mlp"), d, 2 * d),
        }
    }

    fn mods(&self, te: &Array1<f64>) -> StreamMods {
        let d = te.len();
        let attn = self.mod_attn.apply_vec(te);
        let mlp = self.mod_mlp.apply_vec(te);
        StreamMods {
            attn_scale: attn.slice(ndarray::s![..d]).to_owned(),
            attn_shift: attn.slice(ndarray::s![d..]).to_owned(),
            mlp_scale: mlp.slice(ndarray::s![..d]).to_owned(),
            mlp_shift: mlp.slice(ndarray::s![d..]).to_owned(),
        }
    }

    fn project(
        &self,
        x: &Array2<f64>,
        mods: &StreamMods,
        tag: StreamTag,
        phases: Option<&RotaryPhases>,
    ) -> Result<Projection> {
        let h = row_affine(&rmsnorm(x), &mods.attn_scale, &mods.attn_shift);
        let q = self.wq.apply(&h);
        let k = self.wk.apply(&h);
        let v = self.wv.apply(&h);
        match phases {
            Some(ph) => Projection::image(tag, q, k, v, ph.clone()),
            None => Projection::text(tag, q, k, v),
        }
    }

    /// Residual add of the attention output, then the MLP sub-layer.
    fn finish(&self, x: &Array2<f64>, attn_out: &Array2<f64>, mods: &StreamMods) -> Array2<f64> {
        let x = x + &self.wo.apply(attn_out);
        let h = row_affine(&rmsnorm(&x), &mods.mlp_scale, &mods.mlp_shift);
        let mlp = self.mlp_out.apply(&self.mlp_in.apply(&h).mapv(gelu));
        x + mlp
    }

    fn hash_into(&self, acc: &mut u64) {
        for lin in self.linears() {
            lin.hash_into(acc);
        }
    }

    fn linears(&self) -> [&Linear; 8] {
        [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_in,
            &self.mlp_out,
            &self.mod_attn,
            &self.mod_mlp,
        ]
    }
}

#[derive(Debug, Clone)]
struct BlockWeights {
    image: StreamWeights,
    text: StreamWeights,
}

/// Text prompt for the plain phases and which stream it comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainText {
    Background,
    Scene,
}

/// Encoded prompts a forward pass may need.
#[derive(Debug, Clone)]
pub struct TextStreams {
    pub background: Array2<f64>,
    pub scene: Array2<f64>,
    /// Encoded regional prompts in ascending layer order (nursing reads
    /// these; during initialization the branches carry their own copies).
    pub regional: Vec<Array2<f64>>,
}

/// Selects the per-block attention behavior of one step.
#[derive(Debug, Clone)]
pub enum PhasePolicy<'a> {
    /// Vanilla joint attention between the chosen text stream and the
    /// image.
    Plain { text: MainText },
    /// Instance-initialization updates; `vital` holds the hard-binding
    /// block indices.
    InstanceInit { vital: &'a BTreeSet<usize> },
    /// Layered local enhancement with transparency compositing.
    Nursing {
        beta: f64,
        regional_prompting_only: bool,
    },
}

/// Counters recording which update paths actually ran.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardStats {
    /// Hard-binding branch updates taken because the block is vital.
    pub hard_binding_updates: usize,
    /// Reverse-adaptation background updates (vital blocks only).
    pub reverse_adapt_updates: usize,
    /// Grounded updates that fell back to the hard path for lack of any
    /// background tokens (full-image regions).
    pub degenerate_fallbacks: usize,
}

/// Output of one velocity evaluation.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub velocity: Array2<f64>,
    /// One velocity per branch, aligned with the input order (instance
    /// initialization only).
    pub branch_velocities: Vec<Array2<f64>>,
    pub stats: ForwardStats,
    /// Final block's composited image attention output, when requested
    /// under the nursing policy.
    pub composite: Option<Array2<f64>>,
}

/// Head-averaged joint-attention maps recorded under the plain policy.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecorder {
    pub n_text: usize,
    pub n_image: usize,
    pub steps: Vec<StepMaps>,
}

#[derive(Debug, Clone)]
pub struct StepMaps {
    pub step: usize,
    /// One `(n_text + n_image)^2` map per block.
    pub blocks: Vec<Array2<f64>>,
}

impl AttentionRecorder {
    pub fn begin_step(&mut self, step: usize) {
        self.steps.push(StepMaps {
            step,
            blocks: Vec::new(),
        });
    }
}

#[derive(Debug)]
pub struct ToyMmdit {
    pub spec: ModelSpec,
    input_proj: Linear,
    output_proj: Linear,
    blocks: Vec<BlockWeights>,
    image_phases: RotaryPhases,
}

/// Builds the model with all parameters drawn from the weight seed.
pub fn init_model(spec: ModelSpec) -> Result<ToyMmdit> {
    ToyMmdit::new(spec)
}

impl ToyMmdit {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_model;
        let seed = spec.weight_seed;
        let blocks = (0..spec.num_blocks)
            .map(|b| BlockWeights {
                image: StreamWeights::seeded(seed, &format!("block{b}.image"), d),
                text: StreamWeights::seeded(seed, &format!("block{b}.text"), d),
            })
            .collect();
        let model = ToyMmdit {
            input_proj: Linear::seeded(seed, "input_proj", d, d),
            output_proj: Linear::seeded(seed, "output_proj", d, d),
            blocks,
            image_phases: RotaryPhases::for_grid(
                spec.grid_height,
                spec.grid_width,
                spec.head_dim(),
            ),
            spec,
        };
        let finite = model.input_proj.is_finite()
            && model.output_proj.is_finite()
            && model.blocks.iter().all(|b| {
                b.image.linears().iter().all(|l| l.is_finite())
                    && b.text.linears().iter().all(|l| l.is_finite())
            });
        if !finite {
            return Err(Error::Spec(
                "initialized weights contain non-finite values".into(),
            ));
        }
        Ok(model)
    }

    pub fn image_phases(&self) -> &RotaryPhases {
        &self.image_phases
    }

    /// Order-stable hash of every parameter's bit pattern.
    pub fn param_checksum(&self) -> u64 {
        let mut acc = 0x6c61_7965_7262_6e64u64;
        self.input_proj.hash_into(&mut acc);
        self.output_proj.hash_into(&mut acc);
        for block in &self.blocks {
            block.image.hash_into(&mut acc);
            block.text.hash_into(&mut acc);
        }
        acc
    }

    /// Seeded embedding lookup over whitespace-split words, truncated to
    /// `max_text_tokens`. An empty prompt still yields one token.
    pub fn encode_prompt(&self, prompt: &str) -> Array2<f64> {
        let words: Vec<&str> = prompt
            .split_whitespace()
            .take(self.spec.max_text_tokens)
            .collect();
        let d = self.spec.d_model;
        let n = words.len().max(1);
        let mut out = Array2::zeros((n, d));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let word = words.get(i).copied().unwrap_or("");
            let mut rng = named_rng(self.spec.weight_seed, &format!("word:{word}"));
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        out
    }

    /// One velocity evaluation at timestep `t` under the given policy.
    ///
    /// Within the step, stream embeddings flow block to block; text
    /// streams are the caller-supplied encoder outputs, i.e. they reset at
    /// every step start. Recording only happens under the plain policy.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_step(
        &self,
        latent: &LatentState,
        branches: &[InstanceBranch],
        regions: &[RegionIndexSet],
        texts: &TextStreams,
        t: f64,
        policy: &PhasePolicy,
        mut recorder: Option<&mut AttentionRecorder>,
        want_composite: bool,
    ) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let d = spec.d_model;
        let heads = spec.heads;
        if latent.channels != d {
            return Err(Error::Shape(format!(
                "latent channels {} != d_model {d}",
                latent.channels
            )));
        }
        if latent.token_count() != spec.image_tokens() {
            return Err(Error::Shape(format!(
                "latent has {} tokens, model expects {}",
                latent.token_count(),
                spec.image_tokens()
            )));
        }
        let te = timestep_embedding(t, d);
        let mut stats = ForwardStats::default();
        let mut composite = None;

        let mut e_img = self.input_proj.apply(&latent.tokens);
        let mut e_main = match policy {
            PhasePolicy::Plain {
                text: MainText::Background,
            } => texts.background.clone(),
            PhasePolicy::Plain {
                text: MainText::Scene,
            } => texts.scene.clone(),
            PhasePolicy::InstanceInit { .. } => texts.background.clone(),
            PhasePolicy::Nursing { .. } => texts.scene.clone(),
        };
        let main_tag = match policy {
            PhasePolicy::Plain {
                text: MainText::Scene,
            }
            | PhasePolicy::Nursing { .. } => StreamTag::TextScene,
            _ => StreamTag::TextBackground,
        };
        if e_main.ncols() != d {
            return Err(Error::Shape("text stream width != d_model".into()));
        }

        let init_phase = matches!(policy, PhasePolicy::InstanceInit { .. });
        let mut e_branches: Vec<Array2<f64>> = if init_phase {
            branches
                .iter()
                .map(|b| self.input_proj.apply(&b.tokens))
                .collect()
        } else {
            Vec::new()
        };
        let mut e_tregs: Vec<Array2<f64>> = match policy {
            PhasePolicy::InstanceInit { .. } => {
                branches.iter().map(|b| b.regional_text.clone()).collect()
            }
            PhasePolicy::Nursing { .. } => texts.regional.clone(),
            PhasePolicy::Plain { .. } => Vec::new(),
        };

        for (bi, block) in self.blocks.iter().enumerate() {
            let img_mods = block.image.mods(&te);
            let txt_mods = block.text.mods(&te);
            let pi = block.image.project(
                &e_img,
                &img_mods,
                StreamTag::ImageGlobal,
                Some(&self.image_phases),
            )?;
            let pt = block.text.project(&e_main, &txt_mods, main_tag, None)?;

            match policy {
                PhasePolicy::Plain { .. } => {
                    let (t_attn, i_attn) = if recorder.is_some() {
                        let ((t_attn, i_attn), map) = joint_attention_recorded(&pt, &pi, heads)?;
                        if let Some(rec) = recorder.as_deref_mut() {
                            rec.n_text = pt.tokens();
                            rec.n_image = pi.tokens();
                            rec.steps
                                .last_mut()
                                .ok_or_else(|| Error::Spec("recorder has no open step".into()))?
                                .blocks
                                .push(map);
                        }
                        (t_attn, i_attn)
                    } else {
                        joint_attention(&pt, &pi, heads)?
                    };
                    e_main = block.text.finish(&e_main, &t_attn, &txt_mods);
                    e_img = block.image.finish(&e_img, &i_attn, &img_mods);
                }
                PhasePolicy::InstanceInit { vital } => {
                    let is_vital = vital.contains(&bi);
                    let branch_projs: Vec<Projection> = branches
                        .iter()
                        .enumerate()
                        .map(|(i, b)| {
                            block.image.project(
                                &e_branches[i],
                                &img_mods,
                                StreamTag::ImageBranch(i),
                                Some(&b.phases),
                            )
                        })
                        .collect::<Result<_>>()?;
                    let treg_projs: Vec<Projection> = e_tregs
                        .iter()
                        .enumerate()
                        .map(|(i, e)| {
                            block
                                .text
                                .project(e, &txt_mods, StreamTag::TextRegional(i), None)
                        })
                        .collect::<Result<_>>()?;
                    let complements: Vec<Vec<usize>> =
                        branches.iter().map(|b| b.region.complement()).collect();
                    let bg_projs: Vec<Projection> = complements
                        .iter()
                        .map(|comp| pi.select(comp, StreamTag::ImageGlobal))
                        .collect::<Result<_>>()?;

                    // global pair: standard joint attention
                    let (mut t_attn, mut i_attn) = joint_attention(&pt, &pi, heads)?;
                    if is_vital && !branches.is_empty() {
                        // background text mirrors the structured update: it
                        // reads itself plus the image outside every region
                        let outside: Vec<usize> = (0..latent.token_count())
                            .filter(|tok| branches.iter().all(|b| !b.region.contains(*tok)))
                            .collect();
                        if !outside.is_empty() {
                            let ctx = pi.select(&outside, StreamTag::ImageGlobal)?;
                            let policy = crate::attention::AttentionPolicy::new(
                                main_tag,
                                vec![StreamTag::ImageGlobal],
                                true,
                            )?;
                            t_attn = crate::attention::contextual_attention(
                                &pt,
                                &[&ctx],
                                &policy,
                                heads,
                            )?;
                        }
                        // reverse adaptation per branch, ascending order;
                        // overlapping background rows take the highest layer
                        for (i, _) in branches.iter().enumerate() {
                            if complements[i].is_empty() {
                                continue;
                            }
                            if let Some(updated) = reverse_adapt_background(
                                &bg_projs[i],
                                &pt,
                                &branch_projs[i],
                                true,
                                heads,
                            )? {
                                stats.reverse_adapt_updates += 1;
                                for (row, &tok) in complements[i].iter().enumerate() {
                                    i_attn.row_mut(tok).assign(&updated.row(row));
                                }
                            }
                        }
                    }

                    let mut branch_attns = Vec::with_capacity(branches.len());
                    let mut treg_attns = Vec::with_capacity(branches.len());
                    for i in 0..branches.len() {
                        let (out, hard) = branch_update(
                            &branch_projs[i],
                            &treg_projs[i],
                            &bg_projs[i],
                            is_vital,
                            heads,
                        )?;
                        if hard && is_vital {
                            stats.hard_binding_updates += 1;
                        } else if hard {
                            stats.degenerate_fallbacks += 1;
                        }
                        branch_attns.push(out);
                        treg_attns.push(regional_text_update(
                            &treg_projs[i],
                            &branch_projs[i],
                            &bg_projs[i],
                            heads,
                        )?);
                    }

                    e_main = block.text.finish(&e_main, &t_attn, &txt_mods);
                    e_img = block.image.finish(&e_img, &i_attn, &img_mods);
                    for i in 0..branches.len() {
                        e_branches[i] =
                            block
                                .image
                                .finish(&e_branches[i], &branch_attns[i], &img_mods);
                        e_tregs[i] = block.text.finish(&e_tregs[i], &treg_attns[i], &txt_mods);
                    }
                }
                PhasePolicy::Nursing {
                    beta,
                    regional_prompting_only,
                } => {
                    if e_tregs.len() != regions.len() {
                        return Err(Error::Shape(format!(
                            "{} regional prompts for {} regions",
                            e_tregs.len(),
                            regions.len()
                        )));
                    }
                    let (t_attn, i_global) = joint_attention(&pt, &pi, heads)?;
                    let treg_projs: Vec<Projection> = e_tregs
                        .iter()
                        .enumerate()
                        .map(|(i, e)| {
                            block
                                .text
                                .project(e, &txt_mods, StreamTag::TextRegional(i), None)
                        })
                        .collect::<Result<_>>()?;
                    let mut locals = Vec::with_capacity(regions.len());
                    let mut treg_attns = Vec::with_capacity(regions.len());
                    for (i, region) in regions.iter().enumerate() {
                        let reg_proj = pi.select(&region.indices, StreamTag::ImageRegion(i))?;
                        let rest_proj = pi.select(&region.complement(), StreamTag::ImageGlobal)?;
                        locals.push(nurse_local(
                            &reg_proj,
                            &treg_projs[i],
                            &rest_proj,
                            region,
                            heads,
                        )?);
                        treg_attns.push(nurse_text(&treg_projs[i], &reg_proj, &pt, heads)?);
                    }
                    let i_out = if regions.is_empty() {
                        i_global
                    } else if *regional_prompting_only {
                        let mut out = i_global;
                        for (i, region) in regions.iter().enumerate() {
                            for &tok in &region.indices {
                                out.row_mut(tok).assign(&locals[i].row(tok));
                            }
                        }
                        out
                    } else {
                        let masks: Vec<Array1<f64>> =
                            regions.iter().map(|r| r.mask_flat()).collect();
                        let orders: Vec<i64> = regions.iter().map(|r| r.order).collect();
                        composite_layers(&i_global, &locals, &masks, &orders, *beta)?
                    };
                    if want_composite {
                        composite = Some(i_out.clone());
                    }
                    e_main = block.text.finish(&e_main, &t_attn, &txt_mods);
                    e_img = block.image.finish(&e_img, &i_out, &img_mods);
                    for i in 0..regions.len() {
                        e_tregs[i] = block.text.finish(&e_tregs[i], &treg_attns[i], &txt_mods);
                    }
                }
            }
        }

        let velocity = self.output_proj.apply(&rmsnorm(&e_img));
        let branch_velocities = e_branches
            .iter()
            .map(|e| self.output_proj.apply(&rmsnorm(e)))
            .collect();
        Ok(ForwardOutput {
            velocity,
            branch_velocities,
            stats,
            composite,
        })
    }
}

/// Per-block response masses of foreground queries, a probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockProfile {
    pub block_index: usize,
    pub response_self: f64,
    pub response_background: f64,
    pub response_text: f64,
    pub vital: bool,
}

/// Averages foreground-query attention mass per block over the recorded
/// steps: mass on foreground image keys (self), other image keys
/// (background), and text keys. Masses are normalized per block.
pub fn profile_blocks(
    recorder: &AttentionRecorder,
    foreground: &[usize],
) -> Result<Vec<BlockProfile>> {
    if foreground.is_empty() {
        return Err(Error::EmptyForeground);
    }
    if recorder.steps.is_empty() || recorder.steps[0].blocks.is_empty() {
        return Err(Error::Spec("no attention maps recorded".into()));
    }
    let n_text = recorder.n_text;
    let n_image = recorder.n_image;
    let mut fg_flags = vec![false; n_image];
    for &i in foreground {
        if i >= n_image {
            return Err(Error::Range(format!(
                "foreground index {i} outside {n_image} tokens"
            )));
        }
        fg_flags[i] = true;
    }
    let num_blocks = recorder.steps[0].blocks.len();
    let mut profiles = Vec::with_capacity(num_blocks);
    for block in 0..num_blocks {
        let mut mass = [0.0f64; 3]; // self, background, text
        for step in &recorder.steps {
            let map = &step.blocks[block];
            if map.dim() != (n_text + n_image, n_text + n_image) {
                return Err(Error::Shape("recorded map has the wrong shape".into()));
            }
            for &fg in foreground {
                let row = map.row(n_text + fg);
                for (j, w) in row.iter().enumerate() {
                    if j < n_text {
                        mass[2] += w;
                    } else if fg_flags[j - n_text] {
                        mass[0] += w;
                    } else {
                        mass[1] += w;
                    }
                }
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(Error::Spec(format!(
                "block {block} recorded zero attention mass"
            )));
        }
        profiles.push(BlockProfile {
            block_index: block,
            response_self: mass[0] / total,
            response_background: mass[1] / total,
            response_text: mass[2] / total,
            vital: false,
        });
    }
    Ok(profiles)
}

/// Picks the hard-binding blocks: block 0 always, plus the most
/// text-responsive blocks of the early-mid stage (`[1, 2n/3)`) and of the
/// late stage (`[2n/3, n)`). Ties break toward the lower block index.
pub fn select_vital_blocks(
    profiles: &[BlockProfile],
    early_mid_count: usize,
    late_count: usize,
) -> Result<Vec<usize>> {
    let n = profiles.len();
    for (i, p) in profiles.iter().enumerate() {
        if p.block_index != i {
            return Err(Error::Spec(
                "profiles must cover blocks 0..n in order".into(),
            ));
        }
    }
    if n == 0 {
        return Err(Error::Spec("no profiles".into()));
    }
    let split = 2 * n / 3;
    let early_mid: Vec<&BlockProfile> = profiles[1..split.max(1)].iter().collect();
    let late: Vec<&BlockProfile> = profiles[split.max(1)..].iter().collect();
    if early_mid_count > early_mid.len() {
        return Err(Error::Count(format!(
            "requested {early_mid_count} early-mid blocks, only {} available",
            early_mid.len()
        )));
    }
    if late_count > late.len() {
        return Err(Error::Count(format!(
            "requested {late_count} late blocks, only {} available",
            late.len()
        )));
    }
    let top = |pool: &[&BlockProfile], count: usize| -> Vec<usize> {
        let mut sorted: Vec<&&BlockProfile> = pool.iter().collect();
        sorted.sort_by(|a, b| {
            b.response_text
                .partial_cmp(&a.response_text)
                .unwrap()
                .then(a.block_index.cmp(&b.block_index))
        });
        sorted.iter().take(count).map(|p| p.block_index).collect()
    };
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    selected.insert(0);
    selected.extend(top(&early_mid, early_mid_count));
    selected.extend(top(&late, late_count));
    Ok(selected.into_iter().collect())
}

/// Applies a selection back onto the profiles.
pub fn mark_vital(profiles: &mut [BlockProfile], selection: &[usize]) {
    for p in profiles.iter_mut() {
        p.vital = selection.contains(&p.block_index);
    }
}
