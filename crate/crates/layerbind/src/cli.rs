//! Operator surface behind the `layerbind` binary.
//!
//! ```bash
//! layerbind run --config run.json --layout scene.json [--strict] [--dump-every 5]
//! layerbind validate-layout scene.json [--strict]
//! layerbind profile-blocks --layout scene.json [--config run.json] [--steps-frac 0.2] [--dump-maps]
//! layerbind bench [--regions 1..6] [--repeats 3]
//! layerbind dump-read out/final_latent.lbnd
//! ```
//!
//! Config files are JSON in the [`PipelineConfig`] shape; a run writes a
//! `manifest.json` in the same shape with the scene embedded, and feeding
//! that manifest back to `run --config` reproduces the run bit for bit.
//! `LAYERBIND_SEED` overrides the config seed.
//!
//! Every error exits with a distinct code (see `Error::exit_code`; 2 is
//! reserved for argument parsing) after printing a single parseable line:
//! `error code=<name> exit=<code> detail="..."`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{
    attention_pair_count, default_bench_config, fit_affine, run_bench, BenchRow, CostModel,
    REFERENCE_OVERHEAD_FLUX,
};
use crate::dump::{latent_to_dump, matrix_to_dump, read_tensor, write_tensor};
use crate::error::{Error, Result};
use crate::layout::{parse_layout, validate, SceneSpec, ValidationReport};
use crate::model::BlockProfile;
use crate::pipeline::{
    parse_run_input, FnHook, Manifest, Pipeline, PipelineConfig, RunInput, SampleRun,
};

#[derive(Parser, Debug)]
#[command(
    name = "layerbind",
    version,
    about = "Regional and occlusion control on a toy diffusion transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the full pipeline and write dumps plus a rerunnable manifest.
    Run {
        /// Config or manifest JSON.
        #[arg(long)]
        config: PathBuf,
        /// Layout JSON (optional when the config is a manifest).
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Fail on fully-occluded layers instead of warning.
        #[arg(long)]
        strict: bool,
        /// Dump the latent every N steps (overrides the config).
        #[arg(long, value_name = "N")]
        dump_every: Option<usize>,
        /// Output directory (overrides the config).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Parse and validate a layout document.
    ValidateLayout {
        layout: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Record early-step attention, print per-block response profiles and
    /// the selected vital blocks.
    ProfileBlocks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        layout: PathBuf,
        /// Fraction of the schedule to record.
        #[arg(long, default_value_t = 0.2)]
        steps_frac: f64,
        /// Dump step-averaged per-block attention maps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Scaling table: analytic attention pairs and wall time per region
    /// count.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Region counts, e.g. `1..6` or `4`.
        #[arg(long, default_value = "1..6")]
        regions: String,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Print the header and summary statistics of a tensor dump.
    DumpRead { file: PathBuf },
}

/// Dispatches a parsed command line, mapping errors to exit codes.
pub fn run_cli(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run {
            config,
            layout,
            strict,
            dump_every,
            output,
        } => cmd_run(&config, layout.as_deref(), strict, dump_every, output).map(|artifacts| {
            println!("run complete: {}", artifacts.output_dir.display());
            println!("final latent: {}", artifacts.final_latent.display());
            println!("manifest:     {}", artifacts.manifest.display());
        }),
        Command::ValidateLayout { layout, strict } => {
            cmd_validate_layout(&layout, strict).map(|report| {
                for v in &report.violations {
                    let kind = if v.is_error { "error" } else { "warning" };
                    println!("{kind}: {}", v.detail);
                }
                println!("layout ok ({} warnings)", report.warnings().count());
            })
        }
        Command::ProfileBlocks {
            config,
            layout,
            steps_frac,
            dump_maps,
        } => cmd_profile_blocks(config.as_deref(), &layout, steps_frac, dump_maps).map(
            |(profiles, selected)| {
                for p in &profiles {
                    println!(
                        "block={} self={:.4} background={:.4} text={:.4} vital={}",
                        p.block_index,
                        p.response_self,
                        p.response_background,
                        p.response_text,
                        p.vital
                    );
                }
                let list: Vec<String> = selected.iter().map(|b| b.to_string()).collect();
                println!("vital blocks: [{}]", list.join(", "));
            },
        ),
        Command::Bench {
            config,
            regions,
            repeats,
        } => cmd_bench(config.as_deref(), &regions, repeats).map(|rows| {
            println!(
                "{:>7}  {:>16}  {:>10}  {:>9}",
                "regions", "score_pairs", "wall_ms", "overhead"
            );
            for row in &rows {
                println!(
                    "{:>7}  {:>16}  {:>10.1}  {:>+8.1}%",
                    row.regions, row.pair_count, row.wall_ms, row.overhead_pct
                );
            }
            let xs: Vec<f64> = rows.iter().skip(1).map(|r| r.regions as f64).collect();
            let ys: Vec<f64> = rows.iter().skip(1).map(|r| r.pair_count as f64).collect();
            if xs.len() >= 2 {
                let (_, _, r2) = fit_affine(&xs, &ys);
                println!("affine fit of score pairs vs regions: r^2 = {r2:.6}");
            }
            let reference: Vec<String> = REFERENCE_OVERHEAD_FLUX
                .iter()
                .map(|(n, pct)| format!("{n}:+{pct:.0}%"))
                .collect();
            println!(
                "reference overhead (full-scale stack, informational): {}",
                reference.join(" ")
            );
        }),
        Command::DumpRead { file } => cmd_dump_read(&file).map(|(dims, data)| {
            let dims_text: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            let (mut lo, mut hi, mut sum) = (f32::INFINITY, f32::NEG_INFINITY, 0.0f64);
            for v in &data {
                lo = lo.min(*v);
                hi = hi.max(*v);
                sum += *v as f64;
            }
            let mean = if data.is_empty() {
                0.0
            } else {
                sum / data.len() as f64
            };
            println!("dims: [{}]  values: {}", dims_text.join(", "), data.len());
            println!("min: {lo}  max: {hi}  mean: {mean:.6}");
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!(
                "error code={} exit={} detail={:?}",
                e.code(),
                e.exit_code(),
                e.to_string()
            );
            e.exit_code()
        }
    }
}

/// Paths of everything a run wrote.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub output_dir: PathBuf,
    pub final_latent: PathBuf,
    pub manifest: PathBuf,
    pub trajectory: Vec<PathBuf>,
    pub alpha_masks: Vec<PathBuf>,
    pub composites: Vec<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    fs::write(&tmp, text)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_scene(input: &RunInput, layout_path: Option<&Path>) -> Result<(PipelineConfig, SceneSpec)> {
    match input {
        RunInput::Manifest(manifest) => {
            let scene = match layout_path {
                Some(path) => parse_layout(&read_text(path)?)?,
                None => manifest.scene.clone(),
            };
            Ok((manifest.config.clone(), scene))
        }
        RunInput::Config(config) => {
            let path = layout_path.ok_or_else(|| {
                Error::Config("a bare config needs --layout (manifests embed the scene)".into())
            })?;
            Ok((config.clone(), parse_layout(&read_text(path)?)?))
        }
    }
}

/// `run`: validate, execute, write artifacts and the manifest.
pub fn cmd_run(
    config_path: &Path,
    layout_path: Option<&Path>,
    strict: bool,
    dump_every: Option<usize>,
    output_override: Option<PathBuf>,
) -> Result<RunArtifacts> {
    let input = parse_run_input(&read_text(config_path)?)?;
    let (mut config, scene) = load_scene(&input, layout_path)?;
    config = config.with_env_seed()?;
    if let Some(every) = dump_every {
        config.dump.trajectory_every = every;
    }
    if let Some(dir) = output_override {
        config.output_dir = dir;
    }

    let report = validate(&scene, strict);
    for warning in report.warnings() {
        eprintln!("warning: {}", warning.detail);
    }
    report.ensure_valid()?;

    let pipeline = Pipeline::new(&config, &scene)?;
    let out_dir = config.output_dir.clone();
    fs::create_dir_all(&out_dir)?;

    let every = config.dump.trajectory_every;
    let mut trajectory_paths = Vec::new();
    let run: SampleRun = if every > 0 {
        let dir = out_dir.clone();
        let paths = &mut trajectory_paths;
        let mut hook = FnHook(
            move |step: usize, state: &mut crate::pipeline::PipelineState| {
                if step.is_multiple_of(every) {
                    let path = dir.join(format!("step_{step:03}.lbnd"));
                    let (dims, data) = latent_to_dump(
                        &state.latent.tokens,
                        state.latent.grid_height,
                        state.latent.grid_width,
                    );
                    write_tensor(&path, &dims, &data)?;
                    paths.push(path);
                    Ok(())
                } else {
                    Ok(())
                }
            },
        );
        pipeline.sample(&mut hook)?
    } else {
        pipeline.sample(&mut crate::pipeline::NoHooks)?
    };

    if !run.alphas.iter().all(|(_, m)| m.converged) {
        eprintln!("warning: alpha refinement hit max_iters before tol (result still used)");
    }

    let final_latent = out_dir.join("final_latent.lbnd");
    let latent = run.final_latent();
    let (dims, data) = latent_to_dump(&latent.tokens, latent.grid_height, latent.grid_width);
    write_tensor(&final_latent, &dims, &data)?;

    let mut alpha_paths = Vec::new();
    if config.dump.alpha_masks {
        for (order, mask) in &run.alphas {
            let path = out_dir.join(format!("alpha_order_{order}.lbnd"));
            let (dims, data) = matrix_to_dump(&mask.values);
            write_tensor(&path, &dims, &data)?;
            alpha_paths.push(path);
        }
    }
    let mut composite_paths = Vec::new();
    if config.dump.composites {
        for (step, composite) in &run.composites {
            let path = out_dir.join(format!("composite_step_{step:03}.lbnd"));
            let (dims, data) = matrix_to_dump(composite);
            write_tensor(&path, &dims, &data)?;
            composite_paths.push(path);
        }
    }

    let manifest = Manifest {
        config,
        scene,
        resolved_vital_blocks: pipeline.vital.iter().cloned().collect(),
    };
    let manifest_path = out_dir.join("manifest.json");
    write_text_atomic(
        &manifest_path,
        &serde_json::to_string_pretty(&manifest).unwrap(),
    )?;

    Ok(RunArtifacts {
        output_dir: out_dir,
        final_latent,
        manifest: manifest_path,
        trajectory: trajectory_paths,
        alpha_masks: alpha_paths,
        composites: composite_paths,
    })
}

/// `validate-layout`: parse, report, nonzero exit on strict violations.
pub fn cmd_validate_layout(layout_path: &Path, strict: bool) -> Result<ValidationReport> {
    let scene = parse_layout(&read_text(layout_path)?)?;
    let report = validate(&scene, strict);
    report.ensure_valid()?;
    Ok(report)
}

/// `profile-blocks`: early-step recording plus vital-block selection.
pub fn cmd_profile_blocks(
    config_path: Option<&Path>,
    layout_path: &Path,
    steps_frac: f64,
    dump_maps: bool,
) -> Result<(Vec<BlockProfile>, Vec<usize>)> {
    let config = match config_path {
        Some(path) => match parse_run_input(&read_text(path)?)? {
            RunInput::Config(c) => c,
            RunInput::Manifest(m) => m.config,
        },
        None => PipelineConfig::default(),
    }
    .with_env_seed()?;
    let scene = parse_layout(&read_text(layout_path)?)?;
    validate(&scene, false).ensure_valid()?;
    let pipeline = Pipeline::new(&config, &scene)?;
    let (mut profiles, recorder) = pipeline.profile(steps_frac)?;

    let n = profiles.len();
    let split = 2 * n / 3;
    let selection = crate::model::select_vital_blocks(
        &profiles,
        2.min(split.saturating_sub(1)),
        6.min(n - split),
    )?;
    crate::model::mark_vital(&mut profiles, &selection);

    if dump_maps {
        fs::create_dir_all(&config.output_dir)?;
        for block in 0..n {
            let mut mean = recorder.steps[0].blocks[block].clone();
            for step in &recorder.steps[1..] {
                mean += &step.blocks[block];
            }
            mean /= recorder.steps.len() as f64;
            let path = config.output_dir.join(format!("map_block_{block:02}.lbnd"));
            let (dims, data) = matrix_to_dump(&mean);
            write_tensor(&path, &dims, &data)?;
        }
    }
    Ok((profiles, selection))
}

fn parse_region_range(text: &str) -> Result<Vec<usize>> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let start: usize = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad region range start {a:?}")))?;
        let end: usize = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .map_err(|_| Error::Config(format!("bad region range end {b:?}")))?;
        if start == 0 || end < start || end > 6 {
            return Err(Error::Config(format!(
                "region range {text:?} must fit 1..6 (six anchor positions)"
            )));
        }
        Ok((start..=end).collect())
    } else {
        let single: usize = text
            .parse()
            .map_err(|_| Error::Config(format!("bad region count {text:?}")))?;
        if single == 0 || single > 6 {
            return Err(Error::Config("region count must fit 1..6".into()));
        }
        Ok(vec![single])
    }
}

/// `bench`: wall-clock plus analytic scaling table.
pub fn cmd_bench(
    config_path: Option<&Path>,
    regions: &str,
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    let config = match config_path {
        Some(path) => match parse_run_input(&read_text(path)?)? {
            RunInput::Config(c) => c,
            RunInput::Manifest(m) => m.config,
        },
        None => default_bench_config(),
    }
    .with_env_seed()?;
    let counts = parse_region_range(regions)?;
    run_bench(&config, &counts, repeats)
}

/// `dump-read`: decode a tensor dump.
pub fn cmd_dump_read(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    read_tensor(path)
}

/// Analytic pair count for one resolved pipeline (exposed for the bench
/// table and tests).
pub fn pair_count_of(pipeline: &Pipeline) -> u128 {
    attention_pair_count(&CostModel::of(pipeline))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_range_parses() {
        assert_eq!(parse_region_range("1..6").unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(parse_region_range("2..3").unwrap(), vec![2, 3]);
        assert_eq!(parse_region_range("4").unwrap(), vec![4]);
        assert!(parse_region_range("0..9").is_err());
        assert!(parse_region_range("x").is_err());
    }

    #[test]
    fn cli_parses_the_documented_flags() {
        let cli = Cli::try_parse_from([
            "layerbind",
            "run",
            "--config",
            "c.json",
            "--layout",
            "l.json",
            "--strict",
            "--dump-every",
            "5",
        ])
        .unwrap();
        match cli.command {
            Command::Run {
                strict, dump_every, ..
            } => {
                assert!(strict);
                assert_eq!(dump_every, Some(5));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(
            Cli::try_parse_from(["layerbind", "validate-layout", "l.json", "--strict"]).is_ok()
        );
        assert!(Cli::try_parse_from([
            "layerbind",
            "profile-blocks",
            "--layout",
            "l.json",
            "--steps-frac",
            "0.2"
        ])
        .is_ok());
        assert!(Cli::try_parse_from(["layerbind", "bench", "--regions", "1..6"]).is_ok());
        assert!(Cli::try_parse_from(["layerbind", "dump-read", "f.lbnd"]).is_ok());
    }
}
