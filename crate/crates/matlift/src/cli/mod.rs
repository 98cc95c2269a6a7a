//! Command-line orchestration of the pipeline stages.
//!
//! One directory per scene with stage outputs layered in:
//!
//! ```text
//! scene/
//!   scene.json gaussians.bin env.f32 images/ maps/   synth stage (train data)
//!   gt/                                              ground truth for eval
//!   lifted/                                          lift stage
//!   refined_<variant>/                               refine stage
//!   ablation.csv                                     ablate stage
//! ```
//!
//! Every command writes a `run_manifest.json` recording its config, seed,
//! input hashes and stage timings; downstream stages verify the recorded
//! hashes before running. Exit codes: 0 ok, 2 validation, 3 numerical.

mod manifest;

pub use manifest::RunManifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::bench::{
    self, evaluate_relighting, generate_scene, oracle_predict, CorruptionConfig, SceneSpec,
};
use crate::error::{Error, Result};
use crate::img::{self, PngTransfer};
use crate::merger::save_params;
use crate::raytrace::TraceParams;
use crate::refine::{self, refine_session, RefineConfig, Variant};
use crate::render;
use crate::scene::{load_scene, save_scene, ScenePaths};
use crate::shading::tonemap_inverse_gamma;

#[derive(Parser, Debug)]
#[command(name = "matlift", version, about = "Lift 2D material predictions onto 3D Gaussian scenes and refine them under an optimizable environment light")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene with ground truth and corrupted
    /// predictor maps.
    Synth {
        /// Scene spec JSON (defaults to the built-in benchmark scene).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Corruption config JSON (defaults to the benchmark corruption).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Lift per-view material maps onto the Gaussians (16x16 supersampling
    /// by default).
    Lift {
        scene_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        supersample: usize,
        /// Apply an inverse gamma to basecolor maps on ingestion
        /// (linearizes tone-mapped predictor outputs).
        #[arg(long)]
        inverse_gamma: Option<f64>,
        /// Hit threshold for the lifting trace.
        #[arg(long, default_value_t = 0.05)]
        hit_threshold: f64,
        #[arg(long, default_value_t = 1.0)]
        falloff: f64,
    },
    /// Train the neural mergers (and environment map) on a lifted scene.
    Refine {
        scene_dir: PathBuf,
        /// RefineConfig JSON; flags below override individual fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Resume from a training checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render a refined scene under an environment map.
    Relight {
        scene_dir: PathBuf,
        /// Environment map (.f32 raster).
        #[arg(long)]
        env: PathBuf,
        /// Comma-separated view indices (default: all cameras).
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a refined scene against the ground truth on held-out views
    /// and environments.
    Eval {
        scene_dir: PathBuf,
        #[arg(long, default_value = "full")]
        variant: Variant,
    },
    /// Run all training variants with a shared seed and tabulate
    /// relighting metrics.
    Ablate {
        scene_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

impl clap::builder::ValueParserFactory for Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Variant>().map_err(|e| e.to_string()))
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MATLIFT_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build();
            match pool {
                Ok(pool) => pool.install(|| dispatch(&cli.command)),
                Err(e) => Err(Error::validation(format!("worker pool: {e}"))),
            }
        }
        None => dispatch(&cli.command),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Synth { spec, config, seed, out } => {
            cmd_synth(spec.as_deref(), config.as_deref(), *seed, out)
        }
        Command::Lift {
            scene_dir,
            supersample,
            inverse_gamma,
            hit_threshold,
            falloff,
        } => cmd_lift(scene_dir, *supersample, *inverse_gamma, *hit_threshold, *falloff),
        Command::Refine {
            scene_dir,
            config,
            iterations,
            seed,
            variant,
            checkpoint_every,
            resume,
        } => cmd_refine(
            scene_dir,
            config.as_deref(),
            *iterations,
            *seed,
            *variant,
            *checkpoint_every,
            resume.as_deref(),
        ),
        Command::Relight { scene_dir, env, views, out } => {
            cmd_relight(scene_dir, env, views.as_deref(), out.as_deref())
        }
        Command::Eval { scene_dir, variant } => cmd_eval(scene_dir, *variant),
        Command::Ablate { scene_dir, config, seed, iterations } => {
            cmd_ablate(scene_dir, config.as_deref(), *seed, *iterations)
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&content).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: manifest::json_byte_offset(&content, e.line(), e.column()),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(
    spec_path: Option<&Path>,
    corruption_path: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let spec: SceneSpec = match spec_path {
        Some(p) => read_json(p)?,
        None => SceneSpec::default(),
    };
    let corruption: CorruptionConfig = match corruption_path {
        Some(p) => read_json(p)?,
        None => CorruptionConfig::default(),
    };
    let mut manifest = RunManifest::new(
        "synth",
        seed,
        serde_json::json!({
            "spec": spec,
            "corruption": corruption,
        }),
    );
    if let Some(p) = spec_path {
        manifest.record_input(p)?;
    }
    if let Some(p) = corruption_path {
        manifest.record_input(p)?;
    }

    let t_gen = Instant::now();
    let mut synth = generate_scene(&spec, seed)?;
    manifest.record_timing("generate", t_gen);

    let t_corrupt = Instant::now();
    let corrupted = oracle_predict(
        &synth.gt.gt_maps,
        &synth.gt.normal_maps,
        &synth.gt.alpha_maps,
        &corruption,
        seed,
    );
    manifest.record_timing("corrupt", t_corrupt);

    let t_io = Instant::now();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // Ground truth lives under gt/: geometry with GT materials, held-out
    // cameras and environments, and the uncorrupted maps.
    let gt_dir = out.join("gt");
    std::fs::create_dir_all(gt_dir.join("maps")).map_err(|e| Error::io(&gt_dir, e))?;
    std::fs::create_dir_all(gt_dir.join("envs")).map_err(|e| Error::io(&gt_dir, e))?;
    crate::scene::io::write_gaussian_block(&synth.bundle.gaussians, &gt_dir.join("materials.bin"))?;
    crate::scene::io::save_cameras(&synth.gt.holdout_cameras, &gt_dir.join("cameras.json"))?;
    for (i, (name, env)) in synth.gt.holdout_envs.iter().enumerate() {
        img::save_f32r(&env.to_raster(), &gt_dir.join(format!("envs/holdout_{i:02}_{name}.f32")))?;
    }
    for (i, maps) in synth.gt.gt_maps.iter().enumerate() {
        let dir = gt_dir.join("maps");
        img::save_png(&maps.basecolor, &ScenePaths::map_basecolor(&dir, i), PngTransfer::Srgb)?;
        img::save_png(&maps.roughness, &ScenePaths::map_roughness(&dir, i), PngTransfer::Linear)?;
        img::save_png(&maps.metallic, &ScenePaths::map_metallic(&dir, i), PngTransfer::Linear)?;
    }

    // The train bundle carries the corrupted maps and no GT materials.
    for g in synth.bundle.gaussians.iter_mut() {
        g.merged_material = None;
    }
    synth.bundle.material_maps = Some(corrupted);
    save_scene(&synth.bundle, out)?;
    manifest.record_timing("write", t_io);

    manifest.record_output(&ScenePaths::manifest(out));
    manifest.record_output(&gt_dir.join("materials.bin"));
    manifest.record_timing("total", started);
    manifest.write(out)?;
    println!(
        "synth: {} gaussians, {} train views, {} held-out views -> {}",
        synth.bundle.gaussians.len(),
        synth.bundle.cameras.len(),
        synth.gt.holdout_cameras.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// lift
// ---------------------------------------------------------------------------

pub fn cmd_lift(
    scene_dir: &Path,
    supersample: usize,
    inverse_gamma: Option<f64>,
    hit_threshold: f64,
    falloff: f64,
) -> Result<()> {
    let started = Instant::now();
    manifest::verify_upstream(scene_dir)?;
    let mut bundle = load_scene(scene_dir)?;
    let mut manifest = RunManifest::new(
        "lift",
        0,
        serde_json::json!({
            "supersample": supersample,
            "inverse_gamma": inverse_gamma,
            "hit_threshold": hit_threshold,
            "falloff": falloff,
        }),
    );
    manifest.record_input(&ScenePaths::manifest(scene_dir))?;
    manifest.record_input(&ScenePaths::gaussians(scene_dir))?;

    if let Some(gamma) = inverse_gamma {
        if let Some(maps) = bundle.material_maps.as_mut() {
            for m in maps.iter_mut() {
                m.basecolor = tonemap_inverse_gamma(&m.basecolor, gamma)?;
            }
        }
    }

    let t_lift = Instant::now();
    let params = TraceParams {
        hit_threshold,
        falloff,
    };
    let stats = crate::raytrace::lift_scene(&mut bundle, supersample, params)?;
    manifest.record_timing("lift", t_lift);

    let out = scene_dir.join("lifted");
    save_scene(&bundle, &out)?;
    manifest.record_output(&ScenePaths::manifest(&out));
    manifest.record_timing("total", started);
    manifest.write(&out)?;
    println!(
        "lift: {} -> {} gaussians ({} culled, {:.2}%)",
        stats.input_gaussians,
        stats.retained_gaussians,
        stats.culled_gaussians,
        100.0 * stats.culled_gaussians as f64 / stats.input_gaussians.max(1) as f64
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// refine
// ---------------------------------------------------------------------------

pub fn refined_dir(scene_dir: &Path, variant: Variant) -> PathBuf {
    scene_dir.join(format!("refined_{}", variant.name()))
}

fn load_refine_config(
    config: Option<&Path>,
    iterations: Option<usize>,
    seed: Option<u64>,
    variant: Option<Variant>,
    checkpoint_every: Option<usize>,
) -> Result<RefineConfig> {
    let mut cfg: RefineConfig = match config {
        Some(p) => read_json(p)?,
        None => RefineConfig::default(),
    };
    if let Some(it) = iterations {
        cfg.iterations = it;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(c) = checkpoint_every {
        cfg.checkpoint_every = c;
    }
    Ok(cfg)
}

pub fn cmd_refine(
    scene_dir: &Path,
    config: Option<&Path>,
    iterations: Option<usize>,
    seed: Option<u64>,
    variant: Option<Variant>,
    checkpoint_every: Option<usize>,
    resume: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    let cfg = load_refine_config(config, iterations, seed, variant, checkpoint_every)?;
    let lifted_dir = scene_dir.join("lifted");
    if !ScenePaths::manifest(&lifted_dir).exists() {
        return Err(Error::validation(format!(
            "no lifted scene at {}; run `matlift lift` first",
            lifted_dir.display()
        )));
    }
    manifest::verify_upstream(&lifted_dir)?;
    let mut bundle = load_scene(&lifted_dir)?;

    let out = refined_dir(scene_dir, cfg.variant);
    let ckpt_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut manifest = RunManifest::new("refine", cfg.seed, serde_json::to_value(&cfg).unwrap());
    manifest.record_input(&ScenePaths::manifest(&lifted_dir))?;
    manifest.record_input(&ScenePaths::gaussians(&lifted_dir))?;
    if let Some(p) = resume {
        manifest.record_input(p)?;
    }

    let t_train = Instant::now();
    let output: refine::RefineOutput<f32> =
        refine_session(&mut bundle, &cfg, Some(&ckpt_dir), resume, &mut None)?;
    manifest.record_timing("train", t_train);

    let t_io = Instant::now();
    save_scene(&bundle, &out)?;
    img::save_f32r(&output.env.to_raster(), &out.join("env_refined.f32"))?;
    save_params(&output.params, &out.join("merger.ckpt"))?;
    let mut csv = String::from("step,l_image,l_3dgs,total\n");
    for h in &output.history {
        csv.push_str(&format!("{},{},{},{}\n", h.step, h.l_image, h.l_3dgs, h.total));
    }
    std::fs::write(out.join("loss.csv"), csv).map_err(|e| Error::io(&out, e))?;
    manifest.record_timing("write", t_io);

    manifest.record_output(&ScenePaths::manifest(&out));
    manifest.record_output(&out.join("merger.ckpt"));
    manifest.record_output(&out.join("loss.csv"));
    manifest.record_timing("total", started);
    manifest.write(&out)?;
    let last = output.history.last();
    println!(
        "refine[{}]: {} steps, final total loss {}",
        cfg.variant.name(),
        output.history.len(),
        last.map(|h| format!("{:.6}", h.total)).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// relight
// ---------------------------------------------------------------------------

pub fn cmd_relight(
    scene_dir: &Path,
    env_path: &Path,
    views: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let started = Instant::now();
    if !env_path.exists() {
        return Err(Error::validation(format!(
            "environment map not found: {}",
            env_path.display()
        )));
    }
    let bundle = load_scene(scene_dir)?;
    if bundle.gaussians.iter().any(|g| g.merged_material.is_none()) {
        return Err(Error::validation(
            "scene has no merged materials; run `matlift refine` first",
        ));
    }
    let env = crate::scene::EnvironmentMap::from_raster(&img::load_f32r(env_path)?)?;
    let view_indices: Vec<usize> = match views {
        Some(list) => list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::validation(format!("bad view index {s:?} in --views")))
            })
            .collect::<Result<_>>()?,
        None => (0..bundle.cameras.len()).collect(),
    };
    for &v in &view_indices {
        if v >= bundle.cameras.len() {
            return Err(Error::validation(format!(
                "view {v} out of range ({} cameras)",
                bundle.cameras.len()
            )));
        }
    }

    let env_stem = env_path.file_stem().unwrap_or_default().to_string_lossy().to_string();
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| scene_dir.join("relight").join(&env_stem));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut manifest = RunManifest::new(
        "relight",
        0,
        serde_json::json!({ "env": env_path.display().to_string(), "views": view_indices }),
    );
    manifest.record_input(&ScenePaths::manifest(scene_dir))?;
    manifest.record_input(env_path)?;

    let t_render = Instant::now();
    let accel = crate::raytrace::SceneAccel::build(&bundle.gaussians, TraceParams::compositing())?;
    for &v in &view_indices {
        let (image, _) = render::render_view_with(
            &accel,
            &bundle.gaussians,
            &bundle.cameras[v],
            &env,
            crate::raytrace::AttributeSource::Merged,
            [0.0; 3],
        )?;
        let f32_path = out_dir.join(format!("view_{v:04}.f32"));
        img::save_f32r(&image, &f32_path)?;
        // 8-bit preview with the sRGB (gamma 2.2) encode.
        let preview = image.map(|x| x.clamp(0.0, 1.0));
        img::save_png(&preview, &out_dir.join(format!("view_{v:04}.png")), PngTransfer::Srgb)?;
        manifest.record_output(&f32_path);
    }
    manifest.record_timing("render", t_render);
    manifest.record_timing("total", started);
    manifest.write(&out_dir)?;
    println!(
        "relight: {} views under {} -> {}",
        view_indices.len(),
        env_stem,
        out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / ablate
// ---------------------------------------------------------------------------

struct GtData {
    reference: Vec<crate::scene::GaussianPrimitive>,
    holdout_cameras: Vec<crate::scene::Camera>,
    holdout_envs: Vec<(String, crate::scene::EnvironmentMap)>,
}

fn load_gt(scene_dir: &Path) -> Result<GtData> {
    let gt_dir = scene_dir.join("gt");
    if !gt_dir.exists() {
        return Err(Error::validation(format!(
            "no ground truth at {}; eval needs a synth-generated scene",
            gt_dir.display()
        )));
    }
    let reference = crate::scene::io::read_gaussian_block(&gt_dir.join("materials.bin"))?;
    let holdout_cameras = crate::scene::io::load_cameras(&gt_dir.join("cameras.json"))?;
    let mut holdout_envs = Vec::new();
    let envs_dir = gt_dir.join("envs");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&envs_dir)
        .map_err(|e| Error::io(&envs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "f32").unwrap_or(false))
        .collect();
    entries.sort();
    for path in entries {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let env = crate::scene::EnvironmentMap::from_raster(&img::load_f32r(&path)?)?;
        holdout_envs.push((name, env));
    }
    if holdout_envs.is_empty() {
        return Err(Error::validation("no held-out environment maps under gt/envs"));
    }
    Ok(GtData {
        reference,
        holdout_cameras,
        holdout_envs,
    })
}

pub fn cmd_eval(scene_dir: &Path, variant: Variant) -> Result<()> {
    let started = Instant::now();
    let refined = refined_dir(scene_dir, variant);
    if !ScenePaths::manifest(&refined).exists() {
        return Err(Error::validation(format!(
            "no refined scene at {}; run `matlift refine --variant {}` first",
            refined.display(),
            variant.name()
        )));
    }
    let trained = load_scene(&refined)?;
    let gt = load_gt(scene_dir)?;

    let mut manifest =
        RunManifest::new("eval", 0, serde_json::json!({ "variant": variant.name() }));
    manifest.record_input(&ScenePaths::manifest(&refined))?;
    manifest.record_input(&scene_dir.join("gt/materials.bin"))?;

    let t_eval = Instant::now();
    let eval = evaluate_relighting(
        &trained.gaussians,
        &gt.reference,
        &gt.holdout_cameras,
        &gt.holdout_envs,
        TraceParams::compositing(),
    )?;
    manifest.record_timing("eval", t_eval);

    let out = refined.join("eval");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("metrics.csv"), eval.table.to_csv()).map_err(|e| Error::io(&out, e))?;
    std::fs::write(out.join("summary.txt"), eval.table.to_text()).map_err(|e| Error::io(&out, e))?;
    manifest.record_output(&out.join("metrics.csv"));
    manifest.record_timing("total", started);
    manifest.write(&out)?;
    print!("{}", eval.table.to_text());
    Ok(())
}

pub fn cmd_ablate(
    scene_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    iterations: Option<usize>,
) -> Result<()> {
    let started = Instant::now();
    let cfg = load_refine_config(config, iterations, seed, None, None)?;
    let lifted_dir = scene_dir.join("lifted");
    if !ScenePaths::manifest(&lifted_dir).exists() {
        return Err(Error::validation(format!(
            "no lifted scene at {}; run `matlift lift` first",
            lifted_dir.display()
        )));
    }
    let lifted = load_scene(&lifted_dir)?;
    let gt = load_gt(scene_dir)?;

    let mut manifest = RunManifest::new("ablate", cfg.seed, serde_json::to_value(&cfg).unwrap());
    manifest.record_input(&ScenePaths::manifest(&lifted_dir))?;

    let t_run = Instant::now();
    let rows = bench::run_ablation(
        &lifted,
        &gt.reference,
        &gt.holdout_cameras,
        &gt.holdout_envs,
        &cfg,
        &Variant::ALL,
    )?;
    manifest.record_timing("ablate", t_run);

    let mut csv = String::from("variant,relight_psnr,relight_ssim\n");
    let mut text = format!("{:<16} {:>9} {:>7}\n", "variant", "PSNR", "SSIM");
    for row in &rows {
        let p = if row.relight_psnr.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.3}", row.relight_psnr)
        };
        csv.push_str(&format!("{},{},{:.4}\n", row.variant.name(), p, row.relight_ssim));
        text.push_str(&format!(
            "{:<16} {:>9} {:>7.4}\n",
            row.variant.name(),
            p,
            row.relight_ssim
        ));
    }
    let csv_path = scene_dir.join("ablation.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    manifest.record_output(&csv_path);
    manifest.record_timing("total", started);
    manifest.write(scene_dir)?;
    print!("{text}");
    Ok(())
}
