//! Joint Neural-Merger + environment-map refinement over cached compositing.
//!
//! Each step samples one training view uniformly, runs the mergers over the
//! Gaussians visible there, re-composites the material G-buffer through the
//! fixed blend weights, scores it against the 2D predictions (L1) and --
//! for the photometric variants -- shades it and scores the rendering
//! against the input photograph (lambda L1 + (1-lambda)(1-SSIM)), then takes
//! Adam steps on the mergers (both losses) and the environment (photometric
//! loss only). Geometry stays fixed throughout.

mod adam;
mod context;
mod loss;
mod ssim;
mod step;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use context::{sigmoid, softplus, softplus_inv, EnvState, TrainContext, ViewData};
pub use loss::{l1_masked, loss_3dgs, loss_image};
pub use ssim::{ssim, ssim_with_grad, SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
pub use step::{loss_and_grads, StepOutput};

use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merger::{
    forward_batch, init_params, MaterialChannel, MergerHead, MergerParams, DEFAULT_MAX_VIEWS,
    DEFAULT_PE_LEVELS,
};
use crate::real::Real;
use crate::scene::{EnvironmentMap, MaterialSample, SceneBundle};

/// Training variants: the full method and its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Material supervision + photometric loss + environment optimization.
    Full,
    /// Material supervision only; no shading, no environment updates.
    SupervisedOnly,
    /// Uniform-weight merge of the lifted estimates; no training at all.
    ProjAverage,
    /// Full pipeline with the softmax constraint removed (direct value head).
    NoSoftmax,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::SupervisedOnly,
        Variant::ProjAverage,
        Variant::NoSoftmax,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SupervisedOnly => "supervised_only",
            Variant::ProjAverage => "proj_average",
            Variant::NoSoftmax => "no_softmax",
        }
    }

    pub fn head(&self) -> MergerHead {
        match self {
            Variant::NoSoftmax => MergerHead::DirectValue,
            _ => MergerHead::Softmax,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "supervised_only" | "supervised" => Ok(Variant::SupervisedOnly),
            "proj_average" | "proj-average" => Ok(Variant::ProjAverage),
            "no_softmax" | "no-softmax" => Ok(Variant::NoSoftmax),
            other => Err(Error::validation(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lr_merger: f64,
    pub lr_env: f64,
    pub lambda_photo: f64,
    pub weight_material_loss: f64,
    pub seed: u64,
    pub variant: Variant,
    pub pe_levels: usize,
    pub max_views: usize,
    pub env_width: usize,
    pub env_height: usize,
    pub env_init: f64,
    pub hit_threshold: f64,
    pub falloff: f64,
    pub background: [f64; 3],
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Optional per-Gaussian normal refinement through the photometric loss.
    pub refine_normals: bool,
    pub lr_normal: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 10_000,
            lr_merger: 0.001,
            lr_env: 0.01,
            lambda_photo: 0.8,
            weight_material_loss: 1.0,
            seed: 0,
            variant: Variant::Full,
            pe_levels: DEFAULT_PE_LEVELS,
            max_views: DEFAULT_MAX_VIEWS,
            env_width: 32,
            env_height: 16,
            env_init: 0.3,
            hit_threshold: 0.01,
            falloff: 1.0,
            background: [0.0; 3],
            checkpoint_every: 0,
            refine_normals: false,
            lr_normal: 1e-4,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_photo >= 0.0 && self.lambda_photo <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "lambda_photo",
                message: format!("must be in [0,1], got {}", self.lambda_photo),
            });
        }
        if self.iterations < 1 {
            return Err(Error::InvalidParameter {
                name: "iterations",
                message: "must be at least 1".into(),
            });
        }
        if self.env_width < 2 || self.env_height < 2 {
            return Err(Error::InvalidParameter {
                name: "env_resolution",
                message: "environment must be at least 2x2".into(),
            });
        }
        Ok(())
    }
}

/// Per-step loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub step: usize,
    pub l_image: f64,
    pub l_3dgs: f64,
    pub total: f64,
    /// L1 breakdown: basecolor, roughness, metallic.
    pub per_channel: [f64; 3],
}

pub struct RefineOutput<R> {
    pub params: MergerParams<R>,
    pub env: EnvironmentMap,
    pub history: Vec<LossReport>,
}

/// Observer invoked after every optimizer step (invariant checks, logging).
pub struct StepObservation<'a, R> {
    pub step: usize,
    pub params: &'a MergerParams<R>,
    pub env: &'a EnvState<R>,
    pub ctx: &'a TrainContext<R>,
}

pub fn refine<R: Real>(scene: &mut SceneBundle, cfg: &RefineConfig) -> Result<RefineOutput<R>> {
    refine_session(scene, cfg, None, None, &mut None)
}

type Observer<'o, R> = Option<&'o mut dyn FnMut(StepObservation<'_, R>)>;

pub fn refine_session<R: Real>(
    scene: &mut SceneBundle,
    cfg: &RefineConfig,
    checkpoint_dir: Option<&Path>,
    resume_from: Option<&Path>,
    observer: &mut Observer<'_, R>,
) -> Result<RefineOutput<R>> {
    cfg.validate()?;
    let ctx = TrainContext::<R>::build(scene, cfg)?;

    if cfg.variant == Variant::ProjAverage {
        // Uniform weights over seen views; identical to the zero-initialized
        // merger output, so no optimization is needed.
        write_back_proj_average(scene, &ctx);
        let mut env = EnvState::<R>::new(&ctx.env_layout, cfg.env_init);
        env.sync();
        return Ok(RefineOutput {
            params: init_params(cfg.seed, ctx.merger_views.len(), cfg.variant.head(), cfg.pe_levels),
            env: env.env_map(),
            history: Vec::new(),
        });
    }

    let views = ctx.merger_views.len();
    let mut params: MergerParams<R> =
        init_params(cfg.seed, views, cfg.variant.head(), cfg.pe_levels);
    let mut adams: Vec<Adam<R>> = MaterialChannel::ALL
        .iter()
        .map(|&c| Adam::for_tensors(&params.channel(c).flat_tensors()))
        .collect();
    let mut env = EnvState::<R>::new(&ctx.env_layout, cfg.env_init);
    let mut env_adam = Adam::<R>::new(&[env.u.len()]);
    let mut normals = ctx.normals.clone();
    let mut normal_adam = Adam::<R>::new(&[normals.len() * 3]);
    let mut history: Vec<LossReport> = Vec::with_capacity(cfg.iterations);
    let mut start_step = 0usize;

    if let Some(path) = resume_from {
        let state = TrainCheckpoint::<R>::load(path)?;
        if state.views != views || state.variant != *cfg.variant.name() {
            return Err(Error::validation(format!(
                "checkpoint {path:?} does not match this run (views {} vs {}, variant {} vs {})",
                state.views,
                views,
                state.variant,
                cfg.variant.name()
            )));
        }
        params = state.params;
        adams = state.adams;
        env.u = state.env_u;
        env_adam = state.env_adam;
        normals = state.normals;
        normal_adam = state.normal_adam;
        history = state.history;
        start_step = state.step;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Replay the view-sampling draws consumed before the checkpoint.
    for _ in 0..start_step {
        let _: usize = rng.random_range(0..ctx.views.len());
    }

    let update_env = matches!(cfg.variant, Variant::Full | Variant::NoSoftmax);
    for step in start_step..cfg.iterations {
        let view = rng.random_range(0..ctx.views.len());
        env.sync();
        let normals_arg = if cfg.refine_normals && update_env {
            Some(normals.as_slice())
        } else {
            None
        };
        let out = loss_and_grads(&ctx, view, &params, &env, cfg, normals_arg)?;

        for (ci, &c) in MaterialChannel::ALL.iter().enumerate() {
            let grads = out.channel_grads[ci].flat_tensors();
            let merger = params.channel_mut(c);
            let mut tensors = merger.flat_tensors_mut();
            adams[ci].step(&mut tensors, &grads, cfg.lr_merger);
        }
        if update_env {
            env_adam.step(&mut [&mut env.u], &[&out.env_grad_u], cfg.lr_env);
        }
        if let (Some(ngrads), true) = (&out.normal_grads, cfg.refine_normals && update_env) {
            // Scatter the view-local gradients into the global normal table.
            let mut full = vec![R::zero(); normals.len() * 3];
            for (local, g) in ngrads.iter().enumerate() {
                let gid = ctx.views[view].visible[local] as usize;
                for k in 0..3 {
                    full[gid * 3 + k] = g[k];
                }
            }
            let mut flat: Vec<R> = normals.iter().flatten().copied().collect();
            normal_adam.step(&mut [&mut flat], &[&full], cfg.lr_normal);
            for (i, nrm) in normals.iter_mut().enumerate() {
                let v = [flat[i * 3], flat[i * 3 + 1], flat[i * 3 + 2]];
                let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if len > R::of(1e-9) {
                    *nrm = [v[0] / len, v[1] / len, v[2] / len];
                }
            }
        }

        let mut report = out.report;
        report.step = step;
        history.push(report);

        if let Some(obs) = observer.as_mut() {
            obs(StepObservation {
                step,
                params: &params,
                env: &env,
                ctx: &ctx,
            });
        }

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = checkpoint_dir {
                let state = TrainCheckpoint {
                    step: step + 1,
                    views,
                    variant: cfg.variant.name().to_string(),
                    params: params.clone(),
                    adams: adams.clone(),
                    env_u: env.u.clone(),
                    env_adam: env_adam.clone(),
                    normals: normals.clone(),
                    normal_adam: normal_adam.clone(),
                    history: history.clone(),
                };
                state.save(&checkpoint_path(dir, step + 1))?;
            }
        }
    }

    env.sync();
    write_back_merged(scene, &ctx, &params)?;
    if cfg.refine_normals {
        for (g, n) in scene.gaussians.iter_mut().zip(&normals) {
            g.normal = nalgebra::Vector3::new(n[0].as_f64(), n[1].as_f64(), n[2].as_f64());
        }
    }
    Ok(RefineOutput {
        params,
        env: env.env_map(),
        history,
    })
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.bin"))
}

fn write_back_proj_average<R: Real>(scene: &mut SceneBundle, ctx: &TrainContext<R>) {
    let merger_views = &ctx.merger_views;
    for g in scene.gaussians.iter_mut() {
        let pv = g.per_view_materials.as_ref().expect("lifted scene");
        let mut acc = [0.0f64; crate::scene::MATERIAL_CHANNELS];
        let mut count = 0usize;
        for &v in merger_views {
            let v = v as usize;
            if pv.seen[v] {
                for ch in 0..crate::scene::MATERIAL_CHANNELS {
                    acc[ch] += pv.samples[v].channel(ch);
                }
                count += 1;
            }
        }
        if count == 0 {
            // Seen only outside the merger subset; all slots carry the
            // median fill, so average the subset.
            for &v in merger_views {
                let v = v as usize;
                for ch in 0..crate::scene::MATERIAL_CHANNELS {
                    acc[ch] += pv.samples[v].channel(ch);
                }
            }
            count = merger_views.len();
        }
        for a in acc.iter_mut() {
            *a /= count as f64;
        }
        g.merged_material = Some(MaterialSample::from_channels(acc));
    }
}

fn write_back_merged<R: Real>(
    scene: &mut SceneBundle,
    ctx: &TrainContext<R>,
    params: &MergerParams<R>,
) -> Result<()> {
    let mut merged = vec![[0.0f64; crate::scene::MATERIAL_CHANNELS]; ctx.gaussian_count];
    for (ci, &c) in MaterialChannel::ALL.iter().enumerate() {
        let data = &ctx.global[ci];
        let (out, _) = forward_batch(params.channel(c), &data.x, &data.values, &data.seen)?;
        let dims = c.dims();
        let base = match c {
            MaterialChannel::Basecolor => 0,
            MaterialChannel::Roughness => 3,
            MaterialChannel::Metallic => 4,
        };
        for gi in 0..ctx.gaussian_count {
            for k in 0..dims {
                merged[gi][base + k] = out[(gi, k)].as_f64();
            }
        }
    }
    for (g, ch) in scene.gaussians.iter_mut().zip(merged) {
        g.merged_material = Some(MaterialSample::from_channels(ch));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training checkpoints (parameters + optimizer state + history)
// ---------------------------------------------------------------------------

pub const TRAIN_CKPT_MAGIC: &[u8; 4] = b"MLTC";
pub const TRAIN_CKPT_VERSION: u32 = 1;

pub struct TrainCheckpoint<R> {
    pub step: usize,
    pub views: usize,
    pub variant: String,
    pub params: MergerParams<R>,
    pub adams: Vec<Adam<R>>,
    pub env_u: Vec<R>,
    pub env_adam: Adam<R>,
    pub normals: Vec<[R; 3]>,
    pub normal_adam: Adam<R>,
    pub history: Vec<LossReport>,
}

impl<R: Real> TrainCheckpoint<R> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.write_all(TRAIN_CKPT_MAGIC).expect("vec");
        buf.write_u32::<LittleEndian>(TRAIN_CKPT_VERSION).expect("vec");
        buf.write_u64::<LittleEndian>(self.step as u64).expect("vec");
        buf.write_u32::<LittleEndian>(self.views as u32).expect("vec");
        let vbytes = self.variant.as_bytes();
        buf.write_u32::<LittleEndian>(vbytes.len() as u32).expect("vec");
        buf.write_all(vbytes).expect("vec");

        let tmp = tempfile_path(path);
        {
            let mut w: Vec<u8> = buf;
            crate::merger::checkpoint_write_params(&mut w, &self.params).expect("vec");
            for adam in &self.adams {
                write_adam(&mut w, adam).expect("vec");
            }
            crate::merger::checkpoint::write_tensor(&mut w, &self.env_u).expect("vec");
            write_adam(&mut w, &self.env_adam).expect("vec");
            let flat_normals: Vec<R> = self.normals.iter().flatten().copied().collect();
            crate::merger::checkpoint::write_tensor(&mut w, &flat_normals).expect("vec");
            write_adam(&mut w, &self.normal_adam).expect("vec");
            w.write_u64::<LittleEndian>(self.history.len() as u64).expect("vec");
            for h in &self.history {
                w.write_u64::<LittleEndian>(h.step as u64).expect("vec");
                for v in [h.l_image, h.l_3dgs, h.total, h.per_channel[0], h.per_channel[1], h.per_channel[2]] {
                    w.write_f64::<LittleEndian>(v).expect("vec");
                }
            }
            std::fs::write(&tmp, w).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Cursor::new(bytes.as_slice());
        let parse = |r: &Cursor<&[u8]>, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            offset: r.position() as usize,
            message: msg.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| parse(&r, "truncated"))?;
        if &magic != TRAIN_CKPT_MAGIC {
            return Err(parse(&r, "bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated"))?;
        if version != TRAIN_CKPT_VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: TRAIN_CKPT_VERSION,
            });
        }
        let step = r.read_u64::<LittleEndian>().map_err(|_| parse(&r, "truncated"))? as usize;
        let views = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated"))? as usize;
        let vlen = r.read_u32::<LittleEndian>().map_err(|_| parse(&r, "truncated"))? as usize;
        let mut vbytes = vec![0u8; vlen];
        r.read_exact(&mut vbytes).map_err(|_| parse(&r, "truncated"))?;
        let variant = String::from_utf8(vbytes).map_err(|_| parse(&r, "bad variant string"))?;

        let params = crate::merger::checkpoint_read_params::<R>(&mut r)
            .map_err(|_| parse(&r, "truncated params"))??;
        let mut adams = Vec::new();
        for _ in 0..3 {
            adams.push(read_adam::<R>(&mut r).map_err(|_| parse(&r, "truncated adam"))?);
        }
        let env_u = crate::merger::checkpoint::read_tensor::<R>(&mut r)
            .map_err(|_| parse(&r, "truncated env"))?;
        let env_adam = read_adam::<R>(&mut r).map_err(|_| parse(&r, "truncated env adam"))?;
        let flat_normals = crate::merger::checkpoint::read_tensor::<R>(&mut r)
            .map_err(|_| parse(&r, "truncated normals"))?;
        let normals = flat_normals
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let normal_adam = read_adam::<R>(&mut r).map_err(|_| parse(&r, "truncated normal adam"))?;
        let hlen = r.read_u64::<LittleEndian>().map_err(|_| parse(&r, "truncated"))? as usize;
        let mut history = Vec::with_capacity(hlen);
        for _ in 0..hlen {
            let step = r.read_u64::<LittleEndian>().map_err(|_| parse(&r, "truncated"))? as usize;
            let mut vals = [0.0f64; 6];
            for v in vals.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(|_| parse(&r, "truncated"))?;
            }
            history.push(LossReport {
                step,
                l_image: vals[0],
                l_3dgs: vals[1],
                total: vals[2],
                per_channel: [vals[3], vals[4], vals[5]],
            });
        }
        Ok(TrainCheckpoint {
            step,
            views,
            variant,
            params,
            adams,
            env_u,
            env_adam,
            normals,
            normal_adam,
            history,
        })
    }
}

fn tempfile_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn write_adam<R: Real, W: Write>(w: &mut W, adam: &Adam<R>) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(adam.t)?;
    let (m, v) = adam.moments();
    w.write_u32::<LittleEndian>(m.len() as u32)?;
    for t in m.iter().chain(v.iter()) {
        crate::merger::checkpoint::write_tensor(w, t)?;
    }
    Ok(())
}

fn read_adam<R: Real>(r: &mut Cursor<&[u8]>) -> std::io::Result<Adam<R>> {
    let t = r.read_u64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut m = Vec::with_capacity(count);
    for _ in 0..count {
        m.push(crate::merger::checkpoint::read_tensor::<R>(r)?);
    }
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        v.push(crate::merger::checkpoint::read_tensor::<R>(r)?);
    }
    Ok(Adam::restore(t, m, v))
}
