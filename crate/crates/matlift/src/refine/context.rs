//! Precomputed training context: with geometry and opacity fixed, the
//! per-view compositing weights, G-buffer geometry channels, merger input
//! matrices and loss targets are all built once; every training step then
//! reduces to dense MLP algebra plus a sparse re-composite of the five
//! material channels.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::merger::{ChannelMerger, MaterialChannel, MergerHead, MergerParams};
use crate::raytrace::{self, CompositeHit, SceneAccel, TraceParams};
use crate::real::Real;
use crate::scene::{MaterialSample, SceneBundle, MATERIAL_CHANNELS};
use crate::shading::EnvTable;

use super::RefineConfig;

/// Merger inputs for one channel over a set of Gaussians.
pub struct ChannelData<R> {
    pub x: Array2<R>,
    pub values: Array2<R>,
    pub seen: Array2<R>,
}

/// Everything one view contributes to a training step.
pub struct ViewData<R> {
    pub width: usize,
    pub height: usize,
    /// Global Gaussian ids visible in this view, ascending; rows of the
    /// channel matrices correspond to this list.
    pub visible: Vec<u32>,
    /// CSR per-pixel blend lists as (local index into `visible`, weight).
    pub offsets: Vec<u32>,
    pub entries: Vec<(u32, R)>,
    pub alpha: Vec<R>,
    pub masked_pixels: Vec<u32>,
    /// Composited unit normals (zero outside the mask).
    pub normal: Vec<[R; 3]>,
    /// Unit surface-to-eye direction per pixel.
    pub view_dir: Vec<[R; 3]>,
    /// Predictor material maps as channel planes (loss targets).
    pub target: [Vec<R>; MATERIAL_CHANNELS],
    /// Ground-truth photograph.
    pub gt: ImageBuf<R>,
    pub channels: [ChannelData<R>; 3],
}

impl<R: Real> ViewData<R> {
    #[inline]
    pub fn pixel_hits(&self, p: usize) -> &[(u32, R)] {
        &self.entries[self.offsets[p] as usize..self.offsets[p + 1] as usize]
    }
}

pub struct TrainContext<R> {
    pub views: Vec<ViewData<R>>,
    /// View indices feeding the merger input slots (all views unless the
    /// scene exceeds `max_views`).
    pub merger_views: Vec<u32>,
    /// Channel matrices over all Gaussians, for the final write-back.
    pub global: [ChannelData<R>; 3],
    pub gaussian_count: usize,
    pub background: [R; 3],
    /// Geometry half of the optimizable environment (radiance zeroed).
    pub env_layout: EnvTable<R>,
    /// Initial per-Gaussian normals for optional normal refinement.
    pub normals: Vec<[R; 3]>,
}

fn material_channel_value(m: &MaterialSample, ch: usize) -> f64 {
    m.channel(ch)
}

fn build_channel_data<R: Real>(
    merger: &ChannelMerger<R>,
    scene: &SceneBundle,
    merger_views: &[u32],
    rows: &[u32],
    positions: &[[f64; 3]],
) -> ChannelData<R> {
    let dims = merger.channel.dims();
    let vsub = merger_views.len();
    let n = rows.len();
    let mut x = Array2::zeros((n, merger.input_dim()));
    let mut values = Array2::zeros((n, vsub * dims));
    let mut seen = Array2::zeros((n, vsub));
    let ch_base = match merger.channel {
        MaterialChannel::Basecolor => 0,
        MaterialChannel::Roughness => 3,
        MaterialChannel::Metallic => 4,
    };
    for (r, &gid) in rows.iter().enumerate() {
        let g = &scene.gaussians[gid as usize];
        let pv = g.per_view_materials.as_ref().expect("lifted scene");
        let mut vals = vec![0.0; vsub * dims];
        let mut mask = vec![false; vsub];
        let mut any = false;
        for (j, &view) in merger_views.iter().enumerate() {
            let view = view as usize;
            for k in 0..dims {
                vals[j * dims + k] = material_channel_value(&pv.samples[view], ch_base + k);
            }
            mask[j] = pv.seen[view];
            any |= mask[j];
        }
        if !any {
            // Visible only through views outside the merger subset: the
            // slots all carry the median fill, so weight them uniformly.
            mask.fill(true);
        }
        let row = merger.build_input(positions[gid as usize], &vals, &mask);
        for (c, v) in row.into_iter().enumerate() {
            x[(r, c)] = v;
        }
        for (c, v) in vals.iter().enumerate() {
            values[(r, c)] = R::of(*v);
        }
        for (c, m) in mask.iter().enumerate() {
            seen[(r, c)] = if *m { R::one() } else { R::zero() };
        }
    }
    ChannelData { x, values, seen }
}

impl<R: Real> TrainContext<R> {
    pub fn build(scene: &SceneBundle, cfg: &RefineConfig) -> Result<Self> {
        scene.validate()?;
        if scene.gaussians.is_empty() {
            return Err(Error::validation("cannot refine an empty scene"));
        }
        if scene
            .gaussians
            .iter()
            .any(|g| g.per_view_materials.is_none())
        {
            return Err(Error::validation(
                "scene is not lifted: per-view materials missing",
            ));
        }
        let maps = scene
            .material_maps
            .as_ref()
            .ok_or_else(|| Error::validation("scene has no predictor material maps"))?;

        let v_total = scene.views();
        let merger_views: Vec<u32> = if v_total <= cfg.max_views {
            (0..v_total as u32).collect()
        } else {
            // Deterministic uniform stride keeps pose coverage broad.
            (0..cfg.max_views)
                .map(|i| ((i * v_total) / cfg.max_views) as u32)
                .collect()
        };

        let (lo, hi) = scene.mean_bounds();
        let positions: Vec<[f64; 3]> = scene
            .gaussians
            .iter()
            .map(|g| {
                crate::merger::normalize_position(
                    [g.mean.x, g.mean.y, g.mean.z],
                    [lo.x, lo.y, lo.z],
                    [hi.x, hi.y, hi.z],
                )
            })
            .collect();

        // Reference mergers define the input layout (head is irrelevant
        // for inputs).
        let layout: MergerParams<R> = crate::merger::init_params(
            0,
            merger_views.len(),
            MergerHead::Softmax,
            cfg.pe_levels,
        );

        let trace = TraceParams {
            hit_threshold: cfg.hit_threshold,
            falloff: cfg.falloff,
        };
        let accel = SceneAccel::build(&scene.gaussians, trace)?;

        let mut views = Vec::with_capacity(v_total);
        for (vi, camera) in scene.cameras.iter().enumerate() {
            let cache = raytrace::composite_cache_for(&accel, &scene.gaussians, camera);
            let npix = cache.width * cache.height;

            let mut visible: Vec<u32> = cache.visible_gaussians();
            visible.sort_unstable();
            let mut local_of = vec![u32::MAX; scene.gaussians.len()];
            for (i, &gid) in visible.iter().enumerate() {
                local_of[gid as usize] = i as u32;
            }

            let mut offsets = Vec::with_capacity(npix + 1);
            let mut entries = Vec::new();
            let mut alpha = vec![R::zero(); npix];
            let mut normal = vec![[R::zero(); 3]; npix];
            let mut masked_pixels = Vec::new();
            offsets.push(0u32);
            for p in 0..npix {
                let mut a = 0.0;
                let mut nacc = nalgebra::Vector3::<f64>::zeros();
                for &CompositeHit { gaussian, weight, .. } in cache.pixel(p) {
                    entries.push((local_of[gaussian as usize], R::of(weight)));
                    a += weight;
                    nacc += scene.gaussians[gaussian as usize].normal * weight;
                }
                offsets.push(entries.len() as u32);
                alpha[p] = R::of(a);
                if a > raytrace::ALPHA_MASK_THRESHOLD {
                    masked_pixels.push(p as u32);
                    if nacc.norm() > 1e-12 {
                        let n = nacc.normalize();
                        normal[p] = [R::of(n.x), R::of(n.y), R::of(n.z)];
                    }
                }
            }

            let mut view_dir = Vec::with_capacity(npix);
            for y in 0..cache.height {
                for x in 0..cache.width {
                    let ray = camera.center_ray(x, y);
                    view_dir.push([
                        R::of(-ray.direction.x),
                        R::of(-ray.direction.y),
                        R::of(-ray.direction.z),
                    ]);
                }
            }

            let m = &maps[vi];
            let target: [Vec<R>; MATERIAL_CHANNELS] = [
                m.basecolor.data.iter().step_by(3).map(|&v| R::of(v as f64)).collect(),
                m.basecolor.data[1..].iter().step_by(3).map(|&v| R::of(v as f64)).collect(),
                m.basecolor.data[2..].iter().step_by(3).map(|&v| R::of(v as f64)).collect(),
                m.roughness.data.iter().map(|&v| R::of(v as f64)).collect(),
                m.metallic.data.iter().map(|&v| R::of(v as f64)).collect(),
            ];

            let gt = scene.images[vi].cast::<R>();

            let channels = [
                build_channel_data(&layout.basecolor, scene, &merger_views, &visible, &positions),
                build_channel_data(&layout.roughness, scene, &merger_views, &visible, &positions),
                build_channel_data(&layout.metallic, scene, &merger_views, &visible, &positions),
            ];

            views.push(ViewData {
                width: cache.width,
                height: cache.height,
                visible,
                offsets,
                entries,
                alpha,
                masked_pixels,
                normal,
                view_dir,
                target,
                gt,
                channels,
            });
        }

        let all_rows: Vec<u32> = (0..scene.gaussians.len() as u32).collect();
        let global = [
            build_channel_data(&layout.basecolor, scene, &merger_views, &all_rows, &positions),
            build_channel_data(&layout.roughness, scene, &merger_views, &all_rows, &positions),
            build_channel_data(&layout.metallic, scene, &merger_views, &all_rows, &positions),
        ];

        let normals = scene
            .gaussians
            .iter()
            .map(|g| [R::of(g.normal.x), R::of(g.normal.y), R::of(g.normal.z)])
            .collect();

        Ok(TrainContext {
            views,
            merger_views,
            global,
            gaussian_count: scene.gaussians.len(),
            background: [
                R::of(cfg.background[0]),
                R::of(cfg.background[1]),
                R::of(cfg.background[2]),
            ],
            env_layout: EnvTable::layout(cfg.env_width, cfg.env_height),
            normals,
        })
    }
}

/// Optimizable environment state: texels are parameterized through softplus
/// so the radiance stays nonnegative no matter what the optimizer does.
pub struct EnvState<R> {
    pub u: Vec<R>,
    pub table: EnvTable<R>,
}

pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

impl<R: Real> EnvState<R> {
    pub fn new(layout: &EnvTable<R>, init_radiance: f64) -> Self {
        let u0 = R::of(softplus_inv(init_radiance.max(1e-6)));
        EnvState {
            u: vec![u0; layout.texel_count() * 3],
            table: layout.clone(),
        }
    }

    /// Applies softplus(u) into the table's radiance.
    pub fn sync(&mut self) {
        for t in 0..self.table.texel_count() {
            for c in 0..3 {
                self.table.rad[c][t] = R::of(softplus(self.u[t * 3 + c].as_f64()));
            }
        }
    }

    /// Chains d(loss)/d(radiance) through the softplus.
    pub fn chain_to_u(&self, grad_radiance: &[[R; 3]]) -> Vec<R> {
        let mut out = vec![R::zero(); self.u.len()];
        for (t, g) in grad_radiance.iter().enumerate() {
            for c in 0..3 {
                out[t * 3 + c] = g[c] * R::of(sigmoid(self.u[t * 3 + c].as_f64()));
            }
        }
        out
    }

    pub fn env_map(&self) -> crate::scene::EnvironmentMap {
        self.table.to_env()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_roundtrip_and_positivity() {
        for y in [1e-4, 0.1, 0.5, 1.0, 5.0, 40.0] {
            let u = softplus_inv(y);
            assert!((softplus(u) - y).abs() < 1e-9 * y.max(1.0));
        }
        for u in [-50.0, -3.0, 0.0, 2.0, 50.0] {
            assert!(softplus(u) >= 0.0);
        }
    }
}
