//! Corruption oracle: turns ground-truth material maps into the kind of
//! view-inconsistent predictions a batched diffusion predictor produces.
//!
//! Views are grouped into batches; each batch draws its own color gain,
//! tone-mapping gamma drift, and an optional spurious metallic offset.
//! Individual views may additionally bake a Lambertian shading term into
//! the basecolor, and per-pixel noise is added everywhere. All outputs are
//! clamped to [0, 1] and deterministic per seed.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::img::Raster;
use crate::scene::MaterialMaps;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CorruptionConfig {
    /// Views per predictor batch.
    pub batch_size: usize,
    /// Log-normal sigma of the per-batch basecolor gain, per channel.
    pub per_batch_gain: f64,
    /// Per-batch gamma drawn from [1 - range, 1 + range] (tone-map drift),
    /// applied to basecolor and roughness.
    pub per_batch_gamma: f64,
    /// Strength of the per-view baked Lambert term on basecolor (0 = off).
    pub baked_shading_strength: f64,
    /// Probability that a view bakes shading in.
    pub baked_shading_prob: f64,
    /// Per-pixel Gaussian noise on every channel.
    pub pixel_noise_sigma: f64,
    /// Probability that a batch receives a metallic offset.
    pub spurious_metallic_prob: f64,
    /// Uniform range of that offset.
    pub metallic_offset: [f64; 2],
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            batch_size: 4,
            per_batch_gain: 0.10,
            per_batch_gamma: 0.20,
            baked_shading_strength: 0.65,
            baked_shading_prob: 0.4,
            pixel_noise_sigma: 0.01,
            spurious_metallic_prob: 0.25,
            metallic_offset: [0.15, 0.45],
        }
    }
}

impl CorruptionConfig {
    /// No-op corruption; outputs equal the ground truth exactly.
    pub fn identity() -> Self {
        CorruptionConfig {
            batch_size: 4,
            per_batch_gain: 0.0,
            per_batch_gamma: 0.0,
            baked_shading_strength: 0.0,
            baked_shading_prob: 0.0,
            pixel_noise_sigma: 0.0,
            spurious_metallic_prob: 0.0,
            metallic_offset: [0.0, 0.0],
        }
    }
}

struct BatchDraw {
    gain: [f64; 3],
    gamma: f64,
    metallic_offset: f64,
}

struct ViewDraw {
    baked: bool,
    light: Vector3<f64>,
}

/// Applies the corruption model to ground-truth maps. `normal_maps` and
/// `alpha_maps` come from the GT G-buffers; only covered pixels are
/// touched. Deterministic per seed.
pub fn oracle_predict(
    gt_maps: &[MaterialMaps],
    normal_maps: &[Raster],
    alpha_maps: &[Raster],
    cfg: &CorruptionConfig,
    seed: u64,
) -> Vec<MaterialMaps> {
    assert_eq!(gt_maps.len(), normal_maps.len());
    assert_eq!(gt_maps.len(), alpha_maps.len());
    let views = gt_maps.len();
    let batch_size = cfg.batch_size.max(1);
    let batches = views.div_ceil(batch_size);

    // All batch draws first, then all view draws, in fixed order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch_draws = Vec::with_capacity(batches);
    for _ in 0..batches {
        let normal = Normal::new(0.0, cfg.per_batch_gain.max(1e-12)).unwrap();
        let gain = if cfg.per_batch_gain > 0.0 {
            [
                normal.sample(&mut rng).exp(),
                normal.sample(&mut rng).exp(),
                normal.sample(&mut rng).exp(),
            ]
        } else {
            [1.0; 3]
        };
        let gamma = if cfg.per_batch_gamma > 0.0 {
            1.0 + rng.random_range(-cfg.per_batch_gamma..cfg.per_batch_gamma)
        } else {
            1.0
        };
        let spurious = rng.random_range(0.0..1.0) < cfg.spurious_metallic_prob;
        let metallic_offset = if spurious {
            rng.random_range(cfg.metallic_offset[0]..=cfg.metallic_offset[1])
        } else {
            0.0
        };
        batch_draws.push(BatchDraw {
            gain,
            gamma,
            metallic_offset,
        });
    }
    let mut view_draws = Vec::with_capacity(views);
    for _ in 0..views {
        let baked = cfg.baked_shading_strength > 0.0
            && rng.random_range(0.0..1.0) < cfg.baked_shading_prob;
        let light = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let light = if light.norm() > 1e-6 {
            light.normalize()
        } else {
            Vector3::y()
        };
        view_draws.push(ViewDraw { baked, light });
    }

    let mut out = Vec::with_capacity(views);
    for v in 0..views {
        let b = &batch_draws[v / batch_size];
        let vd = &view_draws[v];
        let gt = &gt_maps[v];
        let normals = &normal_maps[v];
        let alphas = &alpha_maps[v];
        let npix = gt.roughness.num_pixels();

        // Per-pixel noise gets its own stream per view so the draw order
        // does not depend on earlier views' pixel counts.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        noise_rng.set_stream(v as u64 + 1);
        let noise_dist = Normal::new(0.0, cfg.pixel_noise_sigma.max(1e-12)).unwrap();
        let noise = |rng: &mut ChaCha8Rng| -> f64 {
            if cfg.pixel_noise_sigma > 0.0 {
                noise_dist.sample(rng)
            } else {
                0.0
            }
        };

        let mut maps = gt.clone();
        for p in 0..npix {
            if alphas.data[p] <= crate::raytrace::ALPHA_MASK_THRESHOLD as f32 {
                continue;
            }
            let n = Vector3::new(
                normals.data[p * 3] as f64,
                normals.data[p * 3 + 1] as f64,
                normals.data[p * 3 + 2] as f64,
            );
            let baked_term = if vd.baked {
                let lambert = n.dot(&vd.light).max(0.0);
                (1.0 - cfg.baked_shading_strength) + cfg.baked_shading_strength * lambert
            } else {
                1.0
            };
            for c in 0..3 {
                let gtv = maps.basecolor.data[p * 3 + c] as f64;
                let v = gtv.max(0.0).powf(b.gamma) * b.gain[c] * baked_term + noise(&mut noise_rng);
                maps.basecolor.data[p * 3 + c] = v.clamp(0.0, 1.0) as f32;
            }
            let r = (maps.roughness.data[p] as f64).max(0.0).powf(b.gamma) + noise(&mut noise_rng);
            maps.roughness.data[p] = r.clamp(0.0, 1.0) as f32;
            let m = maps.metallic.data[p] as f64 + b.metallic_offset + noise(&mut noise_rng);
            maps.metallic.data[p] = m.clamp(0.0, 1.0) as f32;
        }
        out.push(maps);
    }
    out
}
