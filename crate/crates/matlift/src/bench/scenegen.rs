//! Deterministic synthetic scenes: Gaussians sampled on sphere and box
//! shells with outward normals, piecewise material regions, cameras on a
//! view sphere, and ground-truth renders through the production path.

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Raster;
use crate::raytrace::{AttributeSource, SceneAccel, TraceParams};
use crate::render;
use crate::scene::{
    Camera, EnvironmentMap, GaussianPrimitive, MaterialMaps, MaterialSample, SceneBundle,
};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MaterialDef {
    pub basecolor: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl MaterialDef {
    pub fn sample(&self) -> MaterialSample {
        MaterialSample::new(self.basecolor, self.roughness, self.metallic)
    }
}

/// How a primitive's material list maps onto its surface.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Only the first material.
    Solid,
    /// Bands by latitude (sphere) or height (box).
    LatitudeBands,
    /// Checker over the surface parameterization.
    Checker,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrimitiveSpec {
    Sphere {
        center: [f64; 3],
        radius: f64,
        pattern: Pattern,
        materials: Vec<MaterialDef>,
    },
    #[serde(rename = "box")]
    Cuboid {
        center: [f64; 3],
        half_extents: [f64; 3],
        pattern: Pattern,
        materials: Vec<MaterialDef>,
    },
}

impl PrimitiveSpec {
    fn surface_area(&self) -> f64 {
        match self {
            PrimitiveSpec::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            PrimitiveSpec::Cuboid { half_extents: h, .. } => {
                8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])
            }
        }
    }

    fn materials(&self) -> &[MaterialDef] {
        match self {
            PrimitiveSpec::Sphere { materials, .. } => materials,
            PrimitiveSpec::Cuboid { materials, .. } => materials,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneSpec {
    pub name: String,
    pub gaussian_count: usize,
    pub train_views: usize,
    pub holdout_views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub camera_radius: f64,
    pub env: EnvPreset,
    pub holdout_envs: Vec<EnvPreset>,
    pub env_width: usize,
    pub env_height: usize,
    pub primitives: Vec<PrimitiveSpec>,
    pub opacity_range: [f64; 2],
    /// Tangent scale as a multiple of the mean sample spacing.
    pub scale_factor: f64,
    /// Normal-axis scale relative to the tangent scale.
    pub thickness: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            name: "banded-sphere".to_string(),
            gaussian_count: 2000,
            train_views: 16,
            holdout_views: 4,
            width: 64,
            height: 64,
            focal: 96.0,
            camera_radius: 3.2,
            env: EnvPreset::Sky,
            holdout_envs: vec![EnvPreset::Sunset, EnvPreset::Studio],
            env_width: 32,
            env_height: 16,
            primitives: vec![PrimitiveSpec::Sphere {
                center: [0.0; 3],
                radius: 1.0,
                pattern: Pattern::LatitudeBands,
                materials: vec![
                    MaterialDef {
                        basecolor: [0.75, 0.24, 0.18],
                        roughness: 0.75,
                        metallic: 0.0,
                    },
                    MaterialDef {
                        basecolor: [0.95, 0.72, 0.33],
                        roughness: 0.3,
                        metallic: 0.9,
                    },
                    MaterialDef {
                        basecolor: [0.16, 0.48, 0.55],
                        roughness: 0.45,
                        metallic: 0.0,
                    },
                ],
            }],
            opacity_range: [0.75, 0.95],
            scale_factor: 0.7,
            thickness: 0.15,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &'static str, message: String| Error::InvalidParameter { name, message };
        if self.gaussian_count < 1 {
            return Err(field("gaussian_count", "must be at least 1".into()));
        }
        if self.train_views < 1 {
            return Err(field("train_views", "must be at least 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(field("width/height", "resolution must be positive".into()));
        }
        if self.primitives.is_empty() {
            return Err(field("primitives", "at least one primitive required".into()));
        }
        for p in &self.primitives {
            if p.materials().is_empty() {
                return Err(field("materials", "each primitive needs a material".into()));
            }
            match p {
                PrimitiveSpec::Sphere { radius, .. } if *radius <= 0.0 => {
                    return Err(field("radius", "sphere radius must be positive".into()));
                }
                PrimitiveSpec::Cuboid { half_extents, .. }
                    if half_extents.iter().any(|&h| h <= 0.0) =>
                {
                    return Err(field("half_extents", "must be positive".into()));
                }
                _ => {}
            }
        }
        if !(self.opacity_range[0] > 0.0
            && self.opacity_range[1] <= 1.0
            && self.opacity_range[0] <= self.opacity_range[1])
        {
            return Err(field("opacity_range", "must satisfy 0 < lo <= hi <= 1".into()));
        }
        if !(self.scale_factor > 0.0 && self.thickness > 0.0) {
            return Err(field("scale_factor/thickness", "must be positive".into()));
        }
        Ok(())
    }
}

/// Per-Gaussian ground truth plus everything evaluation needs.
#[derive(Debug)]
pub struct GroundTruth {
    /// GT material per Gaussian, aligned with the generated bundle.
    pub materials: Vec<MaterialSample>,
    pub holdout_cameras: Vec<Camera>,
    pub holdout_envs: Vec<(String, EnvironmentMap)>,
    /// Uncorrupted per-view material maps (alpha-normalized composites).
    pub gt_maps: Vec<MaterialMaps>,
    /// Per-view composited unit normals (3ch) for the corruption oracle.
    pub normal_maps: Vec<Raster>,
    /// Per-view coverage (1ch).
    pub alpha_maps: Vec<Raster>,
}

#[derive(Debug)]
pub struct SynthScene {
    /// Train bundle: cameras, GT photographs, environment. Gaussians carry
    /// the GT material in the merged slot (clear it before saving a train
    /// scene to disk).
    pub bundle: SceneBundle,
    pub gt: GroundTruth,
}

fn fibonacci_direction(i: usize, n: usize) -> Vector3<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
    let r = (1.0 - y * y).sqrt();
    let phi = golden * i as f64;
    Vector3::new(r * phi.cos(), y, r * phi.sin())
}

fn region_index(pattern: Pattern, n_materials: usize, local: Vector3<f64>, normal: Vector3<f64>) -> usize {
    if n_materials == 1 {
        return 0;
    }
    match pattern {
        Pattern::Solid => 0,
        Pattern::LatitudeBands => {
            let t = (local.normalize().y + 1.0) / 2.0; // 0 at bottom, 1 at top
            (((1.0 - t) * n_materials as f64) as usize).min(n_materials - 1)
        }
        Pattern::Checker => {
            let (u, v) = crate::scene::direction_to_equirect(
                if local.norm() > 1e-9 { local.normalize() } else { normal },
            );
            let iu = (u * 6.0) as usize;
            let iv = (v * 3.0) as usize;
            (iu + iv) % n_materials
        }
    }
}

fn sample_primitive(
    prim: &PrimitiveSpec,
    count: usize,
    spacing: f64,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
    gaussians: &mut Vec<GaussianPrimitive>,
    materials: &mut Vec<MaterialSample>,
) -> Result<()> {
    let tangent = spec.scale_factor * spacing;
    let normal_scale = (spec.thickness * tangent).max(1e-6);
    for i in 0..count {
        let (pos, normal, local) = match prim {
            PrimitiveSpec::Sphere { center, radius, .. } => {
                let mut d = fibonacci_direction(i, count);
                // Small jitter so repeated primitives do not alias.
                let jitter = Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                ) * (spacing * 0.2 / radius);
                d = (d + jitter).normalize();
                let c = Vector3::from(*center);
                (c + d * *radius, d, d * *radius)
            }
            PrimitiveSpec::Cuboid { center, half_extents, .. } => {
                let h = Vector3::from(*half_extents);
                // Pick a face weighted by area, then a uniform point on it.
                let areas = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 0;
                for (fi, a) in areas.iter().enumerate() {
                    if pick < *a {
                        face = fi;
                        break;
                    }
                    pick -= a;
                }
                let (u, v) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                let (local, normal) = match face {
                    0 => (Vector3::new(h.x, u * h.y, v * h.z), Vector3::x()),
                    1 => (Vector3::new(-h.x, u * h.y, v * h.z), -Vector3::x()),
                    2 => (Vector3::new(u * h.x, h.y, v * h.z), Vector3::y()),
                    3 => (Vector3::new(u * h.x, -h.y, v * h.z), -Vector3::y()),
                    4 => (Vector3::new(u * h.x, v * h.y, h.z), Vector3::z()),
                    _ => (Vector3::new(u * h.x, v * h.y, -h.z), -Vector3::z()),
                };
                (Vector3::from(*center) + local, normal, local)
            }
        };

        let rotation = UnitQuaternion::rotation_between(&Vector3::z(), &normal)
            .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        let twist = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(normal),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        let opacity = rng.random_range(spec.opacity_range[0]..=spec.opacity_range[1]);
        let g = GaussianPrimitive::new(
            pos,
            Vector3::new(tangent, tangent, normal_scale),
            twist * rotation,
            opacity,
            normal,
        )?;
        let region = region_index(
            match prim {
                PrimitiveSpec::Sphere { pattern, .. } => *pattern,
                PrimitiveSpec::Cuboid { pattern, .. } => *pattern,
            },
            prim.materials().len(),
            local,
            normal,
        );
        materials.push(prim.materials()[region].sample());
        gaussians.push(g);
    }
    Ok(())
}

/// Generates a full synthetic scene with ground-truth materials, renders
/// the GT photographs and material maps through the production path, and
/// returns held-out cameras and environments for evaluation.
/// Deterministic per (spec, seed).
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Allocate Gaussians to primitives by surface area.
    let total_area: f64 = spec.primitives.iter().map(|p| p.surface_area()).sum();
    let mut gaussians = Vec::with_capacity(spec.gaussian_count);
    let mut materials = Vec::with_capacity(spec.gaussian_count);
    let mut remaining = spec.gaussian_count;
    for (pi, prim) in spec.primitives.iter().enumerate() {
        let count = if pi + 1 == spec.primitives.len() {
            remaining
        } else {
            ((spec.gaussian_count as f64) * prim.surface_area() / total_area).round() as usize
        }
        .min(remaining)
        .max(1);
        remaining -= count.min(remaining);
        let spacing = (prim.surface_area() / count as f64).sqrt();
        sample_primitive(prim, count, spacing, spec, &mut rng, &mut gaussians, &mut materials)?;
    }
    for (g, m) in gaussians.iter_mut().zip(&materials) {
        g.merged_material = Some(*m);
    }

    // Scene centroid for camera aiming.
    let centroid = gaussians.iter().map(|g| g.mean).sum::<Vector3<f64>>() / gaussians.len() as f64;

    let total_views = spec.train_views + spec.holdout_views;
    let holdout_idx: Vec<usize> = (0..spec.holdout_views)
        .map(|j| (j * total_views + total_views / 2) / spec.holdout_views.max(1))
        .map(|i| i.min(total_views - 1))
        .collect();
    let mut train_cams = Vec::new();
    let mut holdout_cams = Vec::new();
    for i in 0..total_views {
        let mut d = fibonacci_direction(i, total_views);
        // Keep cameras off the poles so the up vector stays valid.
        d.y *= 0.8;
        let d = d.normalize();
        let eye = centroid + d * spec.camera_radius;
        let cam = Camera::look_at(
            [spec.focal, spec.focal],
            spec.width,
            spec.height,
            eye,
            centroid,
            Vector3::y(),
        )?;
        if holdout_idx.contains(&i) && holdout_cams.len() < spec.holdout_views {
            holdout_cams.push(cam);
        } else {
            train_cams.push(cam);
        }
    }
    train_cams.truncate(spec.train_views);

    let env = make_env(spec.env, spec.env_width, spec.env_height);
    let holdout_envs: Vec<(String, EnvironmentMap)> = spec
        .holdout_envs
        .iter()
        .map(|&p| (format!("{p:?}").to_lowercase(), make_env(p, spec.env_width, spec.env_height)))
        .collect();

    // GT renders and maps via the production path.
    let params = TraceParams::compositing();
    let accel = SceneAccel::build(&gaussians, params)?;
    let mut images = Vec::with_capacity(train_cams.len());
    let mut gt_maps = Vec::with_capacity(train_cams.len());
    let mut normal_maps = Vec::with_capacity(train_cams.len());
    let mut alpha_maps = Vec::with_capacity(train_cams.len());
    for cam in &train_cams {
        let (image, gb) = render::render_view_with(
            &accel,
            &gaussians,
            cam,
            &env,
            AttributeSource::Merged,
            [0.0; 3],
        )?;
        images.push(image);
        gt_maps.push(render::material_maps_from_gbuffer(&gb));
        let mut nmap = Raster::new(gb.width, gb.height, 3);
        for (p, n) in gb.normal.iter().enumerate() {
            for c in 0..3 {
                nmap.data[p * 3 + c] = n[c] as f32;
            }
        }
        normal_maps.push(nmap);
        alpha_maps.push(gb.scalar_raster(&gb.alpha));
    }

    let bundle = SceneBundle {
        gaussians,
        cameras: train_cams,
        images,
        material_maps: None,
        env,
    };
    bundle.validate()?;

    Ok(SynthScene {
        bundle,
        gt: GroundTruth {
            materials,
            holdout_cameras: holdout_cams,
            holdout_envs,
            gt_maps,
            normal_maps,
            alpha_maps,
        },
    })
}

// ---------------------------------------------------------------------------
// Environment presets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum EnvPreset {
    Uniform,
    Sky,
    Sunset,
    Studio,
}

/// Procedural equirectangular radiance; all presets are deterministic
/// functions of the texel position.
pub fn make_env(preset: EnvPreset, width: usize, height: usize) -> EnvironmentMap {
    let mut texels = Vec::with_capacity(width * height);
    let probe = EnvironmentMap::constant(width, height, [0.0; 3]);
    for row in 0..height {
        for col in 0..width {
            let dir = probe.texel_direction(row, col);
            let y = dir.y; // +1 zenith, -1 nadir
            let texel: [f32; 3] = match preset {
                EnvPreset::Uniform => [0.5, 0.5, 0.5],
                EnvPreset::Sky => {
                    let sun_dir = Vector3::new(0.45, 0.72, -0.52).normalize();
                    let sky_t = ((y + 0.1) / 1.1).clamp(0.0, 1.0);
                    let base = [
                        0.22 + 0.38 * sky_t,
                        0.20 + 0.46 * sky_t,
                        0.18 + 0.66 * sky_t,
                    ];
                    let cos = dir.dot(&sun_dir).max(0.0);
                    let sun = (cos - 0.965).max(0.0) / 0.035;
                    let sun = sun * sun * 4.0;
                    [
                        (base[0] + sun * 1.0) as f32,
                        (base[1] + sun * 0.9) as f32,
                        (base[2] + sun * 0.7) as f32,
                    ]
                }
                EnvPreset::Sunset => {
                    let sun_dir = Vector3::new(-0.85, 0.12, 0.51).normalize();
                    let sky_t = ((y + 0.1) / 1.1).clamp(0.0, 1.0);
                    let base = [
                        0.30 + 0.12 * (1.0 - sky_t),
                        0.12 + 0.10 * sky_t,
                        0.16 + 0.22 * sky_t,
                    ];
                    let cos = dir.dot(&sun_dir).max(0.0);
                    let glow = cos.powi(8) * 0.8;
                    let sun = (cos - 0.94).max(0.0) / 0.06;
                    let sun = sun * sun * 5.0;
                    [
                        (base[0] + glow + sun * 1.0) as f32,
                        (base[1] + glow * 0.55 + sun * 0.55) as f32,
                        (base[2] + glow * 0.25 + sun * 0.28) as f32,
                    ]
                }
                EnvPreset::Studio => {
                    let key = Vector3::new(0.6, 0.55, 0.58).normalize();
                    let fill = Vector3::new(-0.7, 0.25, -0.66).normalize();
                    let rim = Vector3::new(0.1, 0.35, -0.93).normalize();
                    let patch = |light: Vector3<f64>, size: f64, power: f64| {
                        if dir.dot(&light) > 1.0 - size {
                            power
                        } else {
                            0.0
                        }
                    };
                    let v = 0.04
                        + patch(key, 0.10, 2.2)
                        + patch(fill, 0.14, 0.9)
                        + patch(rim, 0.06, 1.6);
                    [v as f32, (v * 0.98) as f32, (v * 0.94) as f32]
                }
            };
            texels.push(texel);
        }
    }
    EnvironmentMap::new(width, height, texels).expect("presets are nonnegative")
}
