//! Shared domain types: Gaussians, cameras, materials, environment maps,
//! rays, and the scene bundle that ties them together, plus the geometric
//! utilities (covariance construction, equirectangular mapping) everything
//! else builds on.

pub mod io;

pub use io::{load_scene, save_scene, ScenePaths};

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::img::Raster;

/// One scalar sample of the PBR material channels, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaterialSample {
    pub basecolor: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

/// Number of scalar material channels (basecolor RGB + roughness + metallic).
pub const MATERIAL_CHANNELS: usize = 5;

impl MaterialSample {
    pub fn new(basecolor: [f64; 3], roughness: f64, metallic: f64) -> Self {
        MaterialSample {
            basecolor: basecolor.map(|v| v.clamp(0.0, 1.0)),
            roughness: roughness.clamp(0.0, 1.0),
            metallic: metallic.clamp(0.0, 1.0),
        }
    }

    #[inline]
    pub fn channel(&self, i: usize) -> f64 {
        match i {
            0 | 1 | 2 => self.basecolor[i],
            3 => self.roughness,
            4 => self.metallic,
            _ => panic!("material channel {i} out of range"),
        }
    }

    #[inline]
    pub fn set_channel(&mut self, i: usize, v: f64) {
        match i {
            0 | 1 | 2 => self.basecolor[i] = v,
            3 => self.roughness = v,
            4 => self.metallic = v,
            _ => panic!("material channel {i} out of range"),
        }
    }

    pub fn from_channels(ch: [f64; MATERIAL_CHANNELS]) -> Self {
        MaterialSample::new([ch[0], ch[1], ch[2]], ch[3], ch[4])
    }
}

/// Per-view lifted material estimates for one Gaussian; `seen[v]` marks
/// whether the Gaussian was intersected in view `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerViewMaterials {
    pub samples: Vec<MaterialSample>,
    pub seen: Vec<bool>,
}

impl PerViewMaterials {
    pub fn views(&self) -> usize {
        self.samples.len()
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|&&s| s).count()
    }
}

/// Anisotropic 3D Gaussian with opacity, normal, and material attributes.
///
/// The covariance is stored implicitly as (scale, rotation); the matrix and
/// its inverse are materialized lazily because the inverse appears in every
/// ray query.
#[derive(Debug)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub opacity: f64,
    pub normal: Vector3<f64>,
    pub per_view_materials: Option<PerViewMaterials>,
    pub merged_material: Option<MaterialSample>,
    cov: OnceLock<(Matrix3<f64>, Matrix3<f64>)>,
}

impl Clone for GaussianPrimitive {
    fn clone(&self) -> Self {
        GaussianPrimitive {
            mean: self.mean,
            scale: self.scale,
            rotation: self.rotation,
            opacity: self.opacity,
            normal: self.normal,
            per_view_materials: self.per_view_materials.clone(),
            merged_material: self.merged_material,
            cov: OnceLock::new(),
        }
    }
}

impl PartialEq for GaussianPrimitive {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean
            && self.scale == other.scale
            && self.rotation == other.rotation
            && self.opacity == other.opacity
            && self.normal == other.normal
            && self.per_view_materials == other.per_view_materials
            && self.merged_material == other.merged_material
    }
}

impl GaussianPrimitive {
    pub fn new(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        opacity: f64,
        normal: Vector3<f64>,
    ) -> Result<Self> {
        if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
            return Err(Error::InvalidParameter {
                name: "scale",
                message: format!("components must be positive, got {:?}", scale),
            });
        }
        if !(opacity > 0.0 && opacity <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "opacity",
                message: format!("must be in (0, 1], got {opacity}"),
            });
        }
        if (normal.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter {
                name: "normal",
                message: format!("must be unit length, |n| = {}", normal.norm()),
            });
        }
        Ok(GaussianPrimitive {
            mean,
            scale,
            rotation,
            opacity,
            normal,
            per_view_materials: None,
            merged_material: None,
            cov: OnceLock::new(),
        })
    }

    fn cov_pair(&self) -> Result<&(Matrix3<f64>, Matrix3<f64>)> {
        // OnceLock::get_or_init cannot report errors, so degeneracy is
        // detected by storing NaNs and checking on access.
        let pair = self.cov.get_or_init(|| {
            let sigma = match covariance_from_scale_rotation(self.scale, self.rotation) {
                Ok(s) => s,
                Err(_) => return (Matrix3::from_element(f64::NAN), Matrix3::from_element(f64::NAN)),
            };
            match sigma.try_inverse() {
                // Symmetrize away LU rounding so downstream symmetric-packed
                // evaluations agree bit-for-bit with full-matrix ones.
                Some(inv) if inv.iter().all(|v| v.is_finite()) => {
                    (sigma, (inv + inv.transpose()) * 0.5)
                }
                _ => (sigma, Matrix3::from_element(f64::NAN)),
            }
        });
        if pair.1.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(format!(
                "covariance not invertible for scale {:?}",
                self.scale
            )));
        }
        Ok(pair)
    }

    pub fn covariance(&self) -> Result<Matrix3<f64>> {
        Ok(self.cov_pair()?.0)
    }

    pub fn covariance_inverse(&self) -> Result<&Matrix3<f64>> {
        Ok(&self.cov_pair()?.1)
    }
}

/// Pinhole camera: intrinsics in pixels plus a rigid world-from-camera pose.
/// Camera space is x-right, y-down, z-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: u32,
    pub height: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Camera {
    pub fn new(
        focal: [f64; 2],
        principal_point: [f64; 2],
        width: u32,
        height: u32,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(focal[0] > 0.0 && focal[1] > 0.0) {
            return Err(Error::InvalidParameter {
                name: "focal",
                message: format!("must be positive, got {focal:?}"),
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidParameter {
                name: "resolution",
                message: "width and height must be positive".into(),
            });
        }
        if !(principal_point[0] >= 0.0
            && principal_point[0] <= width as f64
            && principal_point[1] >= 0.0
            && principal_point[1] <= height as f64)
        {
            return Err(Error::InvalidParameter {
                name: "principal_point",
                message: format!("{principal_point:?} outside image bounds"),
            });
        }
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).norm() > 1e-6 {
            return Err(Error::InvalidParameter {
                name: "rotation",
                message: "rotation part is not orthonormal".into(),
            });
        }
        Ok(Camera {
            focal,
            principal_point,
            width,
            height,
            rotation,
            translation,
        })
    }

    /// Camera that sits at `eye` and looks at `target` with the given up hint.
    pub fn look_at(
        focal: [f64; 2],
        width: u32,
        height: u32,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Camera::new(
            focal,
            [width as f64 / 2.0, height as f64 / 2.0],
            width,
            height,
            rotation,
            eye,
        )
    }

    /// Ray through pixel `(px, py)` at subpixel offset `(ox, oy)` in `[0,1)²`.
    pub fn ray(&self, px: usize, py: usize, ox: f64, oy: f64) -> Ray {
        let x = (px as f64 + ox - self.principal_point[0]) / self.focal[0];
        let y = (py as f64 + oy - self.principal_point[1]) / self.focal[1];
        let dir_cam = Vector3::new(x, y, 1.0);
        let dir = (self.rotation * dir_cam).normalize();
        Ray {
            origin: self.translation,
            direction: dir,
        }
    }

    /// Ray through the pixel center.
    pub fn center_ray(&self, px: usize, py: usize) -> Ray {
        self.ray(px, py, 0.5, 0.5)
    }

    pub fn position(&self) -> Vector3<f64> {
        self.translation
    }
}

/// Equirectangular grid of nonnegative linear radiance; the optimizable light.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB texels, row 0 at the +y pole (v = 0).
    pub texels: Vec<[f32; 3]>,
}

impl EnvironmentMap {
    pub fn new(width: usize, height: usize, texels: Vec<[f32; 3]>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(Error::validation(format!(
                "environment map must be at least 2x2, got {width}x{height}"
            )));
        }
        if texels.len() != width * height {
            return Err(Error::validation("environment texel count mismatch"));
        }
        if texels.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::validation(
                "environment radiance must be nonnegative and finite",
            ));
        }
        Ok(EnvironmentMap {
            width,
            height,
            texels,
        })
    }

    pub fn constant(width: usize, height: usize, value: [f32; 3]) -> Self {
        EnvironmentMap::new(width, height, vec![value; width * height]).expect("valid constant map")
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> [f32; 3] {
        self.texels[row * self.width + col]
    }

    /// Direction of the texel center at (row, col).
    pub fn texel_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        let u = (col as f64 + 0.5) / self.width as f64;
        let v = (row as f64 + 0.5) / self.height as f64;
        equirect_to_direction(u, v)
    }

    /// Solid angle subtended by texels in `row`: (2π/W)(π/H)·sin θ.
    pub fn texel_solid_angle(&self, row: usize) -> f64 {
        let theta = (row as f64 + 0.5) / self.height as f64 * PI;
        (2.0 * PI / self.width as f64) * (PI / self.height as f64) * theta.sin()
    }

    /// Nearest-texel lookup for a unit direction.
    pub fn sample_nearest(&self, dir: Vector3<f64>) -> [f32; 3] {
        let (u, v) = direction_to_equirect(dir);
        let col = ((u * self.width as f64) as usize).min(self.width - 1);
        let row = ((v * self.height as f64) as usize).min(self.height - 1);
        self.at(row, col)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.texels.iter().flatten().copied().collect(),
        }
    }

    pub fn from_raster(raster: &Raster) -> Result<Self> {
        if raster.channels != 3 {
            return Err(Error::validation("environment raster must have 3 channels"));
        }
        let texels = raster
            .data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        EnvironmentMap::new(raster.width, raster.height, texels)
    }
}

/// Ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes the direction; lengths other than 1 are accepted and
    /// rescaled, zero directions are rejected.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidParameter {
                name: "direction",
                message: "ray direction must be nonzero and finite".into(),
            });
        }
        Ok(Ray {
            origin,
            direction: direction / n,
        })
    }
}

/// Per-view triple of material maps as decoded from the predictor PNGs.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMaps {
    pub basecolor: Raster,
    pub roughness: Raster,
    pub metallic: Raster,
}

impl MaterialMaps {
    pub fn sample(&self, x: usize, y: usize) -> MaterialSample {
        MaterialSample::new(
            [
                self.basecolor.get(x, y, 0) as f64,
                self.basecolor.get(x, y, 1) as f64,
                self.basecolor.get(x, y, 2) as f64,
            ],
            self.roughness.get(x, y, 0) as f64,
            self.metallic.get(x, y, 0) as f64,
        )
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.basecolor.width, self.basecolor.height)
    }
}

/// Complete multi-view scene: geometry, cameras, photographs, optional
/// per-view material maps, and the environment light.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub gaussians: Vec<GaussianPrimitive>,
    pub cameras: Vec<Camera>,
    pub images: Vec<Raster>,
    pub material_maps: Option<Vec<MaterialMaps>>,
    pub env: EnvironmentMap,
}

impl SceneBundle {
    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::validation("scene must have at least one camera"));
        }
        if self.images.len() != self.cameras.len() {
            return Err(Error::validation(format!(
                "{} images for {} cameras",
                self.images.len(),
                self.cameras.len()
            )));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if img.width != cam.width as usize || img.height != cam.height as usize {
                return Err(Error::validation(format!(
                    "image {i} is {}x{} but camera {i} is {}x{}",
                    img.width, img.height, cam.width, cam.height
                )));
            }
        }
        if let Some(maps) = &self.material_maps {
            if maps.len() != self.cameras.len() {
                return Err(Error::validation(format!(
                    "{} material map sets for {} cameras",
                    maps.len(),
                    self.cameras.len()
                )));
            }
            for (i, (cam, m)) in self.cameras.iter().zip(maps).enumerate() {
                let (w, h) = m.resolution();
                if w != cam.width as usize
                    || h != cam.height as usize
                    || !m.roughness.same_shape(&m.metallic)
                    || m.roughness.width != w
                    || m.roughness.height != h
                {
                    return Err(Error::validation(format!(
                        "material maps {i} do not match camera resolution"
                    )));
                }
            }
        }
        for (i, g) in self.gaussians.iter().enumerate() {
            if let Some(pv) = &g.per_view_materials {
                if pv.views() != self.cameras.len() || pv.seen.len() != self.cameras.len() {
                    return Err(Error::validation(format!(
                        "gaussian {i} has {} per-view slots for {} views",
                        pv.views(),
                        self.cameras.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Axis-aligned bounding box of the Gaussian means.
    pub fn mean_bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.mean);
            hi = hi.sup(&g.mean);
        }
        (lo, hi)
    }
}

// ---------------------------------------------------------------------------
// Geometry utilities
// ---------------------------------------------------------------------------

/// Σ = R·diag(scale²)·Rᵀ. Symmetric positive definite for positive scales.
pub fn covariance_from_scale_rotation(
    scale: Vector3<f64>,
    rotation: UnitQuaternion<f64>,
) -> Result<Matrix3<f64>> {
    if !(scale.x > 0.0 && scale.y > 0.0 && scale.z > 0.0) {
        return Err(Error::InvalidParameter {
            name: "scale",
            message: format!("components must be positive, got {scale:?}"),
        });
    }
    if rotation.as_ref().coords.norm() == 0.0 || !rotation.as_ref().coords.norm().is_finite() {
        return Err(Error::InvalidParameter {
            name: "rotation",
            message: "quaternion must be nonzero".into(),
        });
    }
    let r = rotation.to_rotation_matrix();
    let s2 = Matrix3::from_diagonal(&scale.component_mul(&scale));
    let m = r.matrix() * s2 * r.matrix().transpose();
    // Symmetrize away rounding asymmetry.
    Ok((m + m.transpose()) * 0.5)
}

/// Unit direction -> equirectangular (u, v) in [0,1)².
///
/// u wraps azimuth with u=0.5 at -z; v is the polar angle from +y over π.
pub fn direction_to_equirect(dir: Vector3<f64>) -> (f64, f64) {
    let u = (dir.x.atan2(-dir.z) / (2.0 * PI) + 0.5).rem_euclid(1.0);
    let v = dir.y.clamp(-1.0, 1.0).acos() / PI;
    (u, v)
}

/// Inverse of [`direction_to_equirect`].
pub fn equirect_to_direction(u: f64, v: f64) -> Vector3<f64> {
    let theta = v * PI;
    let phi = (u - 0.5) * 2.0 * PI;
    let st = theta.sin();
    Vector3::new(st * phi.sin(), theta.cos(), -st * phi.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn covariance_identity_case() {
        let sigma = covariance_from_scale_rotation(
            Vector3::new(1.0, 1.0, 1.0),
            UnitQuaternion::identity(),
        )
        .unwrap();
        assert!((sigma - Matrix3::identity()).norm() < 1e-15);
    }

    #[test]
    fn covariance_axis_aligned_squares_scale() {
        let sigma = covariance_from_scale_rotation(
            Vector3::new(2.0, 1.0, 1.0),
            UnitQuaternion::identity(),
        )
        .unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((sigma - expected).norm() < 1e-12);
    }

    #[test]
    fn covariance_rotated_90_about_z() {
        // R·S²·Rᵀ with a 90° z-rotation moves the 4 from x onto y.
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let sigma = covariance_from_scale_rotation(Vector3::new(2.0, 1.0, 1.0), rot).unwrap();
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((sigma - expected).norm() < 1e-12, "got {sigma}");
    }

    #[test]
    fn covariance_rejects_nonpositive_scale() {
        assert!(covariance_from_scale_rotation(
            Vector3::new(0.0, 1.0, 1.0),
            UnitQuaternion::identity()
        )
        .is_err());
        assert!(covariance_from_scale_rotation(
            Vector3::new(-1.0, 1.0, 1.0),
            UnitQuaternion::identity()
        )
        .is_err());
    }

    #[test]
    fn equirect_poles() {
        let (_, v) = direction_to_equirect(Vector3::new(0.0, 1.0, 0.0));
        assert!(v.abs() < 1e-12);
        let (_, v) = direction_to_equirect(Vector3::new(0.0, -1.0, 0.0));
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equirect_minus_z_maps_to_center() {
        let (u, v) = direction_to_equirect(Vector3::new(0.0, 0.0, -1.0));
        assert!((u - 0.5).abs() < 1e-12);
        assert!((v - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn equirect_roundtrip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-3);
            let d = v.normalize();
            let (u, vv) = direction_to_equirect(d);
            let back = equirect_to_direction(u, vv);
            prop_assert!((back - d).norm() < 1e-6);
        }

        #[test]
        fn covariance_is_spd(
            sx in 0.01f64..10.0, sy in 0.01f64..10.0, sz in 0.01f64..10.0,
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..6.28,
        ) {
            let axis = Vector3::new(ax, ay, az);
            prop_assume!(axis.norm() > 1e-3);
            let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let sigma = covariance_from_scale_rotation(Vector3::new(sx, sy, sz), rot).unwrap();
            // SPD check via Cholesky.
            prop_assert!(nalgebra::Cholesky::new(sigma).is_some());
            prop_assert!((sigma - sigma.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let rot = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::new(1.0, 2.0, -0.5)),
            0.83,
        );
        let scale = Vector3::new(0.5, 2.0, 3.0);
        let sigma = covariance_from_scale_rotation(scale, rot).unwrap();
        let mut eig: Vec<f64> = sigma.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect: Vec<f64> = scale.iter().map(|s| s * s).collect();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (e, x) in eig.iter().zip(&expect) {
            assert!((e - x).abs() < 1e-9, "{e} vs {x}");
        }
    }

    #[test]
    fn gaussian_rejects_bad_parameters() {
        let ok = GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 1.0),
            UnitQuaternion::identity(),
            0.5,
            Vector3::new(0.0, 0.0, 1.0),
        );
        assert!(ok.is_ok());
        assert!(GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, -1.0, 1.0),
            UnitQuaternion::identity(),
            0.5,
            Vector3::new(0.0, 0.0, 1.0),
        )
        .is_err());
        assert!(GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 1.0),
            UnitQuaternion::identity(),
            0.0,
            Vector3::new(0.0, 0.0, 1.0),
        )
        .is_err());
        assert!(GaussianPrimitive::new(
            Vector3::zeros(),
            Vector3::new(1.0, 1.0, 1.0),
            UnitQuaternion::identity(),
            0.5,
            Vector3::new(0.0, 0.0, 2.0),
        )
        .is_err());
    }

    #[test]
    fn ray_normalizes_direction() {
        let r = Ray::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert!((r.direction.norm() - 1.0).abs() < 1e-12);
        assert!(Ray::new(Vector3::zeros(), Vector3::zeros()).is_err());
    }

    #[test]
    fn camera_checks_invariants() {
        assert!(Camera::new(
            [0.0, 50.0],
            [8.0, 8.0],
            16,
            16,
            Matrix3::identity(),
            Vector3::zeros()
        )
        .is_err());
        let skew = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(
            Camera::new([50.0, 50.0], [8.0, 8.0], 16, 16, skew, Vector3::zeros()).is_err()
        );
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let cam = Camera::look_at(
            [100.0, 100.0],
            64,
            64,
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap();
        // The principal axis passes through pixel coordinate (32, 32).
        let ray = cam.ray(32, 32, 0.0, 0.0);
        let closest = ray.origin + ray.direction * (-ray.origin).dot(&ray.direction);
        assert!(closest.norm() < 1e-9);
    }

    #[test]
    fn environment_map_rejects_negative_radiance() {
        assert!(EnvironmentMap::new(4, 2, vec![[-0.1, 0.0, 0.0]; 8]).is_err());
        assert!(EnvironmentMap::new(1, 2, vec![[0.0; 3]; 2]).is_err());
    }

    #[test]
    fn texel_directions_roundtrip_through_equirect() {
        let env = EnvironmentMap::constant(32, 16, [1.0; 3]);
        for row in 0..16 {
            for col in 0..32 {
                let d = env.texel_direction(row, col);
                let (u, v) = direction_to_equirect(d);
                assert!((u * 32.0 - (col as f64 + 0.5)).abs() < 1e-9);
                assert!((v * 16.0 - (row as f64 + 0.5)).abs() < 1e-9);
            }
        }
    }
}
