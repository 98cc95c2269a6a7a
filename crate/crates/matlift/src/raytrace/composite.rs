//! Alpha-composited G-buffer rendering with a reusable compositing cache.
//!
//! Per pixel, hits along the center ray are blended front to back with
//! weights w_k = alpha_k * prod_{j<k} (1 - alpha_j), truncated once the
//! transmittance falls below 0.001. The cache stores the (gaussian, weight,
//! tau) triples and stays valid while geometry and opacity are unchanged, so
//! re-compositing new attributes is a sparse linear map.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::img::Raster;
use crate::scene::{Camera, GaussianPrimitive, MaterialSample};

use super::{SceneAccel, TraceParams, TraceScratch};

pub const TRANSMITTANCE_CUTOFF: f64 = 0.001;
/// Alpha below which a pixel is treated as background.
pub const ALPHA_MASK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeHit {
    pub gaussian: u32,
    pub weight: f64,
    pub tau: f64,
}

/// Per-view, per-pixel ordered blend lists in CSR layout.
#[derive(Debug, Clone)]
pub struct CompositingCache {
    pub width: usize,
    pub height: usize,
    offsets: Vec<u32>,
    entries: Vec<CompositeHit>,
}

impl CompositingCache {
    #[inline]
    pub fn pixel(&self, index: usize) -> &[CompositeHit] {
        &self.entries[self.offsets[index] as usize..self.offsets[index + 1] as usize]
    }

    pub fn entries(&self) -> &[CompositeHit] {
        &self.entries
    }

    /// Gaussian indices contributing to any pixel, ascending.
    pub fn visible_gaussians(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.gaussian).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Inspection dump; the format is not a stability contract.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(b"MLCC").map_err(io)?;
        w.write_u32::<LittleEndian>(self.width as u32).map_err(io)?;
        w.write_u32::<LittleEndian>(self.height as u32).map_err(io)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64).map_err(io)?;
        for &off in &self.offsets {
            w.write_u32::<LittleEndian>(off).map_err(io)?;
        }
        for e in &self.entries {
            w.write_u32::<LittleEndian>(e.gaussian).map_err(io)?;
            w.write_f64::<LittleEndian>(e.weight).map_err(io)?;
            w.write_f64::<LittleEndian>(e.tau).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Which material attribute compositing reads from each Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeSource {
    /// The merged (or ground-truth) material stored on the Gaussian.
    Merged,
    /// The lifted per-view estimate for one view; slots unseen in that view
    /// contribute their median-filled value.
    PerView(usize),
}

/// Deferred-shading inputs rendered from one camera.
#[derive(Debug, Clone)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub basecolor: Vec<[f64; 3]>,
    pub roughness: Vec<f64>,
    pub metallic: Vec<f64>,
    pub normal: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

impl GBuffer {
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn basecolor_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.basecolor.iter().flatten().map(|&v| v as f32).collect(),
        }
    }

    pub fn scalar_raster(&self, values: &[f64]) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn select_material(g: &GaussianPrimitive, source: AttributeSource) -> Result<MaterialSample> {
    match source {
        AttributeSource::Merged => g.merged_material.ok_or_else(|| {
            Error::validation("gaussian carries no merged material for compositing")
        }),
        AttributeSource::PerView(v) => {
            let pv = g
                .per_view_materials
                .as_ref()
                .ok_or_else(|| Error::validation("gaussian carries no per-view materials"))?;
            pv.samples
                .get(v)
                .copied()
                .ok_or_else(|| Error::validation(format!("view {v} out of range")))
        }
    }
}

/// Builds the blend cache for `camera` and composites the selected material
/// attribute, normals, alpha and depth into a G-buffer.
pub fn composite_gbuffer(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    source: AttributeSource,
    params: TraceParams,
) -> Result<(GBuffer, CompositingCache)> {
    let accel = SceneAccel::build(gaussians, params)?;
    composite_gbuffer_with(&accel, gaussians, camera, source)
}

/// Same as [`composite_gbuffer`] but reuses a prebuilt acceleration
/// structure (its trace params decide the hit threshold).
pub fn composite_gbuffer_with(
    accel: &SceneAccel,
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    source: AttributeSource,
) -> Result<(GBuffer, CompositingCache)> {
    let cache = build_cache(accel, gaussians, camera);
    let gbuffer = composite_from_cache(&cache, gaussians, source)?;
    Ok((gbuffer, cache))
}

/// Builds just the blend cache for a view (no attribute pass).
pub fn composite_cache_for(
    accel: &SceneAccel,
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
) -> CompositingCache {
    build_cache(accel, gaussians, camera)
}

pub(crate) fn build_cache(
    accel: &SceneAccel,
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
) -> CompositingCache {
    let width = camera.width as usize;
    let height = camera.height as usize;
    let rows: Vec<Vec<Vec<CompositeHit>>> = (0..height)
        .into_par_iter()
        .map_init(
            || TraceScratch::new(gaussians.len()),
            |scratch, y| {
                let mut row = Vec::with_capacity(width);
                for x in 0..width {
                    let ray = camera.center_ray(x, y);
                    let hits = accel.trace_pixel_hits(&ray, gaussians, scratch);
                    let mut list = Vec::with_capacity(hits.len().min(24));
                    let mut transmittance = 1.0;
                    for hit in hits {
                        let w = transmittance * hit.alpha_max;
                        list.push(CompositeHit {
                            gaussian: hit.gaussian_index as u32,
                            weight: w,
                            tau: hit.tau_max,
                        });
                        transmittance *= 1.0 - hit.alpha_max;
                        if transmittance < TRANSMITTANCE_CUTOFF {
                            break;
                        }
                    }
                    row.push(list);
                }
                row
            },
        )
        .collect();

    let mut offsets = Vec::with_capacity(width * height + 1);
    let mut entries = Vec::new();
    offsets.push(0u32);
    for row in rows {
        for list in row {
            entries.extend(list);
            offsets.push(entries.len() as u32);
        }
    }
    CompositingCache {
        width,
        height,
        offsets,
        entries,
    }
}

pub(crate) fn composite_from_cache(
    cache: &CompositingCache,
    gaussians: &[GaussianPrimitive],
    source: AttributeSource,
) -> Result<GBuffer> {
    let npix = cache.width * cache.height;
    let mut gb = GBuffer {
        width: cache.width,
        height: cache.height,
        basecolor: vec![[0.0; 3]; npix],
        roughness: vec![0.0; npix],
        metallic: vec![0.0; npix],
        normal: vec![[0.0; 3]; npix],
        alpha: vec![0.0; npix],
        depth: vec![0.0; npix],
    };
    for p in 0..npix {
        let mut alpha = 0.0;
        let mut depth = 0.0;
        let mut normal = nalgebra::Vector3::<f64>::zeros();
        let mut bc = [0.0f64; 3];
        let mut rough = 0.0;
        let mut metal = 0.0;
        for hit in cache.pixel(p) {
            let g = &gaussians[hit.gaussian as usize];
            let mat = select_material(g, source)?;
            let w = hit.weight;
            alpha += w;
            depth += w * hit.tau;
            normal += g.normal * w;
            for c in 0..3 {
                bc[c] += w * mat.basecolor[c];
            }
            rough += w * mat.roughness;
            metal += w * mat.metallic;
        }
        gb.alpha[p] = alpha;
        gb.depth[p] = depth / alpha.max(1e-8);
        gb.basecolor[p] = bc;
        gb.roughness[p] = rough;
        gb.metallic[p] = metal;
        gb.normal[p] = if alpha > ALPHA_MASK_THRESHOLD && normal.norm() > 1e-12 {
            normal.normalize().into()
        } else {
            [0.0; 3]
        };
    }
    Ok(gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};

    fn gaussian_at(z: f64, opacity: f64, mat: MaterialSample) -> GaussianPrimitive {
        let mut g = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, z),
            Vector3::repeat(0.3),
            UnitQuaternion::identity(),
            opacity,
            -Vector3::z(),
        )
        .unwrap();
        g.merged_material = Some(mat);
        g
    }

    fn camera() -> Camera {
        Camera::look_at(
            [20.0, 20.0],
            9,
            9,
            Vector3::new(0.0, 0.0, -5.0),
            Vector3::zeros(),
            Vector3::y(),
        )
        .unwrap()
    }

    #[test]
    fn single_opaque_gaussian_dominates_pixel() {
        let mat = MaterialSample::new([0.8, 0.1, 0.2], 0.4, 0.6);
        let g = gaussian_at(0.0, 1.0, mat);
        let (gb, _) = composite_gbuffer(
            &[g],
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        let center = 4 * 9 + 4;
        assert!((gb.alpha[center] - 1.0).abs() < 1e-9);
        for c in 0..3 {
            assert!((gb.basecolor[center][c] - mat.basecolor[c]).abs() < 1e-9);
        }
        assert!((gb.metallic[center] - 0.6).abs() < 1e-9);
        // Depth approximately the distance to the mean along the center ray.
        assert!((gb.depth[center] - 5.0).abs() < 0.05);
        // Normal renormalized.
        let n = nalgebra::Vector3::from(gb.normal[center]);
        assert!((n.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn background_pixels_are_zero() {
        let mat = MaterialSample::new([0.8, 0.1, 0.2], 0.4, 0.6);
        let g = gaussian_at(0.0, 0.9, mat);
        let (gb, _) = composite_gbuffer(
            &[g],
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        // Corner pixel misses the Gaussian.
        assert_eq!(gb.alpha[0], 0.0);
        assert_eq!(gb.basecolor[0], [0.0; 3]);
        assert_eq!(gb.normal[0], [0.0; 3]);
        assert_eq!(gb.depth[0], 0.0);
    }

    #[test]
    fn two_half_opacity_hits_blend_to_expected_weights() {
        let m1 = MaterialSample::new([1.0, 0.0, 0.0], 0.0, 0.0);
        let m2 = MaterialSample::new([0.0, 1.0, 0.0], 1.0, 0.0);
        // Big flat Gaussians so the center ray passes through both means.
        let mut near = GaussianPrimitive::new(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::new(5.0, 5.0, 0.05),
            UnitQuaternion::identity(),
            0.5,
            -Vector3::z(),
        )
        .unwrap();
        near.merged_material = Some(m1);
        let mut far = near.clone();
        far.mean = Vector3::new(0.0, 0.0, 1.0);
        far.merged_material = Some(m2);

        let (gb, cache) = composite_gbuffer(
            &[far, near],
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        let center = 4 * 9 + 4;
        let hits = cache.pixel(center);
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].gaussian, 1); // near first
        assert!((hits[0].weight - 0.5).abs() < 1e-9);
        assert!((hits[1].weight - 0.25).abs() < 1e-9);
        assert!((gb.alpha[center] - 0.75).abs() < 1e-9);
        assert!((gb.basecolor[center][0] - 0.5).abs() < 1e-9);
        assert!((gb.basecolor[center][1] - 0.25).abs() < 1e-9);
        assert!((gb.roughness[center] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn weights_are_a_subprobability_everywhere() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut gaussians = Vec::new();
        for _ in 0..40 {
            let mut g = crate::raytrace::tests::random_gaussian(&mut rng, 1.5);
            g.merged_material = Some(MaterialSample::new([0.5; 3], 0.5, 0.0));
            gaussians.push(g);
        }
        let (gb, cache) = composite_gbuffer(
            &gaussians,
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        for p in 0..gb.num_pixels() {
            let mut sum = 0.0;
            for h in cache.pixel(p) {
                assert!(h.weight >= 0.0);
                sum += h.weight;
            }
            assert!(sum <= 1.0 + 1e-12);
            assert!((gb.alpha[p] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn composited_attribute_stays_in_convex_hull_after_normalization() {
        let m1 = MaterialSample::new([0.2, 0.5, 0.9], 0.1, 0.3);
        let m2 = MaterialSample::new([0.7, 0.1, 0.4], 0.9, 0.8);
        let mut g1 = gaussian_at(-0.5, 0.7, m1);
        g1.scale = Vector3::new(3.0, 3.0, 0.1);
        let mut g2 = gaussian_at(0.5, 0.6, m2);
        g2.scale = Vector3::new(3.0, 3.0, 0.1);
        let (gb, _) = composite_gbuffer(
            &[g1, g2],
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        for p in 0..gb.num_pixels() {
            let a = gb.alpha[p];
            if a > 1e-6 {
                let r = gb.roughness[p] / a;
                assert!(r >= 0.1 - 1e-9 && r <= 0.9 + 1e-9);
                let bc0 = gb.basecolor[p][0] / a;
                assert!(bc0 >= 0.2 - 1e-9 && bc0 <= 0.7 + 1e-9);
            }
        }
    }

    #[test]
    fn cache_dump_writes_file() {
        let mat = MaterialSample::new([0.8, 0.1, 0.2], 0.4, 0.6);
        let g = gaussian_at(0.0, 1.0, mat);
        let (_, cache) = composite_gbuffer(
            &[g],
            &camera(),
            AttributeSource::Merged,
            TraceParams::compositing(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.bin");
        cache.dump(&path).unwrap();
        assert!(path.metadata().unwrap().len() > 12);
    }
}
