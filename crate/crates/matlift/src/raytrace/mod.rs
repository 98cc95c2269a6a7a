//! Analytic ray-Gaussian queries, supersampled 2D-to-3D material lifting
//! with median aggregation, and alpha-composited G-buffer rendering.
//!
//! Every query is a pure function of immutable scene data. The uniform-grid
//! acceleration structure ([`SceneAccel`]) returns exactly the same hits as
//! the brute-force path, which is kept as the testing oracle.

mod composite;
mod grid;
mod lift;

pub use composite::{
    composite_cache_for, composite_gbuffer, composite_gbuffer_with, AttributeSource, CompositeHit,
    CompositingCache, GBuffer, ALPHA_MASK_THRESHOLD, TRANSMITTANCE_CUTOFF,
};
pub use lift::{collect_footprints, lift_materials_median, lift_scene, FootprintAccumulator, LiftStats};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{GaussianPrimitive, Ray};
use grid::UniformGrid;

/// A Gaussian intersected by a ray: the parameter of maximum response and
/// the peak opacity there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianHit {
    pub gaussian_index: usize,
    pub tau_max: f64,
    pub alpha_max: f64,
}

/// Knobs of the ray-Gaussian intersection test.
///
/// `falloff` is the opacity falloff rate; 1 makes the peak opacity the plain
/// Gaussian density evaluation at the maximum-response point.
#[derive(Debug, Clone, Copy)]
pub struct TraceParams {
    pub hit_threshold: f64,
    pub falloff: f64,
}

impl TraceParams {
    /// Confident hits for material lifting.
    pub fn lifting() -> Self {
        TraceParams {
            hit_threshold: 0.05,
            falloff: 1.0,
        }
    }

    /// Smooth coverage for G-buffer compositing.
    pub fn compositing() -> Self {
        TraceParams {
            hit_threshold: 0.01,
            falloff: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hit_threshold > 0.0 && self.hit_threshold < 1.0) {
            return Err(Error::InvalidParameter {
                name: "hit_threshold",
                message: format!("must be in (0,1), got {}", self.hit_threshold),
            });
        }
        if !(self.falloff > 0.0) {
            return Err(Error::InvalidParameter {
                name: "falloff",
                message: format!("must be positive, got {}", self.falloff),
            });
        }
        Ok(())
    }

    /// Mahalanobis radius beyond which no Gaussian can reach the threshold,
    /// assuming base opacity <= 1. Never below the conventional 3 sigma.
    pub fn cull_radius_sigma(&self) -> f64 {
        let r2 = 2.0 * (1.0 / self.hit_threshold).ln() / self.falloff;
        r2.sqrt().max(3.0) + 1e-6
    }
}

/// Ray parameter and location of the maximum Gaussian response along a ray:
/// tau = ((mu - o)^T Sigma^-1 d) / (d^T Sigma^-1 d).
pub fn max_response(ray: &Ray, g: &GaussianPrimitive) -> Result<(f64, Vector3<f64>)> {
    let inv = g.covariance_inverse()?;
    let u = inv * ray.direction;
    let denom = ray.direction.dot(&u);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "d^T Sigma^-1 d = {denom} is not positive"
        )));
    }
    let tau = (g.mean - ray.origin).dot(&u) / denom;
    Ok((tau, ray.origin + ray.direction * tau))
}

/// Peak opacity along the ray: alpha * exp(-falloff/2 * mahalanobis²(x_max)).
pub fn max_opacity(ray: &Ray, g: &GaussianPrimitive, falloff: f64) -> Result<f64> {
    if !(falloff > 0.0) {
        return Err(Error::InvalidParameter {
            name: "falloff",
            message: format!("must be positive, got {falloff}"),
        });
    }
    let (_, x_max) = max_response(ray, g)?;
    let inv = g.covariance_inverse()?;
    let delta = x_max - g.mean;
    let m2 = delta.dot(&(inv * delta));
    Ok(g.opacity * (-0.5 * falloff * m2).exp())
}

/// Brute-force reference: evaluates every Gaussian, keeps hits with
/// `alpha_max >= hit_threshold` and `tau_max > 0`, sorted by ascending tau
/// with index tie-break. This is the testing oracle for [`SceneAccel`].
pub fn trace_pixel_hits_brute(
    ray: &Ray,
    gaussians: &[GaussianPrimitive],
    params: &TraceParams,
) -> Result<Vec<GaussianHit>> {
    params.validate()?;
    let mut hits = Vec::new();
    for (i, g) in gaussians.iter().enumerate() {
        if let Some(hit) = eval_hit(ray, g, i, params)? {
            hits.push(hit);
        }
    }
    sort_hits(&mut hits);
    Ok(hits)
}

fn sort_hits(hits: &mut [GaussianHit]) {
    hits.sort_unstable_by(|a, b| {
        a.tau_max
            .partial_cmp(&b.tau_max)
            .unwrap()
            .then(a.gaussian_index.cmp(&b.gaussian_index))
    });
}

#[inline]
fn eval_hit(
    ray: &Ray,
    g: &GaussianPrimitive,
    index: usize,
    params: &TraceParams,
) -> Result<Option<GaussianHit>> {
    let inv = g.covariance_inverse()?;
    let u = inv * ray.direction;
    let denom = ray.direction.dot(&u);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Degenerate(
            "degenerate covariance in hit test".to_string(),
        ));
    }
    let w = ray.origin - g.mean;
    let wu = w.dot(&u);
    let tau = -wu / denom;
    if tau <= 0.0 {
        return Ok(None);
    }
    // mahal²(x_max) = w^T A w - (w·u)² / denom, with A = Sigma^-1.
    let m2 = w.dot(&(inv * w)) - wu * wu / denom;
    let alpha = g.opacity * (-0.5 * params.falloff * m2.max(0.0)).exp();
    if alpha >= params.hit_threshold {
        Ok(Some(GaussianHit {
            gaussian_index: index,
            tau_max: tau,
            alpha_max: alpha,
        }))
    } else {
        Ok(None)
    }
}

/// Per-thread scratch for grid traversal; results do not depend on it.
pub struct TraceScratch {
    stamp: Vec<u32>,
    current: u32,
}

impl TraceScratch {
    pub fn new(gaussian_count: usize) -> Self {
        TraceScratch {
            stamp: vec![0; gaussian_count],
            current: 0,
        }
    }
}

/// Uniform-grid accelerated ray queries over a fixed set of Gaussians.
///
/// Boxes are sized from the hit threshold so the grid provably returns the
/// same hit set as the brute-force oracle. Per-Gaussian data is packed into
/// flat arrays at build time to keep the candidate test cache-friendly.
pub struct SceneAccel {
    grid: UniformGrid,
    params: TraceParams,
    /// Packed symmetric inverse covariance: m00 m01 m02 m11 m12 m22.
    inv_sym: Vec<[f64; 6]>,
    means: Vec<Vector3<f64>>,
    opacities: Vec<f64>,
}

impl SceneAccel {
    pub fn build(gaussians: &[GaussianPrimitive], params: TraceParams) -> Result<Self> {
        params.validate()?;
        let k = params.cull_radius_sigma();
        let mut boxes = Vec::with_capacity(gaussians.len());
        let mut inv_sym = Vec::with_capacity(gaussians.len());
        let mut means = Vec::with_capacity(gaussians.len());
        let mut opacities = Vec::with_capacity(gaussians.len());
        for g in gaussians {
            let sigma = g.covariance()?;
            let inv = g.covariance_inverse()?; // fail fast on degenerate scales
            let half = Vector3::new(
                k * sigma[(0, 0)].sqrt(),
                k * sigma[(1, 1)].sqrt(),
                k * sigma[(2, 2)].sqrt(),
            );
            boxes.push((g.mean - half, g.mean + half));
            inv_sym.push([
                inv[(0, 0)],
                inv[(0, 1)],
                inv[(0, 2)],
                inv[(1, 1)],
                inv[(1, 2)],
                inv[(2, 2)],
            ]);
            means.push(g.mean);
            opacities.push(g.opacity);
        }
        Ok(SceneAccel {
            grid: UniformGrid::build(&boxes),
            params,
            inv_sym,
            means,
            opacities,
        })
    }

    pub fn params(&self) -> &TraceParams {
        &self.params
    }

    #[inline(always)]
    fn eval_packed(&self, id: usize, ray: &Ray) -> Option<GaussianHit> {
        let m = &self.inv_sym[id];
        let d = ray.direction;
        let w = ray.origin - self.means[id];
        // u = Sigma^-1 d for the packed symmetric matrix.
        let ux = m[0] * d.x + m[1] * d.y + m[2] * d.z;
        let uy = m[1] * d.x + m[3] * d.y + m[4] * d.z;
        let uz = m[2] * d.x + m[4] * d.y + m[5] * d.z;
        let denom = d.x * ux + d.y * uy + d.z * uz;
        let wu = w.x * ux + w.y * uy + w.z * uz;
        let tau = -wu / denom;
        if tau <= 0.0 {
            return None;
        }
        let aw_x = m[0] * w.x + m[1] * w.y + m[2] * w.z;
        let aw_y = m[1] * w.x + m[3] * w.y + m[4] * w.z;
        let aw_z = m[2] * w.x + m[4] * w.y + m[5] * w.z;
        let waw = w.x * aw_x + w.y * aw_y + w.z * aw_z;
        let m2 = (waw - wu * wu / denom).max(0.0);
        let alpha = self.opacities[id] * (-0.5 * self.params.falloff * m2).exp();
        if alpha >= self.params.hit_threshold {
            Some(GaussianHit {
                gaussian_index: id,
                tau_max: tau,
                alpha_max: alpha,
            })
        } else {
            None
        }
    }

    /// Visits every hit exactly once, in grid-traversal order (unsorted).
    pub fn for_each_hit(
        &self,
        ray: &Ray,
        _gaussians: &[GaussianPrimitive],
        scratch: &mut TraceScratch,
        mut f: impl FnMut(GaussianHit),
    ) {
        scratch.current = scratch.current.wrapping_add(1);
        if scratch.current == 0 {
            scratch.stamp.fill(0);
            scratch.current = 1;
        }
        let stamp = scratch.current;
        self.grid.traverse(ray, |ids| {
            for &id in ids {
                let id = id as usize;
                if scratch.stamp[id] == stamp {
                    continue;
                }
                scratch.stamp[id] = stamp;
                if let Some(hit) = self.eval_packed(id, ray) {
                    f(hit);
                }
            }
        });
    }

    /// All hits along the ray, sorted ascending by tau with index tie-break.
    pub fn trace_pixel_hits(
        &self,
        ray: &Ray,
        gaussians: &[GaussianPrimitive],
        scratch: &mut TraceScratch,
    ) -> Vec<GaussianHit> {
        let mut hits = Vec::new();
        self.for_each_hit(ray, gaussians, scratch, |h| hits.push(h));
        sort_hits(&mut hits);
        hits
    }
}
