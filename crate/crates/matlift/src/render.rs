//! The production render path: composite a G-buffer, shade it under an
//! environment map, composite over a background. Both the synthetic
//! benchmark's ground-truth images and the relighting evaluation go through
//! these functions, so there is no second renderer to drift against.

use rayon::prelude::*;

use crate::error::Result;
use crate::img::Raster;
use crate::raytrace::{
    composite_gbuffer_with, AttributeSource, GBuffer, SceneAccel, TraceParams,
    ALPHA_MASK_THRESHOLD,
};
use crate::scene::{Camera, EnvironmentMap, GaussianPrimitive, MaterialMaps};
use crate::shading::{shade_pixel, EnvTable, ShadingSample};

/// Renders one view with deferred shading. Returns the linear HDR image and
/// the G-buffer it was shaded from.
pub fn render_view(
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    env: &EnvironmentMap,
    source: AttributeSource,
    params: TraceParams,
    background: [f64; 3],
) -> Result<(Raster, GBuffer)> {
    let accel = SceneAccel::build(gaussians, params)?;
    render_view_with(&accel, gaussians, camera, env, source, background)
}

pub fn render_view_with(
    accel: &SceneAccel,
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    env: &EnvironmentMap,
    source: AttributeSource,
    background: [f64; 3],
) -> Result<(Raster, GBuffer)> {
    let (gb, _) = composite_gbuffer_with(accel, gaussians, camera, source)?;
    let image = shade_gbuffer(&gb, camera, env, background);
    Ok((image, gb))
}

/// Deferred shading of a composited G-buffer.
pub fn shade_gbuffer(
    gb: &GBuffer,
    camera: &Camera,
    env: &EnvironmentMap,
    background: [f64; 3],
) -> Raster {
    let table = EnvTable::<f64>::from_env(env);
    let npix = gb.num_pixels();
    let pixels: Vec<[f64; 3]> = (0..npix)
        .into_par_iter()
        .map(|p| {
            let alpha = gb.alpha[p];
            let mut out = [
                (1.0 - alpha.min(1.0)) * background[0],
                (1.0 - alpha.min(1.0)) * background[1],
                (1.0 - alpha.min(1.0)) * background[2],
            ];
            if alpha > ALPHA_MASK_THRESHOLD {
                let inv = 1.0 / alpha;
                let x = p % gb.width;
                let y = p / gb.width;
                let ray = camera.center_ray(x, y);
                let sample = ShadingSample {
                    basecolor: [
                        (gb.basecolor[p][0] * inv).clamp(0.0, 1.0),
                        (gb.basecolor[p][1] * inv).clamp(0.0, 1.0),
                        (gb.basecolor[p][2] * inv).clamp(0.0, 1.0),
                    ],
                    roughness: (gb.roughness[p] * inv).clamp(0.0, 1.0),
                    metallic: (gb.metallic[p] * inv).clamp(0.0, 1.0),
                    normal: gb.normal[p],
                    view_dir: [-ray.direction.x, -ray.direction.y, -ray.direction.z],
                    alpha,
                };
                let shaded = shade_pixel(&sample, &table);
                for c in 0..3 {
                    out[c] += shaded[c];
                }
            }
            out
        })
        .collect();

    let mut image = Raster::new(gb.width, gb.height, 3);
    for (p, px) in pixels.iter().enumerate() {
        for c in 0..3 {
            image.data[p * 3 + c] = px[c] as f32;
        }
    }
    image
}

/// Alpha-normalized material maps from a G-buffer; background pixels are 0.
pub fn material_maps_from_gbuffer(gb: &GBuffer) -> MaterialMaps {
    let npix = gb.num_pixels();
    let mut basecolor = Raster::new(gb.width, gb.height, 3);
    let mut roughness = Raster::new(gb.width, gb.height, 1);
    let mut metallic = Raster::new(gb.width, gb.height, 1);
    for p in 0..npix {
        let alpha = gb.alpha[p];
        if alpha > ALPHA_MASK_THRESHOLD {
            let inv = 1.0 / alpha;
            for c in 0..3 {
                basecolor.data[p * 3 + c] = ((gb.basecolor[p][c] * inv).clamp(0.0, 1.0)) as f32;
            }
            roughness.data[p] = ((gb.roughness[p] * inv).clamp(0.0, 1.0)) as f32;
            metallic.data[p] = ((gb.metallic[p] * inv).clamp(0.0, 1.0)) as f32;
        }
    }
    MaterialMaps {
        basecolor,
        roughness,
        metallic,
    }
}
