//! Supersampled 2D-to-3D material lifting.
//!
//! Each view traces an n x n subpixel ray grid; a Gaussian hit by any
//! subray of a pixel receives that pixel's material sample exactly once
//! (footprints count pixels, not rays). Per-view estimates are the
//! componentwise median over the footprint, and Gaussians never seen in any
//! view are removed from the scene.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, GaussianPrimitive, MaterialMaps, MaterialSample, PerViewMaterials, SceneBundle};

use super::{SceneAccel, TraceParams, TraceScratch};

/// Per-(gaussian, view) lists of material samples collected from pixels.
pub struct FootprintAccumulator {
    pub views: usize,
    lists: Vec<Vec<Vec<MaterialSample>>>,
}

impl FootprintAccumulator {
    pub fn new(gaussian_count: usize, views: usize) -> Self {
        FootprintAccumulator {
            views,
            lists: vec![vec![Vec::new(); views]; gaussian_count],
        }
    }

    pub fn samples(&self, gaussian: usize, view: usize) -> &[MaterialSample] {
        &self.lists[gaussian][view]
    }

    fn push(&mut self, gaussian: usize, view: usize, sample: MaterialSample) {
        self.lists[gaussian][view].push(sample);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiftStats {
    pub input_gaussians: usize,
    pub retained_gaussians: usize,
    pub culled_gaussians: usize,
}

/// Traces `supersample_n²` rays per pixel of `camera` and appends, for every
/// Gaussian hit in this view, the pixel's material sample to the accumulator.
pub fn collect_footprints(
    accel: &SceneAccel,
    gaussians: &[GaussianPrimitive],
    camera: &Camera,
    maps: &MaterialMaps,
    view: usize,
    supersample_n: usize,
    acc: &mut FootprintAccumulator,
) -> Result<()> {
    if supersample_n < 1 {
        return Err(Error::InvalidParameter {
            name: "supersample_n",
            message: "must be at least 1".into(),
        });
    }
    let (mw, mh) = maps.resolution();
    if mw != camera.width as usize || mh != camera.height as usize {
        return Err(Error::validation(format!(
            "material maps are {mw}x{mh} but camera is {}x{}",
            camera.width, camera.height
        )));
    }
    if view >= acc.views {
        return Err(Error::validation(format!(
            "view index {view} out of range for {} views",
            acc.views
        )));
    }

    let width = camera.width as usize;
    let height = camera.height as usize;
    let n = supersample_n;

    // Rows trace in parallel; each pixel dedups hit Gaussians across its
    // subrays. The merge into the accumulator below is sequential and
    // row-major, so results are independent of scheduling.
    let rows: Vec<Vec<Vec<u32>>> = (0..height)
        .into_par_iter()
        .map_init(
            || (TraceScratch::new(gaussians.len()), vec![0u32; gaussians.len()], 0u32),
            |(scratch, pixel_stamp, pixel_tag), y| {
                let mut row: Vec<Vec<u32>> = Vec::with_capacity(width);
                for x in 0..width {
                    *pixel_tag = pixel_tag.wrapping_add(1);
                    if *pixel_tag == 0 {
                        pixel_stamp.fill(0);
                        *pixel_tag = 1;
                    }
                    let tag = *pixel_tag;
                    let mut hit_ids: Vec<u32> = Vec::new();
                    for sy in 0..n {
                        for sx in 0..n {
                            let ox = (sx as f64 + 0.5) / n as f64;
                            let oy = (sy as f64 + 0.5) / n as f64;
                            let ray = camera.ray(x, y, ox, oy);
                            accel.for_each_hit(&ray, gaussians, scratch, |hit| {
                                let id = hit.gaussian_index;
                                if pixel_stamp[id] != tag {
                                    pixel_stamp[id] = tag;
                                    hit_ids.push(id as u32);
                                }
                            });
                        }
                    }
                    hit_ids.sort_unstable();
                    row.push(hit_ids);
                }
                row
            },
        )
        .collect();

    for (y, row) in rows.into_iter().enumerate() {
        for (x, ids) in row.into_iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let sample = maps.sample(x, y);
            for id in ids {
                acc.push(id as usize, view, sample);
            }
        }
    }
    Ok(())
}

/// Fills per-view material slots with the componentwise footprint medians,
/// sets seen flags, and removes Gaussians with no seen view.
///
/// Unseen slots are pre-filled with the across-view median of the seen
/// estimates so downstream merger inputs have a fixed width.
pub fn lift_materials_median(
    acc: &FootprintAccumulator,
    gaussians: &[GaussianPrimitive],
) -> (Vec<GaussianPrimitive>, LiftStats) {
    let mut retained = Vec::new();
    for (gi, g) in gaussians.iter().enumerate() {
        let mut samples = vec![MaterialSample::default(); acc.views];
        let mut seen = vec![false; acc.views];
        let mut any = false;
        for v in 0..acc.views {
            let list = acc.samples(gi, v);
            if list.is_empty() {
                continue;
            }
            seen[v] = true;
            any = true;
            for ch in 0..crate::scene::MATERIAL_CHANNELS {
                let mut vals: Vec<f64> = list.iter().map(|m| m.channel(ch)).collect();
                samples[v].set_channel(ch, median_inplace(&mut vals));
            }
        }
        if !any {
            continue;
        }
        // Across-view median of the seen slots fills the unseen ones.
        let mut fill = MaterialSample::default();
        for ch in 0..crate::scene::MATERIAL_CHANNELS {
            let mut vals: Vec<f64> = (0..acc.views)
                .filter(|&v| seen[v])
                .map(|v| samples[v].channel(ch))
                .collect();
            fill.set_channel(ch, median_inplace(&mut vals));
        }
        for v in 0..acc.views {
            if !seen[v] {
                samples[v] = fill;
            }
        }
        let mut g = g.clone();
        g.per_view_materials = Some(PerViewMaterials { samples, seen });
        retained.push(g);
    }
    let stats = LiftStats {
        input_gaussians: gaussians.len(),
        retained_gaussians: retained.len(),
        culled_gaussians: gaussians.len() - retained.len(),
    };
    (retained, stats)
}

/// Runs footprint collection over every view of the bundle and replaces the
/// bundle's Gaussians with the lifted, culled set.
pub fn lift_scene(
    bundle: &mut SceneBundle,
    supersample_n: usize,
    params: TraceParams,
) -> Result<LiftStats> {
    bundle.validate()?;
    let maps = bundle
        .material_maps
        .as_ref()
        .ok_or_else(|| Error::validation("scene has no material maps to lift"))?;
    let accel = SceneAccel::build(&bundle.gaussians, params)?;
    let mut acc = FootprintAccumulator::new(bundle.gaussians.len(), bundle.views());
    for (v, (camera, m)) in bundle.cameras.iter().zip(maps.iter()).enumerate() {
        collect_footprints(&accel, &bundle.gaussians, camera, m, v, supersample_n, &mut acc)?;
    }
    let (lifted, stats) = lift_materials_median(&acc, &bundle.gaussians);
    bundle.gaussians = lifted;
    Ok(stats)
}

/// Median with the midpoint convention for even counts. Panics on empty
/// input; callers guarantee nonempty footprints.
pub fn median_inplace(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
