//! One training step: merger forward, sparse material re-composite,
//! material supervision loss, deferred shading, photometric loss, and the
//! full backward chain to merger parameters and environment texels.
//!
//! Parallel sections use fixed-size chunks reduced in index order, so
//! results are bit-identical regardless of the worker count.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::Result;
use crate::img::ImageBuf;
use crate::merger::{backward_batch, forward_batch, ChannelGrads, MergerParams};
use crate::real::Real;
use crate::scene::MATERIAL_CHANNELS;
use crate::shading::{
    shade_backward_into, shade_backward_materials_into, shade_pixel, MaterialGrads, ShadingSample,
};

use super::context::{EnvState, TrainContext, ViewData};
use super::loss::{loss_3dgs, loss_image};
use super::{LossReport, RefineConfig, Variant};

const SHADE_CHUNK: usize = 512;

pub struct StepOutput<R> {
    pub report: LossReport,
    pub channel_grads: [ChannelGrads<R>; 3],
    /// dLoss/d(softplus pre-activations), zero for variants that do not
    /// optimize the environment.
    pub env_grad_u: Vec<R>,
    /// dLoss/d(per-Gaussian normal), indexed like `view.visible`; present
    /// only when normal refinement is enabled.
    pub normal_grads: Option<Vec<[R; 3]>>,
}

#[inline]
fn clamp01<R: Real>(v: R) -> (R, bool) {
    if v < R::zero() {
        (R::zero(), false)
    } else if v > R::one() {
        (R::one(), false)
    } else {
        (v, true)
    }
}

fn build_sample<R: Real>(
    view: &ViewData<R>,
    rendered: &[Vec<R>; MATERIAL_CHANNELS],
    normal: [R; 3],
    p: usize,
) -> (ShadingSample<R>, [bool; MATERIAL_CHANNELS]) {
    let mut pass = [true; MATERIAL_CHANNELS];
    let (bc0, p0) = clamp01(rendered[0][p]);
    let (bc1, p1) = clamp01(rendered[1][p]);
    let (bc2, p2) = clamp01(rendered[2][p]);
    let (rough, p3) = clamp01(rendered[3][p]);
    let (metal, p4) = clamp01(rendered[4][p]);
    pass[0] = p0;
    pass[1] = p1;
    pass[2] = p2;
    pass[3] = p3;
    pass[4] = p4;
    (
        ShadingSample {
            basecolor: [bc0, bc1, bc2],
            roughness: rough,
            metallic: metal,
            normal,
            view_dir: view.view_dir[p],
            alpha: view.alpha[p],
        },
        pass,
    )
}

/// Composites the current per-Gaussian normals for one pixel and
/// renormalizes; returns the unit normal and the raw length for backward.
fn composite_normal<R: Real>(
    view: &ViewData<R>,
    normals: &[[R; 3]],
    p: usize,
) -> ([R; 3], [R; 3], R) {
    let mut raw = [R::zero(); 3];
    for &(local, w) in view.pixel_hits(p) {
        let n = normals[view.visible[local as usize] as usize];
        for k in 0..3 {
            raw[k] += n[k] * w;
        }
    }
    let len = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
    if len > R::of(1e-12) {
        ([raw[0] / len, raw[1] / len, raw[2] / len], raw, len)
    } else {
        ([R::zero(); 3], raw, R::zero())
    }
}

/// Loss and gradients for one sampled view. The environment table inside
/// `env` must be synced to its parameters.
pub fn loss_and_grads<R: Real>(
    ctx: &TrainContext<R>,
    view_index: usize,
    params: &MergerParams<R>,
    env: &EnvState<R>,
    cfg: &RefineConfig,
    normals: Option<&[[R; 3]]>,
) -> Result<StepOutput<R>> {
    let view = &ctx.views[view_index];
    let n = view.visible.len();
    let npix = view.width * view.height;
    let photometric = matches!(cfg.variant, Variant::Full | Variant::NoSoftmax);

    // Merger forward, three channels in parallel.
    let ((bc, rough), metal) = rayon::join(
        || {
            rayon::join(
                || forward_batch(&params.basecolor, &view.channels[0].x, &view.channels[0].values, &view.channels[0].seen),
                || forward_batch(&params.roughness, &view.channels[1].x, &view.channels[1].values, &view.channels[1].seen),
            )
        },
        || forward_batch(&params.metallic, &view.channels[2].x, &view.channels[2].values, &view.channels[2].seen),
    );
    let (merged_bc, cache_bc) = bc?;
    let (merged_rough, cache_rough) = rough?;
    let (merged_metal, cache_metal) = metal?;

    // Re-composite the five material planes (alpha-normalized) on the mask.
    let mut rendered: [Vec<R>; MATERIAL_CHANNELS] =
        std::array::from_fn(|_| vec![R::zero(); npix]);
    for &p in &view.masked_pixels {
        let p = p as usize;
        let inv_a = R::one() / view.alpha[p];
        let mut acc = [R::zero(); MATERIAL_CHANNELS];
        for &(local, w) in view.pixel_hits(p) {
            let l = local as usize;
            for k in 0..3 {
                acc[k] += w * merged_bc[(l, k)];
            }
            acc[3] += w * merged_rough[(l, 0)];
            acc[4] += w * merged_metal[(l, 0)];
        }
        for (ch, a) in acc.iter().enumerate() {
            rendered[ch][p] = *a * inv_a;
        }
    }

    let (l_image, breakdown, g_image) = loss_image(&rendered, &view.target, &view.masked_pixels);

    // Total per-pixel gradient on the normalized material planes.
    let w_mat = R::of(cfg.weight_material_loss);
    let mut g_total: [Vec<R>; MATERIAL_CHANNELS] = std::array::from_fn(|_| vec![R::zero(); npix]);
    for ch in 0..MATERIAL_CHANNELS {
        for &p in &view.masked_pixels {
            let p = p as usize;
            g_total[ch][p] = w_mat * g_image[ch][p];
        }
    }

    let mut l_photo = R::zero();
    let mut env_grad_rad = vec![[R::zero(); 3]; env.table.texel_count()];
    let mut normal_grads = normals.map(|_| vec![[R::zero(); 3]; n]);

    if photometric {
        // Shading needs the per-pixel normal: fixed from the context unless
        // normals are being refined.
        let normal_at = |p: usize| -> [R; 3] {
            match normals {
                Some(current) => composite_normal(view, current, p).0,
                None => view.normal[p],
            }
        };

        // Forward shading over masked pixels.
        let shaded: Vec<[R; 3]> = view
            .masked_pixels
            .par_iter()
            .map(|&p| {
                let p = p as usize;
                let (sample, _) = build_sample(view, &rendered, normal_at(p), p);
                shade_pixel(&sample, &env.table)
            })
            .collect();

        let mut ipbr = ImageBuf::<R>::new(view.width, view.height, 3);
        for p in 0..npix {
            let base = R::one() - view.alpha[p].min(R::one());
            for c in 0..3 {
                ipbr.data[p * 3 + c] = base * ctx.background[c];
            }
        }
        for (i, &p) in view.masked_pixels.iter().enumerate() {
            let p = p as usize;
            for c in 0..3 {
                ipbr.data[p * 3 + c] += shaded[i][c];
            }
        }

        let (l3, g_ipbr) = loss_3dgs(&ipbr, &view.gt, cfg.lambda_photo, &view.masked_pixels)?;
        l_photo = l3;

        // Backward shading in fixed chunks, merged in order.
        struct ChunkOut<R> {
            env: Vec<[R; 3]>,
            mats: Vec<MaterialGrads<R>>,
            pass: Vec<[bool; MATERIAL_CHANNELS]>,
        }
        let chunks: Vec<ChunkOut<R>> = view
            .masked_pixels
            .par_chunks(SHADE_CHUNK)
            .map(|chunk| {
                let mut env_buf = vec![[R::zero(); 3]; env.table.texel_count()];
                let mut mats = Vec::with_capacity(chunk.len());
                let mut pass = Vec::with_capacity(chunk.len());
                for &p in chunk {
                    let p = p as usize;
                    let (sample, ok) = build_sample(view, &rendered, normal_at(p), p);
                    let g_out = [
                        g_ipbr.data[p * 3],
                        g_ipbr.data[p * 3 + 1],
                        g_ipbr.data[p * 3 + 2],
                    ];
                    let mg = if normals.is_some() {
                        shade_backward_into(&sample, &env.table, g_out, &mut env_buf)
                    } else {
                        shade_backward_materials_into(&sample, &env.table, g_out, &mut env_buf)
                    };
                    mats.push(mg);
                    pass.push(ok);
                }
                ChunkOut { env: env_buf, mats, pass }
            })
            .collect();

        let mut i = 0;
        for chunk in &chunks {
            for (t, g) in chunk.env.iter().enumerate() {
                for c in 0..3 {
                    env_grad_rad[t][c] += g[c];
                }
            }
            for (mg, ok) in chunk.mats.iter().zip(&chunk.pass) {
                let p = view.masked_pixels[i] as usize;
                for k in 0..3 {
                    if ok[k] {
                        g_total[k][p] += mg.basecolor[k];
                    }
                }
                if ok[3] {
                    g_total[3][p] += mg.roughness;
                }
                if ok[4] {
                    g_total[4][p] += mg.metallic;
                }
                if let Some(ngrads) = normal_grads.as_mut() {
                    // Chain through the per-pixel renormalization:
                    // d(n/|n|) = (I - n n^T) / |n|.
                    let current = normals.expect("normal grads imply normals");
                    let (unit, _raw, len) = composite_normal(view, current, p);
                    if len > R::of(1e-9) {
                        let dot = mg.normal[0] * unit[0]
                            + mg.normal[1] * unit[1]
                            + mg.normal[2] * unit[2];
                        let d_raw = [
                            (mg.normal[0] - unit[0] * dot) / len,
                            (mg.normal[1] - unit[1] * dot) / len,
                            (mg.normal[2] - unit[2] * dot) / len,
                        ];
                        for &(local, w) in view.pixel_hits(p) {
                            let l = local as usize;
                            for k in 0..3 {
                                ngrads[l][k] += w * d_raw[k];
                            }
                        }
                    }
                }
                i += 1;
            }
        }
    }

    // Scatter pixel gradients to per-Gaussian merged-material gradients.
    let mut d_bc = Array2::<R>::zeros((n, 3));
    let mut d_rough = Array2::<R>::zeros((n, 1));
    let mut d_metal = Array2::<R>::zeros((n, 1));
    for &p in &view.masked_pixels {
        let p = p as usize;
        let inv_a = R::one() / view.alpha[p];
        let g0 = g_total[0][p];
        let g1 = g_total[1][p];
        let g2 = g_total[2][p];
        let g3 = g_total[3][p];
        let g4 = g_total[4][p];
        if g0 == R::zero()
            && g1 == R::zero()
            && g2 == R::zero()
            && g3 == R::zero()
            && g4 == R::zero()
        {
            continue;
        }
        for &(local, w) in view.pixel_hits(p) {
            let l = local as usize;
            let f = w * inv_a;
            d_bc[(l, 0)] += f * g0;
            d_bc[(l, 1)] += f * g1;
            d_bc[(l, 2)] += f * g2;
            d_rough[(l, 0)] += f * g3;
            d_metal[(l, 0)] += f * g4;
        }
    }

    // Merger backward, three channels in parallel.
    let ((gb, gr), gm) = rayon::join(
        || {
            rayon::join(
                || backward_batch(&params.basecolor, &view.channels[0].x, &view.channels[0].values, &cache_bc, &d_bc),
                || backward_batch(&params.roughness, &view.channels[1].x, &view.channels[1].values, &cache_rough, &d_rough),
            )
        },
        || backward_batch(&params.metallic, &view.channels[2].x, &view.channels[2].values, &cache_metal, &d_metal),
    );

    let env_grad_u = if photometric {
        env.chain_to_u(&env_grad_rad)
    } else {
        vec![R::zero(); env.u.len()]
    };

    let total = cfg.weight_material_loss * l_image.as_f64() + l_photo.as_f64();
    Ok(StepOutput {
        report: LossReport {
            step: 0,
            l_image: l_image.as_f64(),
            l_3dgs: l_photo.as_f64(),
            total,
            per_channel: [
                breakdown[0].as_f64(),
                breakdown[1].as_f64(),
                breakdown[2].as_f64(),
            ],
        },
        channel_grads: [gb, gr, gm],
        env_grad_u,
        normal_grads,
    })
}
