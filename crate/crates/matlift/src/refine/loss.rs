//! Training losses: the material supervision L1 against the 2D predictions
//! and the photometric blend lambda*L1 + (1-lambda)*(1-SSIM) against the
//! input photographs.

use crate::error::Result;
use crate::img::ImageBuf;
use crate::real::Real;
use crate::scene::MATERIAL_CHANNELS;

use super::ssim::ssim_with_grad;

/// Mean absolute difference over all material channels within the mask,
/// with its gradient wrt `rendered`. The mask comes from the alpha channel
/// of the render. Empty masks yield zero loss.
///
/// Also returns the basecolor/roughness/metallic breakdown.
pub fn loss_image<R: Real>(
    rendered: &[Vec<R>; MATERIAL_CHANNELS],
    target: &[Vec<R>; MATERIAL_CHANNELS],
    masked_pixels: &[u32],
) -> (R, [R; 3], [Vec<R>; MATERIAL_CHANNELS]) {
    let npix = rendered[0].len();
    let mut grads: [Vec<R>; MATERIAL_CHANNELS] = std::array::from_fn(|_| vec![R::zero(); npix]);
    if masked_pixels.is_empty() {
        log::warn!("loss_image: empty alpha mask, returning zero loss");
        return (R::zero(), [R::zero(); 3], grads);
    }
    let denom = R::of((masked_pixels.len() * MATERIAL_CHANNELS) as f64);
    let scale = R::one() / denom;
    let mut per_group = [R::zero(); 3]; // basecolor, roughness, metallic sums
    for ch in 0..MATERIAL_CHANNELS {
        let group = match ch {
            0 | 1 | 2 => 0,
            3 => 1,
            _ => 2,
        };
        let (r, t, g) = (&rendered[ch], &target[ch], &mut grads[ch]);
        for &p in masked_pixels {
            let p = p as usize;
            let diff = r[p] - t[p];
            per_group[group] += diff.abs();
            g[p] = if diff > R::zero() {
                scale
            } else if diff < R::zero() {
                -scale
            } else {
                R::zero()
            };
        }
    }
    let total = (per_group[0] + per_group[1] + per_group[2]) * scale;
    // Report groups as means over their own channel counts.
    let group_counts = [3.0, 1.0, 1.0];
    let mut breakdown = [R::zero(); 3];
    for (i, cnt) in group_counts.iter().enumerate() {
        breakdown[i] = per_group[i] / R::of(masked_pixels.len() as f64 * cnt);
    }
    (total, breakdown, grads)
}

/// Masked mean absolute error over RGB with gradient wrt `a`.
pub fn l1_masked<R: Real>(
    a: &ImageBuf<R>,
    b: &ImageBuf<R>,
    masked_pixels: &[u32],
) -> (R, ImageBuf<R>) {
    let ch = a.channels;
    let mut grad = ImageBuf::<R>::new(a.width, a.height, ch);
    if masked_pixels.is_empty() {
        return (R::zero(), grad);
    }
    let scale = R::one() / R::of((masked_pixels.len() * ch) as f64);
    let mut total = R::zero();
    for &p in masked_pixels {
        let base = p as usize * ch;
        for c in 0..ch {
            let diff = a.data[base + c] - b.data[base + c];
            total += diff.abs() * scale;
            grad.data[base + c] = if diff > R::zero() {
                scale
            } else if diff < R::zero() {
                -scale
            } else {
                R::zero()
            };
        }
    }
    (total, grad)
}

/// Photometric rendering loss: lambda * L1 + (1 - lambda) * (1 - SSIM),
/// with the L1 term alpha-masked and the SSIM term over the full composited
/// frame. Returns the loss and its gradient wrt `rendered`.
pub fn loss_3dgs<R: Real>(
    rendered: &ImageBuf<R>,
    gt: &ImageBuf<R>,
    lambda: f64,
    masked_pixels: &[u32],
) -> Result<(R, ImageBuf<R>)> {
    let lam = R::of(lambda);
    let one_minus = R::of(1.0 - lambda);
    let (l1, l1_grad) = l1_masked(rendered, gt, masked_pixels);
    if lambda >= 1.0 {
        let mut grad = l1_grad;
        for g in grad.data.iter_mut() {
            *g = *g * lam;
        }
        return Ok((lam * l1, grad));
    }
    let (s, s_grad) = ssim_with_grad(rendered, gt)?;
    let loss = lam * l1 + one_minus * (R::one() - s);
    let mut grad = l1_grad;
    for (g, sg) in grad.data.iter_mut().zip(&s_grad.data) {
        *g = *g * lam - one_minus * *sg;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planes(npix: usize, v: f64) -> [Vec<f64>; MATERIAL_CHANNELS] {
        std::array::from_fn(|_| vec![v; npix])
    }

    #[test]
    fn identical_maps_give_zero() {
        let r = planes(16, 0.5);
        let t = planes(16, 0.5);
        let mask: Vec<u32> = (0..16).collect();
        let (loss, _, _) = loss_image(&r, &t, &mask);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_channel_offset_is_one_fifth() {
        // 0.1 offset on one of the five channels, full mask -> 0.1 / 5.
        let mut r = planes(16, 0.5);
        let t = planes(16, 0.5);
        for v in r[3].iter_mut() {
            *v += 0.1;
        }
        let mask: Vec<u32> = (0..16).collect();
        let (loss, breakdown, grads) = loss_image(&r, &t, &mask);
        assert!((loss - 0.1 / 5.0).abs() < 1e-12);
        assert!((breakdown[1] - 0.1).abs() < 1e-12);
        assert_eq!(breakdown[0], 0.0);
        // Gradient: +1/(16*5) on the offset channel.
        assert!((grads[3][0] - 1.0 / 80.0).abs() < 1e-12);
        assert_eq!(grads[0][0], 0.0);
    }

    #[test]
    fn loss_is_invariant_to_pixel_permutation_within_mask() {
        let mut r = planes(8, 0.0);
        let mut t = planes(8, 0.0);
        for p in 0..8 {
            r[0][p] = p as f64 * 0.1;
            t[0][p] = 0.3;
        }
        let mask: Vec<u32> = (0..8).collect();
        let (a, _, _) = loss_image(&r, &t, &mask);
        // Permute both images the same way.
        r[0].reverse();
        t[0].reverse();
        let (b, _, _) = loss_image(&r, &t, &mask);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn empty_mask_is_zero_loss() {
        let r = planes(4, 0.9);
        let t = planes(4, 0.1);
        let (loss, _, grads) = loss_image(&r, &t, &[]);
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn photometric_loss_boundary_cases() {
        let a = ImageBuf::<f64>::from_fn(8, 8, 3, |x, y, c| ((x + y + c) % 5) as f64 * 0.2);
        let mask: Vec<u32> = (0..64).collect();
        // rendered == gt -> 0 for any lambda.
        let (l, _) = loss_3dgs(&a, &a, 0.8, &mask).unwrap();
        assert!(l.abs() < 1e-12);
        let (l, _) = loss_3dgs(&a, &a, 0.0, &mask).unwrap();
        assert!(l.abs() < 1e-12);
        // lambda = 1 -> pure mean absolute error.
        let mut b = a.clone();
        for v in b.data.iter_mut() {
            *v += 0.25;
        }
        let (l, _) = loss_3dgs(&b, &a, 1.0, &mask).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn photometric_gradient_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let gt = ImageBuf::<f64>::from_fn(9, 7, 3, |_, _, _| rng.random_range(0.0..1.0));
        let mut img = ImageBuf::<f64>::from_fn(9, 7, 3, |_, _, _| rng.random_range(0.0..1.0));
        let mask: Vec<u32> = (0..63).filter(|p| p % 3 != 0).collect();
        let (_, grad) = loss_3dgs(&img, &gt, 0.8, &mask).unwrap();
        let eps = 1e-6;
        for &idx in &[4usize, 40, 77, 150] {
            let orig = img.data[idx];
            img.data[idx] = orig + eps;
            let up: f64 = loss_3dgs(&img, &gt, 0.8, &mask).unwrap().0;
            img.data[idx] = orig - eps;
            let dn: f64 = loss_3dgs(&img, &gt, 0.8, &mask).unwrap().0;
            img.data[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let an = grad.data[idx];
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!((fd - an).abs() / denom < 1e-4, "idx {idx}: {fd} vs {an}");
        }
    }
}
