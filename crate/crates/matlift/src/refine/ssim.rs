//! Single-scale structural similarity with an 11x11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), averaged over
//! channels and pixels, plus its analytic gradient.
//!
//! Windows that overhang the image border are renormalized to the in-bounds
//! kernel mass, so ssim(x, x) = 1 holds exactly everywhere and small images
//! (below the window size) are still well defined.

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::real::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable border-renormalized filter along x then y.
fn filter_renorm<R: Real>(plane: &[R], w: usize, h: usize, kernel: &[f64]) -> Vec<R> {
    let r = kernel.len() / 2;
    let mut tmp = vec![R::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = R::zero();
            let mut mass = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - r as isize;
                if xx >= 0 && (xx as usize) < w {
                    acc += R::of(kv) * plane[y * w + xx as usize];
                    mass += kv;
                }
            }
            tmp[y * w + x] = acc / R::of(mass);
        }
    }
    let mut out = vec![R::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = R::zero();
            let mut mass = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - r as isize;
                if yy >= 0 && (yy as usize) < h {
                    acc += R::of(kv) * tmp[yy as usize * w + x];
                    mass += kv;
                }
            }
            out[y * w + x] = acc / R::of(mass);
        }
    }
    out
}

/// Adjoint of [`filter_renorm`]: divide by the per-position mass, then
/// zero-padded correlation with the (symmetric) kernel, y pass then x pass.
fn filter_adjoint<R: Real>(plane: &[R], w: usize, h: usize, kernel: &[f64]) -> Vec<R> {
    let r = kernel.len() / 2;
    let mass_1d = |n: usize, i: usize| -> f64 {
        let mut mass = 0.0;
        for (ki, &kv) in kernel.iter().enumerate() {
            let ii = i as isize + ki as isize - r as isize;
            if ii >= 0 && (ii as usize) < n {
                mass += kv;
            }
        }
        mass
    };
    // y pass adjoint.
    let mut tmp = vec![R::zero(); w * h];
    for y in 0..h {
        let inv = R::of(1.0 / mass_1d(h, y));
        for x in 0..w {
            tmp[y * w + x] = plane[y * w + x] * inv;
        }
    }
    let mut mid = vec![R::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = R::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let yy = y as isize - (ki as isize - r as isize);
                if yy >= 0 && (yy as usize) < h {
                    acc += R::of(kv) * tmp[yy as usize * w + x];
                }
            }
            mid[y * w + x] = acc;
        }
    }
    // x pass adjoint.
    for y in 0..h {
        for x in 0..w {
            let inv = R::of(1.0 / mass_1d(w, x));
            tmp[y * w + x] = mid[y * w + x] * inv;
        }
    }
    let mut out = vec![R::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = R::zero();
            for (ki, &kv) in kernel.iter().enumerate() {
                let xx = x as isize - (ki as isize - r as isize);
                if xx >= 0 && (xx as usize) < w {
                    acc += R::of(kv) * tmp[y * w + xx as usize];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn check_shapes<R: Real>(a: &ImageBuf<R>, b: &ImageBuf<R>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "ssim shape mismatch: {}x{}x{} vs {}x{}x{}",
            a.width, a.height, a.channels, b.width, b.height, b.channels
        )));
    }
    Ok(())
}

/// Mean SSIM over channels and pixels.
pub fn ssim<R: Real>(a: &ImageBuf<R>, b: &ImageBuf<R>) -> Result<R> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// Mean SSIM and its gradient with respect to image `a`.
pub fn ssim_with_grad<R: Real>(a: &ImageBuf<R>, b: &ImageBuf<R>) -> Result<(R, ImageBuf<R>)> {
    let (value, grad) = ssim_impl(a, b, true)?;
    Ok((value, grad.expect("requested gradient")))
}

fn ssim_impl<R: Real>(
    a: &ImageBuf<R>,
    b: &ImageBuf<R>,
    want_grad: bool,
) -> Result<(R, Option<ImageBuf<R>>)> {
    check_shapes(a, b)?;
    let (w, h, ch) = (a.width, a.height, a.channels);
    let kernel = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = R::of(SSIM_K1 * SSIM_K1);
    let c2 = R::of(SSIM_K2 * SSIM_K2);
    let npix = w * h;
    let norm = R::of(1.0 / (npix * ch) as f64);

    let mut total = R::zero();
    let mut grad = if want_grad {
        Some(ImageBuf::<R>::new(w, h, ch))
    } else {
        None
    };

    let mut plane_a = vec![R::zero(); npix];
    let mut plane_b = vec![R::zero(); npix];
    let mut plane_aa = vec![R::zero(); npix];
    let mut plane_bb = vec![R::zero(); npix];
    let mut plane_ab = vec![R::zero(); npix];
    for c in 0..ch {
        for p in 0..npix {
            let av = a.data[p * ch + c];
            let bv = b.data[p * ch + c];
            plane_a[p] = av;
            plane_b[p] = bv;
            plane_aa[p] = av * av;
            plane_bb[p] = bv * bv;
            plane_ab[p] = av * bv;
        }
        let mu_a = filter_renorm(&plane_a, w, h, &kernel);
        let mu_b = filter_renorm(&plane_b, w, h, &kernel);
        let e_aa = filter_renorm(&plane_aa, w, h, &kernel);
        let e_bb = filter_renorm(&plane_bb, w, h, &kernel);
        let e_ab = filter_renorm(&plane_ab, w, h, &kernel);

        let mut d_mu = vec![R::zero(); npix];
        let mut d_eaa = vec![R::zero(); npix];
        let mut d_eab = vec![R::zero(); npix];
        let two = R::of(2.0);
        for p in 0..npix {
            let (pa, pb) = (mu_a[p], mu_b[p]);
            let var_a = e_aa[p] - pa * pa;
            let var_b = e_bb[p] - pb * pb;
            let cov = e_ab[p] - pa * pb;
            let a1 = two * pa * pb + c1;
            let a2 = two * cov + c2;
            let b1 = pa * pa + pb * pb + c1;
            let b2 = var_a + var_b + c2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                // Partials of S wrt the filtered fields mu_a, E[a²], E[ab].
                d_mu[p] = (two * pb * (a2 - a1)) / (b1 * b2) - two * pa * s / b1 + two * pa * s / b2;
                d_eaa[p] = -s / b2;
                d_eab[p] = two * a1 / (b1 * b2);
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mu = filter_adjoint(&d_mu, w, h, &kernel);
            let g_eaa = filter_adjoint(&d_eaa, w, h, &kernel);
            let g_eab = filter_adjoint(&d_eab, w, h, &kernel);
            for p in 0..npix {
                g.data[p * ch + c] =
                    norm * (g_mu[p] + two * plane_a[p] * g_eaa[p] + plane_b[p] * g_eab[p]);
            }
        }
    }
    Ok((total * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize, ch: usize) -> ImageBuf<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuf::from_fn(w, h, ch, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_images_score_one() {
        for (w, h) in [(16, 16), (8, 8), (5, 3), (64, 32)] {
            let a = random_image(w as u64 * 31 + h as u64, w, h, 3);
            let s: f64 = ssim(&a, &a).unwrap();
            assert!((s - 1.0).abs() < 1e-12, "{w}x{h}: {s}");
        }
    }

    #[test]
    fn constant_offset_matches_luminance_closed_form() {
        // On flat images all variances vanish; SSIM reduces to the
        // luminance ratio (2 m1 m2 + C1) / (m1² + m2² + C1).
        let a = ImageBuf::<f64> {
            width: 12,
            height: 9,
            channels: 1,
            data: vec![0.2; 108],
        };
        let b = ImageBuf::<f64> {
            width: 12,
            height: 9,
            channels: 1,
            data: vec![0.7; 108],
        };
        let c1 = SSIM_K1 * SSIM_K1;
        let expected = (2.0 * 0.2 * 0.7 + c1) / (0.2f64.powi(2) + 0.7f64.powi(2) + c1);
        let s: f64 = ssim(&a, &b).unwrap();
        assert!((s - expected).abs() < 1e-12, "{s} vs {expected}");
        assert!(s < 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(5, 20, 14, 3);
        let b = random_image(6, 20, 14, 3);
        let s1: f64 = ssim(&a, &b).unwrap();
        let s2: f64 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = random_image(1, 8, 8, 3);
        let b = random_image(2, 8, 9, 3);
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = random_image(11, 10, 7, 2);
        let b = random_image(12, 10, 7, 2);
        let (_, grad) = ssim_with_grad(&a, &b).unwrap();
        let eps = 1e-6;
        let mut aa = a.clone();
        for &idx in &[0usize, 13, 57, 99, 139] {
            let orig = aa.data[idx];
            aa.data[idx] = orig + eps;
            let up: f64 = ssim(&aa, &b).unwrap();
            aa.data[idx] = orig - eps;
            let dn: f64 = ssim(&aa, &b).unwrap();
            aa.data[idx] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let an = grad.data[idx];
            let denom = fd.abs().max(an.abs()).max(1e-9);
            assert!(
                (fd - an).abs() / denom < 1e-5,
                "idx {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn small_image_below_window_size_works() {
        let a = random_image(3, 4, 4, 1);
        let s: f64 = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
