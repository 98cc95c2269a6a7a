use std::time::Instant;
use matlift::img::ImageBuf;
use matlift::refine::*;
use matlift::scene::EnvironmentMap;
use matlift::shading::*;

fn main() {
    let env = EnvTable::<f32>::from_env(&EnvironmentMap::constant(32, 16, [0.5; 3]));
    let npix = 3300;
    let samples: Vec<ShadingSample<f32>> = (0..npix)
        .map(|i| {
            let t = i as f32 / npix as f32;
            ShadingSample {
                basecolor: [0.5 + 0.3 * t, 0.4, 0.6],
                roughness: 0.2 + 0.7 * t,
                metallic: t,
                normal: [t.sin() * 0.3, 0.2, (1.0f32 - 0.09 * t * t - 0.04).sqrt()],
                view_dir: [0.1, -0.1, 0.98],
                alpha: 0.9,
            }
        })
        .collect();

    let t = Instant::now();
    let mut acc = 0.0f32;
    for s in &samples {
        acc += shade_pixel(s, &env)[0];
    }
    println!("shade fwd  (seq, {npix} px): {:?}  ({acc:.3})", t.elapsed());

    let t = Instant::now();
    let mut genv = vec![[0.0f32; 3]; env.texel_count()];
    let mut racc = 0.0f32;
    for s in &samples {
        let g = shade_backward_into(s, &env, [1.0, 0.5, 0.2], &mut genv);
        racc += g.roughness;
    }
    println!("shade bwd  (seq, {npix} px): {:?}  ({racc:.3})", t.elapsed());

    let a = ImageBuf::<f32>::from_fn(64, 64, 3, |x, y, c| ((x * 7 + y * 3 + c) % 13) as f32 / 13.0);
    let b = ImageBuf::<f32>::from_fn(64, 64, 3, |x, y, c| ((x * 5 + y * 11 + c) % 17) as f32 / 17.0);
    let t = Instant::now();
    for _ in 0..10 {
        let _ = ssim_with_grad(&a, &b).unwrap();
    }
    println!("ssim+grad 64x64x3: {:?}", t.elapsed() / 10);

    let mask: Vec<u32> = (0..4096).collect();
    let t = Instant::now();
    for _ in 0..10 {
        let _ = loss_3dgs(&a, &b, 0.8, &mask).unwrap();
    }
    println!("loss_3dgs 64x64x3: {:?}", t.elapsed() / 10);
}
