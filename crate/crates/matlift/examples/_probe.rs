use std::time::Instant;
use matlift::refine::*;
use matlift::scene::load_scene;

fn main() {
    let dir = std::path::Path::new("/tmp/bench0/scene/lifted");
    let scene = load_scene(dir).unwrap();
    let cfg = RefineConfig::default();
    let t = Instant::now();
    let ctx = TrainContext::<f32>::build(&scene, &cfg).unwrap();
    println!("ctx build: {:?}", t.elapsed());
    let params = matlift::merger::init_params::<f32>(0, 16, matlift::merger::MergerHead::Softmax, 6);
    let mut env = EnvState::<f32>::new(&ctx.env_layout, 0.3);
    env.sync();
    let _ = loss_and_grads(&ctx, 0, &params, &env, &cfg, None).unwrap();
    let t = Instant::now();
    let n = 30;
    for i in 0..n {
        let _ = loss_and_grads(&ctx, i % 16, &params, &env, &cfg, None).unwrap();
    }
    println!("full step avg: {:?}", t.elapsed() / n as u32);
    let cfg2 = RefineConfig { variant: Variant::SupervisedOnly, ..RefineConfig::default() };
    let t = Instant::now();
    for i in 0..n {
        let _ = loss_and_grads(&ctx, i % 16, &params, &env, &cfg2, None).unwrap();
    }
    println!("supervised step avg: {:?}", t.elapsed() / n as u32);
}
