//! A short joint reconstruction on the example dataset: radiance-field
//! warm-up, alpha-mask build, coarse-to-fine upsampling, then the full
//! physically-based objective. Produces `out/example_run/ckpt_final.tirc`
//! for the rendering/evaluation examples.
//!
//! Run `generate_dataset` first, then:
//! `cargo run --release --example train_tiny`

use irvox::math::Aabb;
use irvox::scene_io::load_dataset;
use irvox::trainer::{run_schedule, TrainConfig, TrainState};

fn main() {
    let data = std::path::Path::new("out/example_scene");
    if !data.join("transforms_train.json").exists() {
        eprintln!("dataset missing; run the generate_dataset example first");
        std::process::exit(3);
    }
    let mut cfg = TrainConfig::desk();
    cfg.total_iters = 1200;
    cfg.warmup_iters = 500;
    cfg.upsample_steps = vec![500, 700];
    cfg.start_resolution = 32;
    cfg.final_resolution = 48;
    cfg.mask_refresh_every = 350;
    cfg.batch_rays = 1024;
    cfg.batch_rays_warmup = 512;
    cfg.secondary_dirs = 64;
    cfg.secondary_samples = 64;
    cfg.checkpoint_every = 600;
    cfg.indirect_delay_frac = 0.5;
    cfg.seed = 42;

    let dataset = load_dataset(data, "train", [1.0; 3]).unwrap();
    let state: TrainState<f32> = TrainState::new(cfg, Aabb::unit());
    let out = std::path::Path::new("out/example_run");
    let t0 = std::time::Instant::now();
    let state = run_schedule(state, &dataset, Some(out), |iter, rep, _| {
        if iter % 100 == 0 {
            println!(
                "iter {iter:5}  rf {:.5}  pb {:.5}  total {:.5}",
                rep.rf, rep.pb, rep.total
            );
        }
    })
    .unwrap();
    println!(
        "trained {} iterations in {:.1?}; checkpoint at {}",
        state.iteration,
        t0.elapsed(),
        out.join("ckpt_final.tirc").display()
    );
}
