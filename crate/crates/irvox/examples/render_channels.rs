//! Render every decomposition channel of a trained checkpoint: radiance
//! field, physically-based color, normals, albedo, roughness, mean light
//! visibility, and indirect-only shading.
//!
//! Run `generate_dataset` and `train_tiny` first, then:
//! `cargo run --release --example render_channels`

use irvox::math::{Aabb, RngKey, Vec3};
use irvox::scene::{RenderCfg, RenderMode};
use irvox::scene_io::{load_dataset, write_png, ImageF};
use irvox::trainer::TrainState;
use irvox::volume_render::Ray;

fn main() {
    let ckpt = std::path::Path::new("out/example_run/ckpt_final.tirc");
    if !ckpt.exists() {
        eprintln!("checkpoint missing; run the train_tiny example first");
        std::process::exit(3);
    }
    let state: TrainState<f32> = TrainState::load(ckpt, Aabb::unit()).unwrap();
    let dataset =
        load_dataset(std::path::Path::new("out/example_scene"), "test", [1.0; 3]).unwrap();
    let out = std::path::Path::new("out/example_renders");
    std::fs::create_dir_all(out).unwrap();

    let frame = &dataset.frames[0];
    let (w, h) = (frame.camera.width, frame.camera.height);
    let mut rays = Vec::new();
    let mut ids = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (o, d) = frame.camera.ray::<f32>(x as f64 + 0.5, y as f64 + 0.5);
            rays.push(Ray::clipped(o, d, &state.scene.bbox, 0.0));
            ids.push((y * w + x) as u64);
        }
    }
    let mut cfg = RenderCfg::new(state.config.samples_per_ray(state.scene.density.resolution));
    cfg.secondary = state.config.secondary_cfg();
    cfg.secondary_dirs = 128;
    cfg.rng = RngKey(1);

    for (mode, tag) in [
        (RenderMode::Rf, "rf"),
        (RenderMode::Pb, "pb"),
        (RenderMode::Normal, "normal"),
        (RenderMode::Albedo, "albedo"),
        (RenderMode::Roughness, "roughness"),
        (RenderMode::Visibility, "visibility"),
        (RenderMode::Indirect, "indirect"),
    ] {
        let t0 = std::time::Instant::now();
        let rgb = state
            .scene
            .render_rays(&rays, &ids, mode, &cfg, state.mask.as_ref());
        let mut img = ImageF::new(w, h);
        for (i, c) in rgb.iter().enumerate() {
            let px = if mode == RenderMode::Normal {
                // Remap [-1, 1] normals for display.
                [
                    0.5 * (c.x() + 1.0),
                    0.5 * (c.y() + 1.0),
                    0.5 * (c.z() + 1.0),
                ]
            } else {
                c.0
            };
            img.rgb[3 * i..3 * i + 3].copy_from_slice(&px);
        }
        let path = out.join(format!("view0_{tag}.png"));
        write_png(&path, &img, false).unwrap();
        println!("{tag:10} -> {} [{:.1?}]", path.display(), t0.elapsed());
    }
    let _ = Vec3::<f32>::zero();
}
