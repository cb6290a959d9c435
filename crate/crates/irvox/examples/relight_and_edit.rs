//! Relight a trained scene under the held-out environment map (with
//! luminance-importance sampling) and render a material edit.
//!
//! Run `generate_dataset` and `train_tiny` first, then:
//! `cargo run --release --example relight_and_edit`

use irvox::math::{Aabb, RngKey};
use irvox::scene::{MaterialEdit, RenderCfg, RenderMode};
use irvox::scene_io::{load_dataset, read_hdr, write_png, ImageF};
use irvox::shading::PixelEnvMap;
use irvox::trainer::TrainState;
use irvox::volume_render::Ray;

fn main() {
    let ckpt = std::path::Path::new("out/example_run/ckpt_final.tirc");
    if !ckpt.exists() {
        eprintln!("checkpoint missing; run the train_tiny example first");
        std::process::exit(3);
    }
    let state: TrainState<f32> = TrainState::load(ckpt, Aabb::unit()).unwrap();
    let data = std::path::Path::new("out/example_scene");
    let dataset = load_dataset(data, "test", [1.0; 3]).unwrap();
    let (w, h, rgb) = read_hdr(&data.join("env_relight.hdr")).unwrap();
    let env = PixelEnvMap::new(h, w, rgb).unwrap();
    let out = std::path::Path::new("out/example_renders");
    std::fs::create_dir_all(out).unwrap();

    let frame = &dataset.frames[0];
    let (fw, fh) = (frame.camera.width, frame.camera.height);
    let mut rays = Vec::new();
    let mut ids = Vec::new();
    for y in 0..fh {
        for x in 0..fw {
            let (o, d) = frame.camera.ray::<f32>(x as f64 + 0.5, y as f64 + 0.5);
            rays.push(Ray::clipped(o, d, &state.scene.bbox, 0.0));
            ids.push((y * fw + x) as u64);
        }
    }
    let mut cfg = RenderCfg::new(state.config.samples_per_ray(state.scene.density.resolution));
    cfg.secondary = state.config.secondary_cfg();
    cfg.secondary_dirs = 128;
    cfg.rng = RngKey(2);

    let relit = state
        .scene
        .relight_rays(&rays, &ids, &env, &cfg, state.mask.as_ref())
        .unwrap();
    let mut img = ImageF::new(fw, fh);
    for (i, c) in relit.iter().enumerate() {
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&c.0);
    }
    write_png(&out.join("view0_relit.png"), &img, false).unwrap();
    println!("wrote {}", out.join("view0_relit.png").display());

    // Material edit: tint the albedo and polish the surface.
    cfg.edit = Some(MaterialEdit {
        albedo_scale: [0.4, 0.8, 1.6],
        roughness_set: Some(0.15),
    });
    let edited = state
        .scene
        .render_rays(&rays, &ids, RenderMode::Pb, &cfg, state.mask.as_ref());
    let mut img = ImageF::new(fw, fh);
    for (i, c) in edited.iter().enumerate() {
        img.rgb[3 * i..3 * i + 3].copy_from_slice(&c.0);
    }
    write_png(&out.join("view0_edited.png"), &img, false).unwrap();
    println!("wrote {}", out.join("view0_edited.png").display());
}
